import numpy as np
import pytest

from funcent import autodiff as ad
from funcent.measures import SeededSampler, batch_variances
from funcent.model import cross_entropy_logits, forward_logits, init_params, one_hot
from funcent.objectives import (
    MODES,
    ObjectiveError,
    RegularizerConfig,
    inverse_penalty,
    regularizer_term,
    training_objective,
)
from oracles import central_difference, relative_error

DIMS = [2, 3]
REG_MODES = [m for m in MODES if m != "none"]


def toy(seed=0, batch=2, classes=3, hidden=4):
    rng = np.random.default_rng(seed)
    params = init_params(DIMS, hidden, classes, seed=seed)
    xs = [rng.uniform(size=(batch, d)) for d in DIMS]
    ys = rng.integers(0, classes, size=batch)
    return params, xs, ys


def test_penalty_arithmetic():
    assert inverse_penalty(np.array([0.5, 0.25]), 0.1, 1e-6) == pytest.approx(0.6, abs=1e-15)
    t = inverse_penalty(ad.constant(np.array([[0.5, 0.25]])), 0.1, 1e-6)
    assert t.data[0] == pytest.approx(0.6, abs=1e-15)
    assert inverse_penalty(np.array([0.0, 1.0]), 1.0, 1e-3) == pytest.approx(1001.0)


def test_objective_arithmetic():
    # CE part 1.0 and penalties (0.6, 0.6) average to 1.6
    ce = np.array([1.0, 1.0])
    pen = inverse_penalty(np.array([[0.5, 0.25], [0.5, 0.25]]), 0.1, 1e-6)
    assert np.mean(ce + pen) == pytest.approx(1.6, abs=1e-15)


@pytest.mark.parametrize("mode", REG_MODES)
def test_zero_lambda_gives_zero_penalty(mode):
    params, xs, _ = toy()
    br = regularizer_term(params, xs, RegularizerConfig(mode=mode, lam=0.0, K=2), SeededSampler(0))
    assert np.all(br.penalty_values == 0.0)


def test_constant_classifier_hits_the_clamp():
    params, xs, _ = toy()
    params = params.replace({k: np.zeros_like(v) for k, v in params.arrays().items()})
    cfg = RegularizerConfig(mode="fisher_tensorized", lam=0.5, K=3, info_floor=1e-6)
    br = regularizer_term(params, xs, cfg, SeededSampler(1))
    assert np.all(br.info == 0.0)
    np.testing.assert_allclose(br.penalty_values, 0.5 * 2 / 1e-6)
    assert br.clamp_events == 2 * len(DIMS)


def test_breakdown_matches_inverse_formula_exactly():
    params, xs, _ = toy(1, batch=3)
    for mode in ("fisher_tensorized", "poincare_tensorized", "fisher_joint"):
        cfg = RegularizerConfig(mode=mode, lam=0.3, K=4)
        br = regularizer_term(params, xs, cfg, SeededSampler(2))
        assert br.info.shape == (3, len(DIMS) if cfg.tensorized else 1)
        assert np.all(br.info >= 0)
        expected = 0.3 * (1.0 / np.maximum(br.info, cfg.info_floor)).sum(axis=1)
        assert br.penalty_values.tobytes() == expected.tobytes() or np.allclose(
            br.penalty_values, expected, rtol=1e-15, atol=0
        )


def test_fisher_info_matches_a_hand_built_estimate():
    params, xs, _ = toy(2, batch=1)
    cfg = RegularizerConfig(mode="fisher_tensorized", lam=1.0, K=5)
    variances = [batch_variances(x, cfg.variance_floor) for x in xs]
    br = regularizer_term(params, xs, cfg, SeededSampler(3), variances)
    # redraw the same noise and evaluate modality 0 point by point
    eps = SeededSampler(3).normal((5, 1, DIMS[0]))
    ref = ad.log_softmax(forward_logits(params, xs)).data
    vals = []
    for k in range(5):
        z = ad.variable(xs[0] + np.sqrt(variances[0])[:, None] * eps[k])
        p = ad.softmax(forward_logits(params, [z, ad.constant(xs[1])]))
        f = -(p * ad.constant(ref)).sum()
        (g,) = ad.grad(f, [z])
        vals.append(np.sum(g.data**2) / f.item())
    assert br.info[0, 0] == pytest.approx(np.mean(vals), rel=1e-12)


def test_direct_modes_subtract():
    params, xs, _ = toy(3, batch=2)
    for mode in ("entropy_direct", "variance_direct"):
        br = regularizer_term(params, xs, RegularizerConfig(mode=mode, lam=0.2, K=6), SeededSampler(4))
        np.testing.assert_allclose(br.penalty_values, -0.2 * br.info.sum(axis=1), rtol=1e-15)
        inv = regularizer_term(
            params, xs, RegularizerConfig(mode=mode, lam=0.2, K=6, direct_form="inverse"), SeededSampler(4)
        )
        np.testing.assert_allclose(inv.penalty_values, 0.2 * (1 / np.maximum(inv.info, 1e-6)).sum(axis=1))


def test_mode_none_is_plain_cross_entropy():
    params, xs, ys = toy(4, classes=10)
    zero = params.replace({k: np.zeros_like(v) for k, v in params.arrays().items()})
    assert training_objective(zero, xs, ys, RegularizerConfig()).ce == pytest.approx(np.log(10), abs=1e-12)
    res = training_objective(params, xs, ys, RegularizerConfig())
    plain = cross_entropy_logits(one_hot(ys, 10), forward_logits(params, xs)).mean()
    assert res.loss.data.tobytes() == plain.data.tobytes()
    assert res.breakdown is None


def test_lambda_doubling():
    params, xs, ys = toy(5)
    a = training_objective(params, xs, ys, RegularizerConfig("fisher_tensorized", 0.1, K=3), SeededSampler(6))
    b = training_objective(params, xs, ys, RegularizerConfig("fisher_tensorized", 0.2, K=3), SeededSampler(6))
    assert b.penalty == pytest.approx(2 * a.penalty, rel=1e-14)
    assert a.ce == b.ce


def test_penalty_monotone_in_information():
    rng = np.random.default_rng(7)
    info = rng.uniform(1e-5, 2.0, size=(50, 2))
    bumped = info.copy()
    bumped[:, 0] *= 1.5
    assert np.all(inverse_penalty(bumped, 1.0, 1e-6) <= inverse_penalty(info, 1.0, 1e-6))


def test_errors():
    params, xs, ys = toy()
    with pytest.raises(ObjectiveError):
        regularizer_term(params, xs, RegularizerConfig(), SeededSampler(0))
    with pytest.raises(ObjectiveError):
        training_objective(params, xs, ys, RegularizerConfig("fisher_tensorized", 1.0))
    with pytest.raises(ObjectiveError):
        training_objective(params, xs, ys[:0], RegularizerConfig())
    for bad in (dict(mode="nope"), dict(lam=-1.0), dict(K=0), dict(f_floor=0.0), dict(antithetic=True, K=3)):
        with pytest.raises(ValueError):
            RegularizerConfig(**bad)


def test_antithetic_pairs_cancel_linear_noise():
    params, xs, _ = toy(8, batch=1)
    cfg = RegularizerConfig(mode="poincare_tensorized", lam=1.0, K=4, antithetic=True)
    br = regularizer_term(params, xs, cfg, SeededSampler(9))
    assert np.all(np.isfinite(br.info))


def _objective_fd(mode, detach, freeze_reference):
    params, xs, ys = toy(10, batch=2)
    cfg = RegularizerConfig(mode=mode, lam=0.05, K=3, detach_reference=detach)
    names = params.names()
    res = training_objective(params, xs, ys, cfg, SeededSampler(11))
    grads = dict(zip(names, (g.data for g in ad.grad(res.loss, params.variables()))))
    ref_logits = forward_logits(params, xs).data

    def value(name, arr):
        p = params.replace({**params.arrays(), name: arr})
        # no no_grad() here: the penalty itself needs input gradients
        if not freeze_reference:
            return training_objective(p, xs, ys, cfg, SeededSampler(11)).loss.item()
        # the reference enters as a constant, exactly as the detached objective sees it
        logits = forward_logits(p, xs)
        ce = cross_entropy_logits(one_hot(ys, p.classes), logits).mean().item()
        br = regularizer_term(p, xs, cfg, SeededSampler(11), logits_x=ad.constant(ref_logits))
        return ce + br.penalty.data.mean()

    worst = 0.0
    for name in names:
        num = central_difference(lambda v: value(name, v), params.arrays()[name], 1e-5)
        # entries below 1e-8 are at the roundoff level of a 1e-5 step
        worst = max(worst, relative_error(grads[name], num, floor=1e-8))
    return worst


@pytest.mark.parametrize("mode", REG_MODES)
def test_objective_gradient_matches_fd_with_attached_reference(mode):
    assert _objective_fd(mode, detach=False, freeze_reference=False) <= 1e-3


@pytest.mark.parametrize("mode", ["fisher_tensorized", "poincare_tensorized"])
def test_objective_gradient_matches_fd_with_frozen_reference(mode):
    assert _objective_fd(mode, detach=True, freeze_reference=True) <= 1e-3
