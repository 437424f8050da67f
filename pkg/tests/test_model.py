import numpy as np
import pytest

from funcent import autodiff as ad
from funcent.measures import ModalPoint
from funcent.model import (
    CheckpointError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    cross_entropy,
    cross_entropy_logits,
    forward_logits,
    forward_softmax,
    init_params,
    load_checkpoint,
    one_hot,
    param_names,
    save_checkpoint,
    sensitivity,
    shannon_entropy,
)
from oracles import central_difference, relative_error

DIMS = [3, 5]


def zero_params(dims=DIMS, classes=10):
    p = init_params(dims, hidden=4, classes=classes)
    return p.replace({k: np.zeros_like(v) for k, v in p.arrays().items()})


def random_inputs(rng, dims=DIMS, batch=4):
    return [rng.uniform(size=(batch, d)) for d in dims]


def test_init_examples():
    a = init_params(DIMS, 8, 10, seed=3)
    b = init_params(DIMS, 8, 10, seed=3)
    assert all(a.arrays()[k].tobytes() == b.arrays()[k].tobytes() for k in a.names())
    assert init_params(DIMS, 1, 2).arrays()["head.w"].shape == (2, 2)
    logits = forward_logits(init_params(DIMS, 8, 10, seed=0), random_inputs(np.random.default_rng(0)))
    assert np.all(np.isfinite(logits.data))
    assert a.names() == param_names(2)
    with pytest.raises(ValueError):
        init_params([3, 0])


def test_he_scale():
    w = init_params([400], hidden=300, seed=1).arrays()["enc0.w1"]
    assert w.std() == pytest.approx(np.sqrt(2.0 / 400), rel=0.02)
    assert not init_params([400], hidden=300, seed=1).arrays()["enc0.b1"].any()


def test_forward_examples():
    rng = np.random.default_rng(1)
    p = forward_softmax(zero_params(), random_inputs(rng)).data
    np.testing.assert_allclose(p, 0.1, atol=1e-15)
    q = forward_softmax(init_params(DIMS, 8, 10, seed=2), random_inputs(rng)).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ad.AutodiffError):
        forward_logits(init_params(DIMS), [np.zeros((1, 3)), np.zeros((1, 4))])


def test_forward_input_gradient_matches_fd():
    rng = np.random.default_rng(3)
    params = init_params(DIMS, 6, 4, seed=3)
    xs = random_inputs(rng, batch=2)
    r = rng.normal(size=(2, 4))

    def score(x0):
        return (forward_softmax(params, [x0, ad.constant(xs[1])]) * ad.as_tensor(r)).sum()

    x0 = ad.variable(xs[0])
    (g,) = ad.grad(score(x0), [x0])
    num = central_difference(lambda v: score(ad.constant(v)).item(), xs[0])
    assert relative_error(g.data, num) <= 1e-4


def test_cross_entropy_examples():
    assert cross_entropy(one_hot([3], 10), np.full((1, 10), 0.1))[0] == pytest.approx(np.log(10), abs=1e-12)
    assert cross_entropy([0.5, 0.5], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-12)
    rng = np.random.default_rng(4)
    q = rng.dirichlet(np.ones(6))
    logits = rng.normal(size=6)
    p = np.exp(logits) / np.exp(logits).sum()
    naive = -sum(q[k] * np.log(p[k]) for k in range(6))
    assert cross_entropy_logits(q, ad.constant(logits)).item() == pytest.approx(naive, abs=1e-12)


def test_sensitivity_examples():
    params = zero_params(classes=2)
    x = ModalPoint([np.full(3, 0.4), np.full(5, 0.6)])
    f = sensitivity(params, x, [m[None] for m in x.modalities])
    assert f.item() == pytest.approx(np.log(2), abs=1e-12)

    rng = np.random.default_rng(5)
    for seed in range(10):
        params = init_params(DIMS, 6, 5, seed=seed)
        x = ModalPoint([m[0] for m in random_inputs(rng, batch=1)])
        z = random_inputs(rng, batch=16)
        assert np.all(sensitivity(params, x, z).data >= 0)
        assert sensitivity(params, x, [m[None] for m in x.modalities]).item() == pytest.approx(
            shannon_entropy(forward_softmax(params, x).data)[0], abs=1e-12
        )


def test_sensitivity_input_gradient_at_x_matches_fd():
    rng = np.random.default_rng(6)
    params = init_params(DIMS, 6, 4, seed=6)
    x = ModalPoint([m[0] for m in random_inputs(rng, batch=1)])
    x0 = x.modalities[0][None]

    def f(z0):
        return sensitivity(params, x, [z0, x.modalities[1][None]]).sum()

    z = ad.variable(x0)
    (g,) = ad.grad(f(z), [z])
    num = central_difference(lambda v: f(ad.constant(v)).item(), x0)
    assert relative_error(g.data, num) <= 1e-4


def test_reference_is_detached_by_default():
    rng = np.random.default_rng(7)
    params = init_params(DIMS, 6, 4, seed=7)
    x = ModalPoint([m[0] for m in random_inputs(rng, batch=1)])
    z = random_inputs(rng, batch=3)
    w = params.tensors["head.b"]
    (g_det,) = ad.grad(sensitivity(params, x, z).sum(), [w])
    (g_full,) = ad.grad(sensitivity(params, x, z, detach_reference=False).sum(), [w])
    ref = ad.log_softmax(forward_logits(params, x)).detach()
    manual = -(forward_softmax(params, z) * ref).sum()
    (g_manual,) = ad.grad(manual, [w])
    np.testing.assert_allclose(g_det.data, g_manual.data, atol=1e-14)
    assert not np.allclose(g_det.data, g_full.data)


def test_weight_slot_swaps_roles():
    rng = np.random.default_rng(8)
    params = init_params(DIMS, 6, 4, seed=8)
    x = ModalPoint([m[0] for m in random_inputs(rng, batch=1)])
    z = random_inputs(rng, batch=3)
    px = forward_softmax(params, x).data
    pz = forward_softmax(params, z).data
    got = sensitivity(params, x, z, reference_slot="weight").data
    np.testing.assert_allclose(got, cross_entropy(px, pz), atol=1e-12)
    with pytest.raises(ValueError):
        sensitivity(params, x, z, reference_slot="other")


def test_softmax_shift_invariance():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(5, 10))
    a = ad.softmax(ad.constant(logits)).data
    b = ad.softmax(ad.constant(logits + 37.5)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gibbs_inequality():
    rng = np.random.default_rng(10)
    for _ in range(200):
        q = rng.dirichlet(np.ones(7))
        p = rng.dirichlet(np.ones(7))
        assert cross_entropy(q, p) >= shannon_entropy(q) - 1e-12


def test_checkpoint_round_trip(tmp_path):
    params = init_params(DIMS, 8, 10, seed=11)
    path = tmp_path / "m.fent"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert back.dims == DIMS and back.hidden == 8 and back.classes == 10
    assert checkpoint_bytes(back) == path.read_bytes()
    blob = path.read_bytes()
    assert blob[:5] == b"FENT1"
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"FENT2" + blob[5:])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(blob + b"\0")
