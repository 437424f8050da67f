"""Monte-Carlo estimators of functional entropy, variance, Fisher information
and Poincare energy, with checks for the inequalities that tie them together.

All estimators are plug-in: the Gaussian measure is replaced by the empirical
measure of ``K`` draws. Standard errors come from the influence function of
each estimator (delta method for entropy and variance).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .measures import GaussianProductMeasure, ModalPoint, SeededSampler, sample_joint

KINDS = ("entropy", "variance", "fisher", "poincare")
DEFAULT_K = 10_000
DEFAULT_F_FLOOR = 1e-8


class NonNegativityError(ValueError):
    pass


@dataclass
class FunctionalProbe:
    """A non-negative function of a multi-modal point plus its gradient.

    ``value`` maps a list of ``(K, d_i)`` arrays to ``(K,)`` values and
    ``gradient`` maps the same input to a list of ``(K, d_i)`` gradients.
    """

    value: Callable[[list[np.ndarray]], np.ndarray]
    gradient: Callable[[list[np.ndarray]], list[np.ndarray]]
    measure: GaussianProductMeasure
    name: str = "probe"

    @classmethod
    def from_builder(
        cls,
        builder: Callable[[list[ad.Tensor]], ad.Tensor],
        measure: GaussianProductMeasure,
        name: str = "probe",
    ) -> "FunctionalProbe":
        """Wrap a row-wise Tensor builder; gradients come from the autodiff engine."""

        def value(zs):
            with ad.no_grad():
                return builder([ad.Tensor(z) for z in zs]).data

        def gradient(zs):
            ts = [ad.variable(z) for z in zs]
            out = builder(ts)
            return [g.data for g in ad.grad(out.sum(), ts)]

        return cls(value, gradient, measure, name)

    def scaled(self, c: float) -> "FunctionalProbe":
        return FunctionalProbe(
            lambda zs: c * self.value(zs),
            lambda zs: [c * g for g in self.gradient(zs)],
            self.measure,
            f"{c}*{self.name}",
        )


@dataclass
class EstimateReport:
    kind: str
    value: float
    std_error: float
    sample_count: int
    seed: int | None = None
    floor_hits: int = 0

    def to_record(self) -> str:
        seed = "-" if self.seed is None else str(self.seed)
        return f"{self.kind}\t{self.value!r}\t{self.std_error!r}\t{self.sample_count}\t{seed}"

    @classmethod
    def from_record(cls, line: str) -> "EstimateReport":
        kind, value, se, k, seed = line.rstrip("\n").split("\t")
        if kind not in KINDS:
            raise ValueError(f"unknown estimate kind {kind!r}")
        return cls(kind, float(value), float(se), int(k), None if seed == "-" else int(seed))


@dataclass
class InequalityReport:
    name: str
    lhs: float
    rhs: float
    std_error: float
    tolerance: float
    slack: float = field(init=False)
    holds_within_tolerance: bool = field(init=False)

    def __post_init__(self):
        self.slack = self.rhs - self.lhs
        self.holds_within_tolerance = bool(self.slack >= -self.tolerance)


@dataclass
class RothausReport:
    eps: float
    residual: float
    std_error: float
    entropy: EstimateReport
    variance: EstimateReport


# plug-in estimators on fixed samples


def _check_nonnegative(f: np.ndarray) -> None:
    if np.any(f < 0):
        raise NonNegativityError(f"probe returned negative value {float(f.min())}")


def _se(psi: np.ndarray) -> float:
    k = psi.size
    return float(np.std(psi, ddof=1) / np.sqrt(k)) if k > 1 else 0.0


def _phi(d: np.ndarray) -> np.ndarray:
    """``(1+d) log(1+d) - d`` without cancellation; a Taylor series for small ``|d|``."""
    out = np.empty_like(d)
    small = np.abs(d) < 0.05
    ds = d[small]
    acc = np.zeros_like(ds)
    for n in range(16, 1, -1):
        acc = acc * ds + (-1.0) ** n / (n * (n - 1))
    out[small] = acc * ds * ds
    dl = d[~small]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[~small] = np.where(dl > -1.0, (1.0 + dl) * np.log1p(dl) - dl, 1.0)
    return out


def entropy_terms(f: np.ndarray) -> tuple[float, np.ndarray]:
    """Plug-in entropy and its influence values; ``0 log 0`` is taken as 0.

    Uses ``mean(f log(f/m)) = m * mean(phi((f-m)/m))``, which is the same
    estimate written as a sum of non-negative terms, so nearly constant
    probes do not lose digits to cancellation.
    """
    f = np.asarray(f, dtype=np.float64)
    _check_nonnegative(f)
    mean = f.mean()
    if mean == 0:
        return 0.0, np.zeros_like(f)
    psi = mean * _phi((f - mean) / mean)
    return max(float(psi.mean()), 0.0), psi


def variance_terms(f: np.ndarray) -> tuple[float, np.ndarray]:
    f = np.asarray(f, dtype=np.float64)
    sq = (f - f.mean()) ** 2
    return float(sq.mean()), sq


def _squared_norm(grads: Sequence[np.ndarray], which: Sequence[int] | None = None) -> np.ndarray:
    idx = range(len(grads)) if which is None else which
    return sum((grads[i] ** 2).sum(axis=1) for i in idx)


def _report(kind, value, psi, k, seed, hits=0) -> EstimateReport:
    return EstimateReport(kind, float(value), _se(psi), k, seed, hits)


def reports_from_samples(
    f: np.ndarray,
    grad_sq: np.ndarray | None,
    kinds: Sequence[str],
    seed: int | None,
    f_floor: float = DEFAULT_F_FLOOR,
) -> dict[str, EstimateReport]:
    """Every requested estimate from one shared sample set."""
    out = {}
    k = f.size
    _check_nonnegative(f)
    for kind in kinds:
        if kind == "entropy":
            v, psi = entropy_terms(f)
        elif kind == "variance":
            v, psi = variance_terms(f)
        elif kind == "poincare":
            psi = grad_sq
            v = grad_sq.mean()
        elif kind == "fisher":
            denom = np.maximum(f, f_floor)
            psi = grad_sq / denom
            v = psi.mean()
            out[kind] = _report(kind, v, psi, k, seed, int(np.sum(f < f_floor)))
            continue
        else:
            raise ValueError(f"unknown estimate kind {kind!r}")
        out[kind] = _report(kind, v, psi, k, seed)
    return out


def _draw(p: FunctionalProbe, K: int, seed: int, need_grad: bool):
    if K < 2:
        raise ValueError("K must be at least 2")
    zs = sample_joint(p.measure, SeededSampler(seed), K)
    f = np.asarray(p.value(zs), dtype=np.float64)
    grads = p.gradient(zs) if need_grad else None
    return zs, f, grads


# public estimators


def estimate_entropy(p: FunctionalProbe, K: int = DEFAULT_K, seed: int = 0) -> EstimateReport:
    _, f, _ = _draw(p, K, seed, False)
    return reports_from_samples(f, None, ["entropy"], seed)["entropy"]


def estimate_variance(p: FunctionalProbe, K: int = DEFAULT_K, seed: int = 0) -> EstimateReport:
    _, f, _ = _draw(p, K, seed, False)
    return reports_from_samples(f, None, ["variance"], seed)["variance"]


def estimate_fisher_information(
    p: FunctionalProbe, K: int = DEFAULT_K, seed: int = 0, f_floor: float = DEFAULT_F_FLOOR
) -> EstimateReport:
    """Mean of ``||grad f||^2 / max(f, f_floor)``; no factor one half."""
    _, f, g = _draw(p, K, seed, True)
    return reports_from_samples(f, _squared_norm(g), ["fisher"], seed, f_floor)["fisher"]


def estimate_poincare_energy(
    p: FunctionalProbe, K: int = DEFAULT_K, seed: int = 0
) -> EstimateReport:
    _, f, g = _draw(p, K, seed, True)
    return reports_from_samples(f, _squared_norm(g), ["poincare"], seed)["poincare"]


def estimate_all(
    p: FunctionalProbe, K: int = DEFAULT_K, seed: int = 0, f_floor: float = DEFAULT_F_FLOOR
) -> dict[str, EstimateReport]:
    """All four estimates on one paired sample set."""
    _, f, g = _draw(p, K, seed, True)
    return reports_from_samples(f, _squared_norm(g), KINDS, seed, f_floor)


def _clamped_draws(p, clamp, i, K, sampler):
    m = p.measure
    zs = [np.broadcast_to(c, (K, c.size)) for c in clamp]
    zs[i] = m.means[i][None, :] + np.sqrt(m.variances[i]) * sampler.normal((K, m.dims[i]))
    return zs


def _clamp_point(p: FunctionalProbe, x: ModalPoint | None) -> list[np.ndarray]:
    if x is None:
        return [np.asarray(mu, dtype=np.float64) for mu in p.measure.means]
    if x.dims != p.measure.dims:
        raise ValueError(f"clamp point dims {x.dims} do not match measure dims {p.measure.dims}")
    return list(x.modalities)


def estimate_tensorized(
    p: FunctionalProbe,
    x: ModalPoint | None,
    kind: str,
    K: int = DEFAULT_K,
    seed: int = 0,
    f_floor: float = DEFAULT_F_FLOOR,
) -> list[EstimateReport]:
    """Per-modality estimates of ``z_i -> f(z_i^x)`` with the rest clamped at ``x``.

    ``z_i`` is drawn from modality ``i`` of the probe's measure. Gradients for
    the fisher and poincare kinds are taken with respect to ``z_i`` only.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown estimate kind {kind!r}")
    if K < 2:
        raise ValueError("K must be at least 2")
    clamp = _clamp_point(p, x)
    root = SeededSampler(seed)
    reports = []
    for i in range(p.measure.n):
        zs = _clamped_draws(p, clamp, i, K, root.spawn(i))
        f = np.asarray(p.value(zs), dtype=np.float64)
        gsq = _squared_norm(p.gradient(zs), [i]) if kind in ("fisher", "poincare") else None
        reports.append(reports_from_samples(f, gsq, [kind], seed, f_floor)[kind])
    return reports


def estimate_tensorized_integrated(
    p: FunctionalProbe, kind: str, outer: int, K: int, seed: int = 0
) -> list[EstimateReport]:
    """Per-modality terms with the clamp point itself integrated over the measure.

    For modality ``i`` this estimates ``E_zhat[ stat_i(z_i -> f(zhat with z_i)) ]``
    with ``outer`` clamp points and ``K`` inner draws each. The reported
    standard error is the spread across clamp points. Inner plug-in values
    get the first-order small-sample correction (``K/(K-1)`` for variance,
    ``+ s^2 / (2 mean K)`` for entropy) since ``K`` is usually small here.
    """
    if kind not in ("entropy", "variance"):
        raise ValueError("integrated tensorization is defined for entropy and variance")
    m = p.measure
    root = SeededSampler(seed)
    clamps = sample_joint(m, root.spawn(10_000), outer)
    reports = []
    for i in range(m.n):
        s = root.spawn(i)
        zs = []
        for j in range(m.n):
            if j == i:
                zs.append(m.means[i][None, :] + np.sqrt(m.variances[i]) * s.normal((outer * K, m.dims[i])))
            else:
                zs.append(np.repeat(clamps[j], K, axis=0))
        f = np.asarray(p.value(zs), dtype=np.float64).reshape(outer, K)
        _check_nonnegative(f)
        if kind == "variance":
            per_clamp = f.var(axis=1, ddof=1)
        else:
            raw = np.array([entropy_terms(row)[0] for row in f])
            mean = f.mean(axis=1)
            safe = np.where(mean > 0, mean, 1.0)
            per_clamp = raw + np.where(mean > 0, f.var(axis=1, ddof=1) / (2 * safe * K), 0.0)
        reports.append(
            EstimateReport(kind, float(per_clamp.mean()), _se(per_clamp), outer * K, seed)
        )
    return reports


def rothaus_residual(p: FunctionalProbe, eps: float, K: int = DEFAULT_K, seed: int = 0) -> RothausReport:
    """``Ent(1 + eps f) - Var(eps f)`` with both terms on the same draws."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _, f, _ = _draw(p, K, seed, False)
    _check_nonnegative(f)
    ent, psi_e = entropy_terms(1.0 + eps * f)
    var, psi_v = variance_terms(eps * f)
    return RothausReport(
        eps,
        ent - var,
        _se(psi_e - psi_v),
        EstimateReport("entropy", ent, _se(psi_e), K, seed),
        EstimateReport("variance", var, _se(psi_v), K, seed),
    )


def _combined(*ses: float) -> float:
    return float(np.sqrt(sum(s * s for s in ses)))


def verify_inequalities(
    p: FunctionalProbe,
    x: ModalPoint | None = None,
    K: int = DEFAULT_K,
    seed: int = 0,
    tol: float = 0.0,
    tol_sigmas: float = 5.0,
    clamp: str = "integrated",
    outer: int = 400,
    inner: int = 256,
) -> list[InequalityReport]:
    """Log-Sobolev, Poincare, tensorization and Efron-Stein checks for one probe.

    A check passes when ``slack >= -(tol * (|lhs| + |rhs| + 1) + tol_sigmas * se)``.
    The gradient bounds are weighted by each modality's variance so they stay
    valid for non-standard Gaussians. ``clamp="integrated"`` averages the
    per-modality terms over clamp points drawn from the measure; ``"point"``
    clamps once at ``x`` (or the measure mean), which is a cheaper
    approximation and not a guaranteed bound.
    """
    zs, f, grads = _draw(p, K, seed, True)
    _check_nonnegative(f)
    m = p.measure
    weighted = sum(m.variances[i] * (grads[i] ** 2).sum(axis=1) for i in range(m.n))
    ent, psi_e = entropy_terms(f)
    var, psi_v = variance_terms(f)
    fisher_psi = 0.5 * weighted / np.maximum(f, DEFAULT_F_FLOOR)
    energy_psi = weighted

    if clamp == "integrated":
        t_ent = estimate_tensorized_integrated(p, "entropy", outer, inner, seed + 1)
        t_var = estimate_tensorized_integrated(p, "variance", outer, inner, seed + 2)
    elif clamp == "point":
        t_ent = estimate_tensorized(p, x, "entropy", K, seed + 1)
        t_var = estimate_tensorized(p, x, "variance", K, seed + 2)
    else:
        raise ValueError(f"unknown clamp mode {clamp!r}")

    def make(name, lhs, rhs, se):
        margin = tol * (abs(lhs) + abs(rhs) + 1.0) + tol_sigmas * se
        return InequalityReport(name, lhs, rhs, se, margin)

    return [
        make("log-sobolev", ent, float(fisher_psi.mean()), _se(psi_e - fisher_psi)),
        make("poincare", var, float(energy_psi.mean()), _se(psi_v - energy_psi)),
        make(
            "tensorization",
            ent,
            sum(r.value for r in t_ent),
            _combined(_se(psi_e), *(r.std_error for r in t_ent)),
        ),
        make(
            "efron-stein",
            var,
            sum(r.value for r in t_var),
            _combined(_se(psi_v), *(r.std_error for r in t_var)),
        ),
    ]
