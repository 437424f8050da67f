"""Stock non-negative test functions with known moments."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .estimators import FunctionalProbe
from .measures import GaussianProductMeasure


def _row_sum(t: ad.Tensor) -> ad.Tensor:
    return t.sum(axis=1)


def exponential(a: float = 1.0, measure: GaussianProductMeasure | None = None) -> FunctionalProbe:
    """``exp(a * sum(z))``; saturates the Gaussian log-Sobolev inequality."""
    measure = measure or GaussianProductMeasure.standard([1])

    def build(zs):
        return ad.exp(sum(_row_sum(z) for z in zs) * a)

    return FunctionalProbe.from_builder(build, measure, f"exp(a={a})")


def separable_exponential(a: float = 1.0, b: float = 1.0) -> FunctionalProbe:
    """``exp(a z1 + b z2)`` over two scalar modalities."""

    def build(zs):
        return ad.exp(_row_sum(zs[0]) * a + _row_sum(zs[1]) * b)

    return FunctionalProbe.from_builder(
        build, GaussianProductMeasure.standard([1, 1]), f"exp({a}z1+{b}z2)"
    )


def shifted_linear(shift: float = 10.0, measure: GaussianProductMeasure | None = None) -> FunctionalProbe:
    """``z + shift``; saturates the Poincare inequality."""
    measure = measure or GaussianProductMeasure.standard([1])

    def build(zs):
        return sum(_row_sum(z) for z in zs) + shift

    return FunctionalProbe.from_builder(build, measure, f"z+{shift}")


def square(offset: float = 0.0, scale: float = 1.0, measure=None) -> FunctionalProbe:
    """``offset + scale * ||z||^2``."""
    measure = measure or GaussianProductMeasure.standard([1])

    def build(zs):
        return sum(ad.norm_squared(z, axis=1) for z in zs) * scale + offset

    return FunctionalProbe.from_builder(build, measure, f"{offset}+{scale}*z^2")


def constant(c: float = 2.5, measure=None) -> FunctionalProbe:
    measure = measure or GaussianProductMeasure.standard([1])
    return FunctionalProbe(
        lambda zs: np.full(zs[0].shape[0], c),
        lambda zs: [np.zeros_like(z) for z in zs],
        measure,
        f"const({c})",
    )


def softplus_mix(weights: list[np.ndarray], bias: float, offset: float, measure) -> FunctionalProbe:
    """``offset + softplus(sum_i w_i . z_i + bias)``."""

    def build(zs):
        s = sum(ad.matmul(z, ad.constant(w.reshape(-1, 1))) for z, w in zip(zs, weights))
        s = ad.reshape(s, (zs[0].shape[0],)) + bias
        return ad.log(ad.exp(s) + 1.0) + offset

    return FunctionalProbe.from_builder(build, measure, "softplus")


def random_probe(rng: np.random.Generator, dims: list[int] | None = None) -> FunctionalProbe:
    """A smooth positive probe from one of three families, with random coefficients."""
    dims = dims or [int(d) for d in rng.integers(1, 4, size=int(rng.integers(1, 3)))]
    variances = tuple(float(v) for v in rng.uniform(0.3, 1.5, size=len(dims)))
    means = tuple(rng.normal(0.0, 0.5, size=d) for d in dims)
    measure = GaussianProductMeasure(means, variances)
    family = int(rng.integers(0, 3))
    weights = [rng.normal(0.0, 0.5, size=d) for d in dims]
    if family == 0:
        offset = float(rng.uniform(0.1, 3.0))
        scales = [float(c) for c in rng.uniform(0.1, 1.0, size=len(dims))]

        def build(zs):
            return sum(ad.norm_squared(z, axis=1) * c for z, c in zip(zs, scales)) + offset

        return FunctionalProbe.from_builder(build, measure, "poly")
    if family == 1:

        def build(zs):
            lin = sum(ad.reshape(ad.matmul(z, ad.constant(w.reshape(-1, 1))), (z.shape[0],)) for z, w in zip(zs, weights))
            return ad.exp(lin)

        return FunctionalProbe.from_builder(build, measure, "exp")
    return softplus_mix(weights, float(rng.normal()), float(rng.uniform(0.0, 1.0)), measure)


def core_suite() -> list[FunctionalProbe]:
    return [
        exponential(0.5),
        exponential(1.0),
        shifted_linear(10.0),
        square(),
        square(offset=1.0),
        separable_exponential(),
        softplus_mix(
            [np.array([0.7, -0.3]), np.array([0.4])],
            0.2,
            0.5,
            GaussianProductMeasure((np.zeros(2), np.zeros(1)), (1.0, 0.5)),
        ),
    ]


BUILTIN = {
    "exp": lambda a=1.0: exponential(a),
    "linear": lambda shift=10.0: shifted_linear(shift),
    "square": lambda offset=0.0: square(offset),
    "separable-exp": lambda a=1.0: separable_exponential(a, a),
    "constant": lambda c=2.5: constant(c),
}
