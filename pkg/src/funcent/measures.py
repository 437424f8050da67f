"""Per-sample Gaussian product measures and reproducible perturbation draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_VARIANCE_FLOOR = 1e-4


@dataclass
class ModalPoint:
    """One multi-modal sample ``x = (x_1, ..., x_n)`` with its class label."""

    modalities: list[np.ndarray]
    label: int = 0

    def __post_init__(self):
        self.modalities = [np.asarray(m, dtype=np.float64).reshape(-1) for m in self.modalities]
        if not self.modalities:
            raise ValueError("a ModalPoint needs at least one modality")
        if any(m.size == 0 for m in self.modalities):
            raise ValueError("modalities must be non-empty")
        if self.label < 0:
            raise ValueError(f"invalid label {self.label}")

    @property
    def n(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> list[int]:
        return [m.size for m in self.modalities]


@dataclass(frozen=True)
class GaussianProductMeasure:
    """Isotropic Gaussian per modality; the measure is their product."""

    means: tuple[np.ndarray, ...]
    variances: tuple[float, ...]

    def __post_init__(self):
        if len(self.means) != len(self.variances):
            raise ValueError("one variance per modality is required")
        if any(v <= 0 for v in self.variances):
            raise ValueError("variances must be positive")

    @property
    def n(self) -> int:
        return len(self.means)

    @property
    def dims(self) -> list[int]:
        return [m.size for m in self.means]

    @classmethod
    def standard(cls, dims: list[int]) -> "GaussianProductMeasure":
        return cls(tuple(np.zeros(d) for d in dims), tuple(1.0 for _ in dims))


class SeededSampler:
    """Counter-based Gaussian stream (Philox bits, Box-Muller transform).

    ``counter`` is the number of normals handed out so far. Two samplers with
    the same seed produce the same sequence for the same sequence of calls.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        state = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._bits = np.random.Generator(np.random.Philox(key=state.generate_state(2, np.uint64)))
        self.counter = 0

    def spawn(self, *keys: int) -> "SeededSampler":
        """Independent child stream; does not advance this sampler."""
        return SeededSampler(self.seed, *self.keys, *keys)

    def uniform(self, size) -> np.ndarray:
        return self._bits.random(size)

    def normal(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = 1.0 - self._bits.random(pairs)  # (0, 1]
        u2 = self._bits.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        self.counter += count
        return out[:count].reshape(shape)


def population_variance(values: np.ndarray, axis: int = -1) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean(axis=axis, keepdims=True)
    return (centered * centered).mean(axis=axis)


def measure_from_point(
    x: ModalPoint, floor: float = DEFAULT_VARIANCE_FLOOR
) -> GaussianProductMeasure:
    """Gaussian around ``x``; each modality's variance is the spread of its own coordinates."""
    means = tuple(m.copy() for m in x.modalities)
    variances = tuple(max(float(population_variance(m)), floor) for m in x.modalities)
    return GaussianProductMeasure(means, variances)


def batch_variances(block: np.ndarray, floor: float = DEFAULT_VARIANCE_FLOOR) -> np.ndarray:
    """Row-wise :func:`measure_from_point` variances for a ``(B, d_i)`` modality block."""
    return np.maximum(population_variance(block, axis=1), floor)


def sample_modality(m: GaussianProductMeasure, i: int, s: SeededSampler, count: int | None = None):
    mean = m.means[i]
    std = np.sqrt(m.variances[i])
    if count is None:
        return mean + std * s.normal(mean.shape)
    return mean[None, :] + std * s.normal((count, mean.size))


def sample_joint(m: GaussianProductMeasure, s: SeededSampler, count: int | None = None):
    """Draw ``z ~ mu``; one array per modality, shaped ``(d_i,)`` or ``(count, d_i)``."""
    return [sample_modality(m, i, s, count) for i in range(m.n)]


def perturb_modality(
    x: ModalPoint, i: int, m: GaussianProductMeasure, s: SeededSampler
) -> ModalPoint:
    """``z_i^x``: modality ``i`` redrawn from its Gaussian, every other modality kept as is."""
    if not 0 <= i < x.n:
        raise IndexError(f"modality index {i} out of range for {x.n} modalities")
    mods = list(x.modalities)
    mods[i] = sample_modality(m, i, s)
    return ModalPoint(mods, x.label)
