"""Cross-entropy training objectives with inverse-information regularizers.

For a training point ``x`` the sensitivity ``f^x(z) = CE(p(.|z), p(.|x))`` is
probed under Gaussian perturbations of ``x``. Per modality (tensorized modes)
or jointly, the Monte-Carlo information ``I`` is

* fisher:   ``mean_k ||grad_z f^x(z_k)||^2 / f^x(z_k)``
* poincare: ``mean_k ||grad_z f^x(z_k)||^2``

and the penalty is ``lam * sum_i 1 / max(I_i, info_floor)``. The gradient norm
inside ``I`` is a tape node, so the penalty can be differentiated with respect
to the weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .measures import DEFAULT_VARIANCE_FLOOR, SeededSampler, batch_variances
from .model import ModelParams, cross_entropy_logits, forward_logits, one_hot

MODES = (
    "none",
    "fisher_tensorized",
    "poincare_tensorized",
    "fisher_joint",
    "poincare_joint",
    "entropy_direct",
    "variance_direct",
)


class ObjectiveError(RuntimeError):
    pass


@dataclass
class RegularizerConfig:
    mode: str = "none"
    lam: float = 0.0
    K: int = 4
    f_floor: float = 1e-8
    info_floor: float = 1e-6
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    detach_reference: bool = True
    antithetic: bool = False
    direct_form: str = "subtract"
    reference_slot: str = "log"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown regularizer mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if min(self.f_floor, self.info_floor, self.variance_floor) <= 0:
            raise ValueError("floors must be positive")
        if self.direct_form not in ("subtract", "inverse"):
            raise ValueError("direct_form must be 'subtract' or 'inverse'")
        if self.reference_slot not in ("log", "weight"):
            raise ValueError("reference_slot must be 'log' or 'weight'")
        if self.antithetic and self.K % 2:
            raise ValueError("antithetic sampling needs an even K")

    @property
    def tensorized(self) -> bool:
        return not self.mode.endswith("_joint")


@dataclass
class RegularizerBreakdown:
    """Per-sample information values and penalties for one batch."""

    mode: str
    info: np.ndarray  # (B, n) tensorized / direct, (B, 1) joint
    penalty: ad.Tensor  # (B,)
    clamp_events: int = 0

    @property
    def penalty_values(self) -> np.ndarray:
        return self.penalty.data


@dataclass
class ObjectiveResult:
    loss: ad.Tensor
    ce: float
    penalty: float
    breakdown: RegularizerBreakdown | None = None
    logits: np.ndarray = field(default=None, repr=False)


def inverse_penalty(info, lam: float, info_floor: float):
    """``lam * sum_i 1/max(I_i, floor)`` over the last axis; Tensor in, Tensor out."""
    if isinstance(info, ad.Tensor):
        return (1.0 / ad.clamp_min(info, info_floor)).sum(axis=-1) * lam
    info = np.asarray(info, dtype=np.float64)
    return lam * (1.0 / np.maximum(info, info_floor)).sum(axis=-1)


def _noise(sampler: SeededSampler, cfg: RegularizerConfig, shape) -> np.ndarray:
    if not cfg.antithetic:
        return sampler.normal(shape)
    half = sampler.normal((shape[0] // 2,) + tuple(shape[1:]))
    return np.concatenate([half, -half], axis=0)


def _plugin_entropy(f: ad.Tensor, floor: float) -> ad.Tensor:
    """Plug-in entropy along axis 0 of a ``(K, B)`` tensor."""
    safe = ad.clamp_min(f, floor)
    mean = safe.mean(axis=0)
    return (safe * ad.log(safe)).mean(axis=0) - mean * ad.log(mean)


def _plugin_variance(f: ad.Tensor) -> ad.Tensor:
    centered = f - f.mean(axis=0, keepdims=True)
    return (centered * centered).mean(axis=0)


def regularizer_term(
    params: ModelParams,
    xs: Sequence[np.ndarray],
    cfg: RegularizerConfig,
    sampler: SeededSampler,
    variances: Sequence[np.ndarray] | None = None,
    logits_x: ad.Tensor | None = None,
) -> RegularizerBreakdown:
    """Per-sample penalty for a batch ``xs`` (one ``(B, d_i)`` block per modality).

    ``variances`` are the per-sample measure variances, one ``(B,)`` array per
    modality; computed from ``xs`` when omitted.
    """
    if cfg.mode == "none":
        raise ObjectiveError("regularizer_term called with mode 'none'")
    xs = [np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1]) for x in xs]
    B = xs[0].shape[0]
    K = cfg.K
    if variances is None:
        variances = [batch_variances(x, cfg.variance_floor) for x in xs]
    if logits_x is None:
        logits_x = forward_logits(params, xs)
    ref = ad.log_softmax(logits_x, axis=-1)
    if cfg.detach_reference:
        ref = ref.detach()

    def perturbed(which: Sequence[int]):
        """Model inputs with the modalities in ``which`` redrawn, ``K`` rows per sample."""
        inputs, leaves = [], []
        for j, x in enumerate(xs):
            if j in which:
                eps = _noise(sampler, cfg, (K, B, x.shape[1]))
                z = x[None] + np.sqrt(variances[j])[None, :, None] * eps
                leaf = ad.variable(z.reshape(K * B, x.shape[1]))
                leaves.append(leaf)
                inputs.append(leaf)
            else:
                inputs.append(np.tile(x, (K, 1)))
        logits_z = forward_logits(params, inputs)
        if cfg.reference_slot == "weight":
            logp_z = ad.reshape(ad.log_softmax(logits_z, axis=-1), (K, B, params.classes))
            f = -(ad.exp(ref) * logp_z).sum(axis=-1)  # (K, B)
        else:
            p_z = ad.reshape(ad.softmax(logits_z, axis=-1), (K, B, params.classes))
            f = -(p_z * ref).sum(axis=-1)
        return f, leaves

    groups = [[i] for i in range(len(xs))] if cfg.tensorized else [list(range(len(xs)))]
    infos = []
    try:
        for group in groups:
            f, leaves = perturbed(group)
            if cfg.mode == "entropy_direct":
                infos.append(_plugin_entropy(f, cfg.f_floor))
                continue
            if cfg.mode == "variance_direct":
                infos.append(_plugin_variance(f))
                continue
            grads = ad.grad(f.sum(), leaves, create_graph=True)
            gsq = sum(ad.reshape(ad.norm_squared(g, axis=1), (K, B)) for g in grads)
            if cfg.mode.startswith("fisher"):
                vals = gsq / ad.clamp_min(f, cfg.f_floor)
            else:
                vals = gsq
            infos.append(vals.mean(axis=0))
    except ad.AutodiffError as exc:
        raise ObjectiveError(f"regularizer '{cfg.mode}' failed: {exc}") from exc

    info = ad.concat_cols([ad.reshape(v, (B, 1)) for v in infos]) if len(infos) > 1 else ad.reshape(infos[0], (B, 1))
    if cfg.mode.endswith("_direct") and cfg.direct_form == "subtract":
        penalty = -info.sum(axis=-1) * cfg.lam
        clamps = 0
    else:
        penalty = inverse_penalty(info, cfg.lam, cfg.info_floor)
        clamps = int(np.sum(info.data < cfg.info_floor))
    return RegularizerBreakdown(cfg.mode, info.data.copy(), penalty, clamps)


def training_objective(
    params: ModelParams,
    xs: Sequence[np.ndarray],
    labels: np.ndarray,
    cfg: RegularizerConfig,
    sampler: SeededSampler | None = None,
    variances: Sequence[np.ndarray] | None = None,
) -> ObjectiveResult:
    """Batch mean of ``CE(onehot(y), p(.|x)) + penalty(x)``."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ObjectiveError("empty batch")
    logits = forward_logits(params, xs)
    ce = cross_entropy_logits(one_hot(labels, params.classes), logits).mean()
    if cfg.mode == "none":
        return ObjectiveResult(ce, ce.item(), 0.0, None, logits.data)
    if sampler is None:
        raise ObjectiveError("a sampler is required for regularized objectives")
    breakdown = regularizer_term(params, xs, cfg, sampler, variances, logits_x=logits)
    pen = breakdown.penalty.mean()
    loss = ce + pen
    if not np.isfinite(loss.data):
        raise ObjectiveError("non-finite training objective")
    return ObjectiveResult(loss, ce.item(), pen.item(), breakdown, logits.data)
