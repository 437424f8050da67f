"""Per-modality MLP encoders fused by a linear softmax head.

Each modality ``i`` goes through ``d_i -> h (relu) -> h``; the encodings are
concatenated and mapped to ``C`` logits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .measures import ModalPoint, SeededSampler

CHECKPOINT_MAGIC = b"FENT1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    dims: list[int]
    hidden: int
    classes: int
    tensors: dict[str, ad.Tensor]

    @property
    def n(self) -> int:
        return len(self.dims)

    def names(self) -> list[str]:
        return list(self.tensors)

    def variables(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def replace(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        tensors = {k: ad.variable(np.array(arrays[k]), name=k) for k in self.tensors}
        return ModelParams(list(self.dims), self.hidden, self.classes, tensors)

    def copy(self) -> "ModelParams":
        return self.replace(self.arrays())


def param_names(n: int) -> list[str]:
    names = []
    for i in range(n):
        names += [f"enc{i}.w1", f"enc{i}.b1", f"enc{i}.w2", f"enc{i}.b2"]
    return names + ["head.w", "head.b"]


def init_params(dims: Sequence[int], hidden: int = 64, classes: int = 10, seed: int = 0) -> ModelParams:
    """He-normal weights, zero biases; deterministic in ``seed``."""
    if not dims or any(d <= 0 for d in dims) or hidden <= 0 or classes <= 0:
        raise ValueError("all sizes must be positive")
    s = SeededSampler(seed, 0x1A17)

    def he(fan_in, fan_out):
        return s.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)

    arrays: dict[str, np.ndarray] = {}
    for i, d in enumerate(dims):
        arrays[f"enc{i}.w1"] = he(d, hidden)
        arrays[f"enc{i}.b1"] = np.zeros(hidden)
        arrays[f"enc{i}.w2"] = he(hidden, hidden)
        arrays[f"enc{i}.b2"] = np.zeros(hidden)
    arrays["head.w"] = he(hidden * len(dims), classes)
    arrays["head.b"] = np.zeros(classes)
    tensors = {k: ad.variable(v, name=k) for k, v in arrays.items()}
    return ModelParams(list(dims), hidden, classes, tensors)


def _as_batch(inputs) -> list[ad.Tensor]:
    if isinstance(inputs, ModalPoint):
        inputs = inputs.modalities
    out = []
    for m in inputs:
        t = ad.as_tensor(m)
        out.append(ad.reshape(t, (1, t.shape[0])) if t.ndim == 1 else t)
    return out


def forward_logits(params: ModelParams, inputs) -> ad.Tensor:
    """Fusion logits ``(B, C)`` for a batch given as one ``(B, d_i)`` block per modality."""
    xs = _as_batch(inputs)
    if [x.shape[1] for x in xs] != params.dims:
        raise ad.AutodiffError(
            f"modality widths {[x.shape[1] for x in xs]} do not match model dims {params.dims}"
        )
    t = params.tensors
    codes = []
    for i, x in enumerate(xs):
        h = ad.relu(x @ t[f"enc{i}.w1"] + t[f"enc{i}.b1"])
        codes.append(h @ t[f"enc{i}.w2"] + t[f"enc{i}.b2"])
    fused = codes[0] if len(codes) == 1 else ad.concat_cols(codes)
    return fused @ t["head.w"] + t["head.b"]


def forward_softmax(params: ModelParams, inputs) -> ad.Tensor:
    return ad.softmax(forward_logits(params, inputs), axis=-1)


def cross_entropy_logits(q, logits: ad.Tensor) -> ad.Tensor:
    """Row-wise ``-sum q log softmax(logits)``; ``q`` may be a Tensor or array."""
    return -(ad.as_tensor(q) * ad.log_softmax(logits, axis=-1)).sum(axis=-1)


def cross_entropy(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``-sum q log p`` for plain probability vectors (last axis)."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def sensitivity(
    params: ModelParams,
    x,
    z,
    detach_reference: bool = True,
    reference_log_probs: ad.Tensor | None = None,
    reference_slot: str = "log",
) -> ad.Tensor:
    """``f^x(z) = CE(p(.|z), p(.|x)) = -sum_y p(y|z) log p(y|x)``, one value per row.

    The prediction at ``z`` fills the first slot and the prediction at the
    training point ``x`` the second. With ``detach_reference`` the
    ``log p(.|x)`` factor is a constant. ``reference_log_probs`` may pass a
    precomputed ``log p(.|x)`` that broadcasts against the rows of ``z``.
    ``reference_slot="weight"`` swaps the roles, giving
    ``-sum_y p(y|x) log p(y|z)``.
    """
    if reference_log_probs is None:
        ref = ad.log_softmax(forward_logits(params, x), axis=-1)
        if detach_reference:
            ref = ref.detach()
    else:
        ref = reference_log_probs
    if reference_slot == "weight":
        return -(ad.exp(ref) * ad.log_softmax(forward_logits(params, z), axis=-1)).sum(axis=-1)
    if reference_slot != "log":
        raise ValueError("reference_slot must be 'log' or 'weight'")
    return -(forward_softmax(params, z) * ref).sum(axis=-1)


def shannon_entropy(p: np.ndarray) -> np.ndarray:
    return cross_entropy(p, p)


# checkpoint container


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def checkpoint_bytes(params: ModelParams) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    return bytes(out)


def load_checkpoint(path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(blob: bytes) -> ModelParams:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a FENT1 checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(blob):
            raise CheckpointError("truncated checkpoint")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if pos + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    n = sum(1 for k in arrays if k.endswith(".w1"))
    if sorted(arrays) != sorted(param_names(n)):
        raise CheckpointError(f"unexpected tensor names {sorted(arrays)}")
    dims = [arrays[f"enc{i}.w1"].shape[0] for i in range(n)]
    hidden = arrays["enc0.w1"].shape[1]
    classes = arrays["head.w"].shape[1]
    tensors = {k: ad.variable(arrays[k], name=k) for k in param_names(n)}
    return ModelParams(dims, hidden, classes, tensors)
