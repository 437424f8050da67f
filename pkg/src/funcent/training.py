"""Optimization loop, evaluation and per-modality information tracking."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import ModalDataset
from .measures import SeededSampler, batch_variances
from .model import ModelParams, forward_logits, init_params
from .objectives import RegularizerConfig, regularizer_term, training_objective

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    model_seed: int = 0
    hidden: int = 64
    eval_every: int = 1
    window: int = 5
    info_eval_count: int = 256
    info_eval_K: int = 8
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if min(self.batch_size, self.epochs, self.hidden, self.eval_every, self.window) < 1:
            raise ValueError("sizes must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.window > self.epochs:
            raise ValueError("convergence window cannot exceed the number of epochs")


@dataclass
class MetricsRow:
    epoch: int
    mode: str
    train_ce: float
    penalty: float
    train_acc: float
    test_acc: float
    clamp_events: int
    info: list[float]
    eval_info: list[float]
    proportions: list[float]

    def as_dict(self) -> dict[str, object]:
        d: dict[str, object] = {
            "epoch": self.epoch,
            "mode": self.mode,
            "train_ce": self.train_ce,
            "penalty": self.penalty,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "clamp_events": self.clamp_events,
        }
        for i, v in enumerate(self.info):
            d[f"info_{i}"] = v
        for i, v in enumerate(self.eval_info):
            d[f"eval_info_{i}"] = v
        for i, v in enumerate(self.proportions):
            d[f"prop_{i}"] = v
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    final: ModelParams
    best: ModelParams
    best_epoch: int


def optimizer_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState | None,
    optimizer: str = "adam",
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState | None]:
    """One SGD or bias-corrected Adam update; returns new arrays and state."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
    if optimizer == "sgd":
        return {k: arrays[k] - lr * grads[k] for k in arrays}, state
    state = state or AdamState()
    t = state.t + 1
    new, m_new, v_new = {}, {}, {}
    for k, w in arrays.items():
        g = grads[k]
        m = beta1 * state.m.get(k, np.zeros_like(w)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(w)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new[k] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new, AdamState(m_new, v_new, t)


def predict(params: ModelParams, ds: ModalDataset, chunk: int = 2048) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(ds), chunk):
            xs, _ = ds.batch(slice(start, start + chunk))
            out.append(np.argmax(forward_logits(params, xs).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: ModelParams, ds: ModalDataset) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float(np.mean(predict(params, ds) == ds.labels))


def info_proportions(info: Sequence[float]) -> list[float]:
    info = [float(v) for v in info]
    if any(v < 0 for v in info):
        raise ValueError("information values must be non-negative")
    total = sum(info)
    if total == 0:
        return [1.0 / len(info)] * len(info)
    return [v / total for v in info]


def convergence_accuracy(rows: Sequence[MetricsRow], window: int) -> tuple[float, float, int]:
    """(mean test accuracy over the last ``window`` rows, max test accuracy, its epoch)."""
    if window < 1 or len(rows) < window:
        raise ValueError(f"need at least {window} rows, have {len(rows)}")
    accs = [r.test_acc for r in rows]
    best = int(np.argmax(accs))
    return float(np.mean(accs[-window:])), float(accs[best]), rows[best].epoch


def fisher_snapshot(
    params: ModelParams,
    ds: ModalDataset,
    variances: list[np.ndarray],
    count: int,
    K: int,
    seed: int,
    f_floor: float = 1e-8,
) -> list[float]:
    """Mean tensorized Fisher information per modality on the first ``count`` points."""
    idx = slice(0, min(count, len(ds)))
    xs, _ = ds.batch(idx)
    cfg = RegularizerConfig(mode="fisher_tensorized", lam=1.0, K=K, f_floor=f_floor)
    br = regularizer_term(params, xs, cfg, SeededSampler(seed), [v[idx] for v in variances])
    return [float(v) for v in br.info.mean(axis=0)]


def train_run(
    train: ModalDataset,
    test: ModalDataset,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    classes: int | None = None,
) -> TrainResult:
    """Train with shuffled minibatches; one MetricsRow per evaluated epoch."""
    classes = classes or int(max(train.labels.max(), test.labels.max()) + 1)
    params = params or init_params(train.dims, cfg.hidden, classes, cfg.model_seed)
    reg = cfg.reg
    variances = [batch_variances(m, reg.variance_floor) for m in train.modalities]
    arrays = params.arrays()
    state: AdamState | None = None
    rows: list[MetricsRow] = []
    best, best_acc, best_epoch = params.copy(), -1.0, 0
    N = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = np.argsort(SeededSampler(cfg.seed, 0x5EED, epoch).uniform(N), kind="stable")
        ce_sum = pen_sum = 0.0
        info_sum = None
        clamps = steps = 0
        for step, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xs, ys = train.batch(idx)
            current = params.replace(arrays)
            res = training_objective(
                current,
                xs,
                ys,
                reg,
                SeededSampler(cfg.seed, 0x9E27, epoch, step),
                [v[idx] for v in variances],
            )
            names = current.names()
            grads = ad.grad(res.loss, current.variables())
            arrays, state = optimizer_step(
                arrays, {k: g.data for k, g in zip(names, grads)}, state, cfg.optimizer, cfg.lr
            )
            params = current
            ce_sum += res.ce
            pen_sum += res.penalty
            steps += 1
            if res.breakdown is not None:
                batch_info = res.breakdown.info.mean(axis=0)
                info_sum = batch_info if info_sum is None else info_sum + batch_info
                clamps += res.breakdown.clamp_events
        params = params.replace(arrays)
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        info = [] if info_sum is None else [float(v) for v in info_sum / steps]
        eval_info = (
            fisher_snapshot(
                params, train, variances, cfg.info_eval_count, cfg.info_eval_K, cfg.seed + epoch, reg.f_floor
            )
            if cfg.info_eval_count > 0
            else []
        )
        row = MetricsRow(
            epoch=epoch,
            mode=reg.mode,
            train_ce=ce_sum / steps,
            penalty=pen_sum / steps,
            train_acc=evaluate(params, train),
            test_acc=evaluate(params, test),
            clamp_events=clamps,
            info=info,
            eval_info=eval_info,
            proportions=info_proportions(eval_info or info) if (eval_info or info) else [],
        )
        rows.append(row)
        log.info(
            "epoch %d mode=%s ce=%.4f pen=%.4g train=%.4f test=%.4f props=%s",
            epoch, reg.mode, row.train_ce, row.penalty, row.train_acc, row.test_acc,
            [round(p, 3) for p in row.proportions],
        )
        if row.test_acc > best_acc:
            best, best_acc, best_epoch = params.copy(), row.test_acc, epoch
    return TrainResult(rows, params, best, best_epoch)


# metrics CSV

BASE_COLUMNS = ["epoch", "mode", "train_ce", "penalty", "train_acc", "test_acc", "clamp_events"]


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    header = list(rows[0].as_dict())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        prev = 0
        for r in rows:
            if r.epoch <= prev:
                raise ValueError("metrics rows must be in ascending epoch order")
            prev = r.epoch
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.as_dict().items()})


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in BASE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing metrics columns {missing}")
        rows = []
        for rec in reader:

            def series(prefix):
                keys = sorted(
                    (k for k in rec if k.startswith(prefix) and k[len(prefix):].isdigit()),
                    key=lambda k: int(k[len(prefix):]),
                )
                return [float(rec[k]) for k in keys]

            rows.append(
                MetricsRow(
                    epoch=int(rec["epoch"]),
                    mode=rec["mode"],
                    train_ce=float(rec["train_ce"]),
                    penalty=float(rec["penalty"]),
                    train_acc=float(rec["train_acc"]),
                    test_acc=float(rec["test_acc"]),
                    clamp_events=int(rec["clamp_events"]),
                    info=series("info_"),
                    eval_info=series("eval_info_"),
                    proportions=series("prop_"),
                )
            )
    return rows


def summary_table(runs: dict[str, list[list[MetricsRow]]], window: int) -> str:
    """Convg./Max table, one line per mode; several runs per mode give mean +- std."""
    lines = [f"{'Model':<22}{'Convg.':>18}{'Max':>10}"]
    for mode, per_seed in runs.items():
        convs, maxes = [], []
        for rows in per_seed:
            c, m, _ = convergence_accuracy(rows, min(window, len(rows)))
            convs.append(100 * c)
            maxes.append(100 * m)
        conv = f"{np.mean(convs):.2f}"
        if len(convs) > 1:
            conv += f"+-{np.std(convs):.2f}"
        lines.append(f"{mode:<22}{conv:>18}{max(maxes):>10.2f}")
    return "\n".join(lines)


def mean_proportions(rows: Sequence[MetricsRow], window: int) -> list[float]:
    tail = [r.proportions for r in rows[-window:] if r.proportions]
    if not tail:
        return []
    return [float(v) for v in np.mean(np.array(tail), axis=0)]


