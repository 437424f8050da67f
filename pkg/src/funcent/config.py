"""Run configuration: ``key = value`` files with sections, defaults and flag overrides.

Files are UTF-8, one ``key = value`` per line, ``#`` starts a comment, and keys
live under one of the sections ``[data] [model] [regularizer] [train]``.
Resolution order is defaults < file < command-line flags.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .objectives import MODES, RegularizerConfig
from .training import TrainConfig

SECTIONS = ("data", "model", "regularizer", "train")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    parse.__name__ = "choice"
    return parse


def _str(text: str) -> str:
    return text


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: str = ""

    @property
    def cli_flag(self) -> str:
        return self.flag or "--" + self.key.replace("_", "-")

    @property
    def dest(self) -> str:
        return self.cli_flag[2:].replace("-", "_")


OPTIONS = [
    Option("data", "source", _choice("mnist", "blobs"), "mnist", "dataset family"),
    Option("data", "mnist_dir", _str, "", "directory with MNIST IDX files (falls back to the env var)"),
    Option("data", "dataset", _str, "", "prebuilt CMN1 dataset file; skips generation when set"),
    Option("data", "n_train", int, 10_000, "train samples taken from MNIST"),
    Option("data", "n_test", int, 2_000, "test samples taken from MNIST"),
    Option("data", "color_std", float, 0.02, "std of the train color around the palette mean"),
    Option("data", "gray_mode", _choice("foreground_mean", "fixed"), "foreground_mean", "test color rule"),
    Option("data", "seed", int, 0, "dataset seed", "--data-seed"),
    Option("data", "bias_strength", float, 1.0, "blobs: probability the shortcut modality follows the label"),
    Option("data", "blob_train", int, 2_000, "blobs: train count"),
    Option("data", "blob_test", int, 1_000, "blobs: test count"),
    Option("model", "hidden", int, 64, "encoder width"),
    Option("model", "seed", int, 0, "parameter initialization seed", "--model-seed"),
    Option("regularizer", "mode", _choice(*MODES), "none", "regularizer mode"),
    Option("regularizer", "lambda", float, 0.0, "regularizer weight", "--lambda"),
    Option("regularizer", "K", int, 4, "perturbation draws per sample and step", "--K"),
    Option("regularizer", "f_floor", float, 1e-8, "floor for the Fisher denominator"),
    Option("regularizer", "info_floor", float, 1e-6, "floor for the inverted information"),
    Option("regularizer", "variance_floor", float, 1e-4, "floor for the per-modality measure variance"),
    Option("regularizer", "detach_reference", _bool, True, "treat p(.|x) as a constant"),
    Option("regularizer", "antithetic", _bool, False, "pair each draw with its mirror"),
    Option("regularizer", "direct_form", _choice("subtract", "inverse"), "subtract", "direct-mode penalty form"),
    Option("regularizer", "reference_slot", _choice("log", "weight"), "log", "slot of p(.|x) in the sensitivity"),
    Option("train", "optimizer", _choice("adam", "sgd"), "adam", "optimizer"),
    Option("train", "lr", float, 1e-3, "learning rate"),
    Option("train", "batch_size", int, 128, "minibatch size"),
    Option("train", "epochs", int, 30, "training epochs"),
    Option("train", "seed", int, 0, "shuffling and perturbation seed", "--seed"),
    Option("train", "eval_every", int, 1, "evaluate every this many epochs"),
    Option("train", "window", int, 5, "convergence window in epochs"),
    Option("train", "info_eval_count", int, 256, "train points used for the end-of-epoch Fisher snapshot"),
    Option("train", "info_eval_K", int, 8, "draws per point for the snapshot", "--info-eval-K"),
]

BY_KEY = {(o.section, o.key): o for o in OPTIONS}
BY_DEST = {o.dest: o for o in OPTIONS}


@dataclass
class RunConfig:
    """Resolved values keyed by ``(section, key)`` plus where each came from."""

    values: dict[tuple[str, str], Any] = field(
        default_factory=lambda: {(o.section, o.key): o.default for o in OPTIONS}
    )
    origin: dict[tuple[str, str], str] = field(
        default_factory=lambda: {(o.section, o.key): "default" for o in OPTIONS}
    )

    def get(self, section: str, key: str) -> Any:
        return self.values[(section, key)]

    def regularizer(self) -> RegularizerConfig:
        g = lambda k: self.get("regularizer", k)  # noqa: E731
        return RegularizerConfig(
            mode=g("mode"),
            lam=g("lambda"),
            K=g("K"),
            f_floor=g("f_floor"),
            info_floor=g("info_floor"),
            variance_floor=g("variance_floor"),
            detach_reference=g("detach_reference"),
            antithetic=g("antithetic"),
            direct_form=g("direct_form"),
            reference_slot=g("reference_slot"),
        )

    def train(self) -> TrainConfig:
        g = lambda k: self.get("train", k)  # noqa: E731
        return TrainConfig(
            optimizer=g("optimizer"),
            lr=g("lr"),
            batch_size=g("batch_size"),
            epochs=g("epochs"),
            seed=g("seed"),
            model_seed=self.get("model", "seed"),
            hidden=self.get("model", "hidden"),
            eval_every=g("eval_every"),
            window=g("window"),
            info_eval_count=g("info_eval_count"),
            info_eval_K=g("info_eval_K"),
            reg=self.regularizer(),
        )

    def validate(self) -> None:
        try:
            self.train()
        except ValueError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        for key in ("n_train", "n_test", "blob_train", "blob_test"):
            if self.get("data", key) < 1:
                raise ConfigError(f"[data] {key} must be positive")
        if self.get("data", "color_std") <= 0:
            raise ConfigError("[data] color_std must be positive")
        if not 0.0 <= self.get("data", "bias_strength") <= 1.0:
            raise ConfigError("[data] bias_strength must be in [0, 1]")

    def render(self) -> str:
        """The resolved configuration in the file format, readable by :func:`load_config`."""
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for o in OPTIONS:
                if o.section == section:
                    v = self.values[(section, o.key)]
                    text = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
                    lines.append(f"{o.key} = {text}  # {self.origin[(section, o.key)]}")
            lines.append("")
        return "\n".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> dict[tuple[str, str], tuple[Any, int]]:
    """Parse file contents into ``{(section, key): (value, line_number)}``."""
    out: dict[tuple[str, str], tuple[Any, int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        key, value = (part.strip() for part in line.split("=", 1))
        opt = BY_KEY.get((section, key))
        if opt is None:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}' in [{section}]")
        if (section, key) in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' in [{section}]")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        try:
            out[(section, key)] = (opt.parse(value), lineno)
        except ValueError as exc:
            raise ConfigError(
                f"{source}:{lineno}: bad value for '{key}' in [{section}]: {value!r} ({exc})"
            ) from exc
    return out


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides`` keyed by flag dest."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
        for k, (v, lineno) in parse_config_text(text, str(p)).items():
            cfg.values[k] = v
            cfg.origin[k] = f"{p.name}:{lineno}"
    for dest, v in (overrides or {}).items():
        if v is None:
            continue
        opt = BY_DEST.get(dest)
        if opt is None:
            raise ConfigError(f"unknown override {dest!r}")
        cfg.values[(opt.section, opt.key)] = v
        cfg.origin[(opt.section, opt.key)] = "flag"
    cfg.validate()
    return cfg
