"""Command-line entry point: ``funcent <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 configuration
or input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import OrderedDict
from pathlib import Path

from . import estimators as est
from .config import OPTIONS, SECTIONS, ConfigError, RunConfig, load_config
from .data import (
    MNIST_DIR_ENV,
    DatasetFormatError,
    IdxError,
    build_blobs,
    build_colored_mnist,
    load_dataset,
    save_dataset,
)
from .measures import DEFAULT_VARIANCE_FLOOR, measure_from_point
from .model import CheckpointError, load_checkpoint, save_checkpoint, sensitivity
from .probes import BUILTIN, core_suite
from .training import (
    convergence_accuracy,
    evaluate,
    mean_proportions,
    read_metrics_csv,
    summary_table,
    train_run,
    write_metrics_csv,
)

log = logging.getLogger("funcent")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class InputError(Exception):
    """Bad paths or unreadable inputs; reported with exit code 3."""


def _add_config_flags(p: argparse.ArgumentParser, sections=SECTIONS) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    for section in sections:
        group = p.add_argument_group(f"[{section}] options")
        for o in OPTIONS:
            if o.section == section:
                group.add_argument(
                    o.cli_flag,
                    dest=o.dest,
                    type=o.parse,
                    default=None,
                    metavar=o.parse.__name__.upper(),
                    help=f"{o.help} (default: {o.default!r})",
                )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funcent",
        description="Functional-entropy regularization toolkit.",
        epilog=f"The MNIST directory may also be given through ${MNIST_DIR_ENV}.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="build a dataset and write it as a CMN1 file")
    p.add_argument("--out", required=True, metavar="PATH", help="output dataset file")
    _add_config_flags(p, ("data",))

    p = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    p.add_argument("--out-dir", required=True, metavar="DIR", help="directory for outputs")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="FENT1 checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test", help="split to score")
    _add_config_flags(p, ("data",))

    p = sub.add_parser("estimate", help="Monte-Carlo functional estimates")
    p.add_argument("--probe", choices=sorted(BUILTIN), help="built-in probe function")
    p.add_argument("--probe-param", type=float, help="probe parameter (exponent, shift, offset or value)")
    p.add_argument("--checkpoint", metavar="PATH", help="estimate f^x of this model instead")
    p.add_argument("--index", type=int, default=0, help="sample index for --checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="train", help="split for --checkpoint")
    p.add_argument("--kind", choices=est.KINDS + ("all",), default="all", help="estimate kind")
    p.add_argument("--samples", type=int, default=est.DEFAULT_K, metavar="K", help="Monte-Carlo draws")
    p.add_argument("--estimate-seed", type=int, default=0, help="sampling seed")
    _add_config_flags(p, ("data",))

    p = sub.add_parser("verify", help="check the functional inequalities on a probe suite")
    p.add_argument("--suite", choices=("core",), default="core", help="probe suite")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--samples", type=int, default=20_000, metavar="K", help="Monte-Carlo draws")
    p.add_argument("--tol-sigmas", type=float, default=5.0, help="allowed slack in standard errors")

    p = sub.add_parser("report", help="Convg./Max table from metrics CSV files")
    p.add_argument("metrics", nargs="+", metavar="CSV", help="metrics files (several per mode allowed)")
    p.add_argument("--window", type=int, default=5, help="convergence window in epochs")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {o.dest: getattr(args, o.dest) for o in OPTIONS if hasattr(args, o.dest)}


def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, _overrides(args))
    log.info("resolved configuration:\n%s", cfg.render())
    return cfg


def _dataset(cfg: RunConfig):
    g = lambda k: cfg.get("data", k)  # noqa: E731
    if g("dataset"):
        return load_dataset(g("dataset"))
    if g("source") == "blobs":
        return build_blobs(g("seed"), g("blob_train"), g("blob_test"), g("bias_strength"))
    return build_colored_mnist(
        g("mnist_dir") or None, g("n_train"), g("n_test"), g("color_std"), g("seed"), g("gray_mode")
    )


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    data = _dataset(cfg)
    save_dataset(data, args.out)
    print(f"wrote {args.out}: {data.manifest.counts['train']} train, {data.manifest.counts['test']} test")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data = _dataset(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.render(), encoding="utf-8")
    tcfg = cfg.train()
    result = train_run(data.train, data.test, tcfg)
    write_metrics_csv(result.rows, out / "metrics.csv")
    save_checkpoint(result.final, out / "final.fent")
    save_checkpoint(result.best, out / "best.fent")
    conv, best, epoch = convergence_accuracy(result.rows, min(tcfg.window, len(result.rows)))
    props = mean_proportions(result.rows, tcfg.window)
    print(f"mode={tcfg.reg.mode} convg={100 * conv:.2f} max={100 * best:.2f} (epoch {epoch})")
    if props:
        print("information proportions: " + " ".join(f"{p:.3f}" for p in props))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    data = _dataset(cfg)
    params = load_checkpoint(args.checkpoint)
    split = data.train if args.split == "train" else data.test
    if split.dims != params.dims:
        raise InputError(f"checkpoint expects modality widths {params.dims}, dataset has {split.dims}")
    print(f"{args.split} accuracy {evaluate(params, split):.4f}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    if (args.probe is None) == (args.checkpoint is None):
        raise InputError("give exactly one of --probe or --checkpoint")
    kinds = est.KINDS if args.kind == "all" else (args.kind,)
    if args.probe is not None:
        probe = BUILTIN[args.probe]() if args.probe_param is None else BUILTIN[args.probe](args.probe_param)
        reports = est.estimate_all(probe, args.samples, args.estimate_seed)
        for k in kinds:
            print(reports[k].to_record())
        return EXIT_OK
    cfg = _resolve(args)
    data = _dataset(cfg)
    params = load_checkpoint(args.checkpoint)
    split = data.train if args.split == "train" else data.test
    if not 0 <= args.index < len(split):
        raise InputError(f"--index {args.index} out of range for {len(split)} samples")
    x = split.point(args.index)
    measure = measure_from_point(x, DEFAULT_VARIANCE_FLOOR)

    def builder(zs):
        return sensitivity(params, x.modalities, zs, reference_slot=cfg.get("regularizer", "reference_slot"))

    probe = est.FunctionalProbe.from_builder(builder, measure, f"f^x[{args.index}]")
    for k in kinds:
        for i, r in enumerate(est.estimate_tensorized(probe, x, k, args.samples, args.estimate_seed)):
            print(f"modality={i}\t{r.to_record()}")
    return EXIT_OK


def cmd_verify(args) -> int:
    failed = 0
    for probe in core_suite():
        for r in est.verify_inequalities(
            probe, K=args.samples, seed=args.seed, tol_sigmas=args.tol_sigmas
        ):
            status = "ok" if r.holds_within_tolerance else "FAIL"
            failed += not r.holds_within_tolerance
            print(f"{status:4} {probe.name:<28} {r.name:<14} lhs={r.lhs:.6g} rhs={r.rhs:.6g} se={r.std_error:.2g}")
    print("all inequalities hold" if not failed else f"{failed} inequality check(s) failed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_report(args) -> int:
    runs: "OrderedDict[str, list]" = OrderedDict()
    for path in args.metrics:
        try:
            rows = read_metrics_csv(path)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read metrics {path}: {exc}") from exc
        if not rows:
            raise InputError(f"{path}: no metric rows")
        runs.setdefault(rows[0].mode, []).append(rows)
    print(summary_table(runs, args.window))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
    "report": cmd_report,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError, IdxError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
