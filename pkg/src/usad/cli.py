"""Command-line driver: ``usad <command> [options]``.

Exit codes: 0 success, 1 user error (bad config, data or checkpoint), 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .autodiff import checkpoint
from .bench import LatencyBudget, emit_report, footprint, harness_overhead, measure_latency
from .config import TOGGLES, ConfigError, RunConfig, parse_overrides
from .pipeline import (METRIC_FIELDS, DataHashMismatch, Run, load_model, prepare_data,
                       rows_to_csv, run_ablation, write_prepared)

log = logging.getLogger("usad")

USER_ERRORS = (ConfigError, D.DataError, checkpoint.CheckpointError, DataHashMismatch, FileNotFoundError,
               PermissionError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_default: str = "run") -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", type=Path, default=Path(out_default), help="output / run directory")
    p.add_argument("--force", action="store_true", help="accept checkpoints trained on different data")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="usad", description="Diffusion-augmented split-attention activity classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="window and split the dataset, write train/val/test CSVs")
    _common(p)
    p = sub.add_parser("train-diffusion", help="stage 1: train the conditional denoiser")
    _common(p)
    p = sub.add_parser("synth", help="sample synthetic windows from the trained denoiser")
    _common(p)
    p.add_argument("--count", type=int, help="number of samples (default: synth.M)")
    p.add_argument("--file", type=Path, help="output CSV (default: <out>/synthetic.csv)")
    p = sub.add_parser("pretrain", help="stage 2: train the classifier on synthetic data")
    _common(p)
    p = sub.add_parser("finetune", help="stage 3: fine-tune on real data and evaluate on test")
    _common(p)
    p = sub.add_parser("evaluate", help="evaluate a classifier checkpoint on a data split")
    _common(p)
    p.add_argument("--model", type=Path, help="classifier checkpoint (default: <out>/finetune.ckpt)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p = sub.add_parser("ablate", help="run every on/off combination of the given toggles")
    _common(p, "ablation")
    p.add_argument("--toggles", default="", help=f"comma list from {','.join(TOGGLES)}")
    p = sub.add_parser("bench", help="single-window inference latency against the segment budget")
    _common(p, "bench")
    p.add_argument("--model", type=Path, required=True, help="classifier checkpoint")
    p.add_argument("--dataset", type=Path, help="windows CSV (default: test split of the config)")
    p.add_argument("--segment-seconds", type=float, default=4.0)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--float32", action="store_true", help="time the model with float32 weights")
    p = sub.add_parser("inspect", help="summarize a checkpoint container")
    p.add_argument("checkpoint", type=Path)
    return parser


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, parse_overrides(args.overrides))


def _snapshot(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())


def _print_metrics(m: dict, split: str) -> None:
    sys.stdout.write(rows_to_csv([{"split": split, **m}], ("split", *METRIC_FIELDS)))


def cmd_prepare(args) -> None:
    cfg = _config(args)
    prep = prepare_data(cfg)
    write_prepared(prep, args.out)
    _snapshot(cfg, args.out)
    report = D.imbalance_report(prep.train)
    print(f"train={len(prep.train)} val={len(prep.val)} test={len(prep.test)} classes={prep.n_classes} "
          f"imbalance_ratio={report['ratio']:.3f} data_hash={prep.hash}")


def cmd_train_diffusion(args) -> None:
    run = Run(_config(args), args.out, force=args.force)
    run.train_diffusion(resume=False)
    losses = [r["loss"] for r in run.log.stage_rows("diffusion")]
    print(f"diffusion: {len(losses)} epochs, loss {losses[0]:.6g} -> {losses[-1]:.6g}; wrote {run.path('diffusion')}")


def cmd_synth(args) -> None:
    run = Run(_config(args), args.out, force=args.force)
    samples = run.synthesize(args.count)
    if not samples:
        print("synth: M=0, nothing generated")
        return
    target = args.file or args.out / "synthetic.csv"
    D.save_windows(samples, target)
    counts = D.imbalance_report(samples)["counts"]
    print(f"synth: {len(samples)} windows {counts} -> {target}")


def cmd_pretrain(args) -> None:
    run = Run(_config(args), args.out, force=args.force)
    run.pretrain(resume=False)
    print(f"pretrain: wrote {run.path('pretrain')}")


def cmd_finetune(args) -> None:
    run = Run(_config(args), args.out, force=args.force)
    model = run.finetune(resume=False)
    m = run.evaluate(model, "test")
    run.write_log()
    _print_metrics(m, "test")


def cmd_evaluate(args) -> None:
    run = Run(_config(args), args.out, force=args.force)
    path = args.model or run.path("finetune")
    if not path.exists():
        raise FileNotFoundError(f"no classifier checkpoint at {path}")
    model, _, meta = load_model(path)
    run._check_hash(meta, str(path))
    m = run.evaluate(model, args.split)
    _print_metrics(m, args.split)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    rows = run_ablation(cfg, toggles, args.out)
    _snapshot(cfg, args.out)
    sys.stdout.write((args.out / "ablation.csv").read_text())
    log.info("ablation: %d runs", len(rows))


def cmd_bench(args) -> None:
    if not args.model.exists():
        raise FileNotFoundError(f"no checkpoint at {args.model}")
    model, _, _ = load_model(args.model)
    if args.float32:
        model.astype(np.float32)
    if args.dataset is not None:
        stream = D.load_windows(args.dataset)
    else:
        cfg = _config(args)
        _snapshot(cfg, args.out)
        stream = prepare_data(cfg).test
    budget = LatencyBudget(args.segment_seconds)
    args.out.mkdir(parents=True, exist_ok=True)
    report = measure_latency(model, stream, budget, args.reps, args.warmup, name=args.model.stem)
    emit_report(report, args.out / "latency.csv")
    empty = harness_overhead(stream, args.reps, args.warmup)
    emit_report(empty, args.out / "latency_overhead.csv")
    params, memory = footprint(model, stream[0])
    print(f"{report.model}: mean {report.mean_ms:.3f} ms, median {report.median_ms:.3f} ms, "
          f"p95 {report.p95_ms:.3f} ms, budget {budget.budget_ms:g} ms -> {report.verdict}; "
          f"{report.reps}-window total {report.total_ms:.1f} ms; harness overhead {empty.mean_ms:.4f} ms; "
          f"params {params}, memory {memory} bytes")


def cmd_inspect(args) -> None:
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"no checkpoint at {args.checkpoint}")
    tensors, meta = checkpoint.load(args.checkpoint)
    out = [f"checkpoint: {args.checkpoint}", f"kind: {meta.get('kind', '?')}",
           f"data_hash: {meta.get('data_hash', '?')}", "tensors:"]
    total = 0
    for name, arr in tensors.items():
        out.append(f"  {name:<48s} {str(arr.dtype):<8s} {tuple(arr.shape)}")
        if name.startswith("param/"):
            total += arr.size
    out.append(f"parameters: {total}")
    for key in sorted(meta):
        if key not in ("config", "kind", "data_hash"):
            out.append(f"{key}: {meta[key]}")
    if meta.get("config"):
        out.append("config:")
        out.extend("  " + line for line in meta["config"].splitlines())
    print("\n".join(out))


COMMANDS = {
    "prepare": cmd_prepare, "train-diffusion": cmd_train_diffusion, "synth": cmd_synth,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "bench": cmd_bench, "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
