"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or mismatched inputs), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..backbone import CheckpointError, NumericError, grad_check, load_checkpoint, save_checkpoint
from ..features import encode_pairs
from ..geo import DegenerateVarianceError
from ..ingest import DataFormatError
from .config import ConfigError, ExperimentConfig, describe_keys, load_config
from .experiments import (
    ZeroShotIntegrityError,
    evaluate_split,
    load_datasets,
    location_table_digest,
    preprocess_to_dataset,
    rank_locations,
    read_dataset,
    run_supervised,
    run_zero_shot,
    write_dataset,
)
from .report import RunReport
from .synth import synth_generate

logger = logging.getLogger("nextloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment config (INI)")
    parser.add_argument("--seed", type=int, default=default, help="run seed; overrides [run] seed")
    parser.add_argument("--out", default=default, help="output directory (or file for predict)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nextloc", description="Next-location prediction by coordinate regression.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    cmd("synth", "generate the configured synthetic city into --out")
    p = cmd("preprocess", "raw pings -> staypoints -> gridded dataset in --out")
    p.add_argument("--pings", help="overrides [preprocess] pings")
    p = cmd("train", "train on the configured dataset(s); writes checkpoint and report")
    p.add_argument("--data", action="append", help="dataset directory (repeat for joint training)")
    for name, help_text in (("evaluate", "evaluate a checkpoint on its own city"), ("zero-shot", "evaluate a checkpoint on an unseen city")):
        p = cmd(name, help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory; default is the configured dataset")
        p.add_argument("--force", action="store_true", help="skip checkpoint/location table checks")
    p = cmd("predict", "top-k location ids per trajectory pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory; default is the configured dataset")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--space", choices=("mercator", "normalized"), default="mercator")
    p.add_argument("--force", action="store_true")
    p = cmd("gradcheck", "finite-difference check of the training gradients")
    p.add_argument("--pairs", type=int, default=4, help="pairs in the probe batch")
    p.add_argument("--samples", type=int, default=3, help="entries checked per parameter")
    cmd("keys", "list every config key with its default")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, report: RunReport, stem: str = "report") -> None:
    (out / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
    (out / f"{stem}.tsv").write_text(report.to_table(), encoding="utf-8")
    # wall time lives outside the report so reruns stay byte-identical
    (out / f"{stem}.timing.json").write_text(json.dumps({"wall_time_s": report.wall_time_s}), encoding="utf-8")


def _dataset_for_checkpoint(args, cfg: ExperimentConfig, state):
    # the model fixes the window lengths
    cfg = replace(cfg, M=state.config.M, N=state.config.N, synth=replace(cfg.synth, M=state.config.M, N=state.config.N))
    if args.data:
        return read_dataset(args.data, cfg), cfg
    return load_datasets(cfg)[0], cfg


def _cmd_synth(args, cfg):
    out = _out_dir(args, "data")
    ds = load_datasets(replace(cfg, data={**cfg.data, "datasets": ()}))[0]
    write_dataset(out, ds)
    print(f"{ds.name}: {len(ds.locations)} locations, {len(ds.pairs)} pairs -> {out}")
    return EXIT_OK


def _cmd_preprocess(args, cfg):
    if args.pings:
        cfg = replace(cfg, preprocess={**cfg.preprocess, "pings": args.pings})
    out = _out_dir(args, "data")
    ds, rejected = preprocess_to_dataset(cfg)
    write_dataset(out, ds)
    print(f"{ds.name}: {len(ds.locations)} locations, {len(ds.pairs)} pairs -> {out}")
    for reason, count in sorted(rejected.items()):
        print(f"rejected {reason}: {count}", file=sys.stderr)
    return EXIT_OK


def _cmd_train(args, cfg):
    datasets = load_datasets(cfg, args.data)
    report = run_supervised(cfg, datasets)
    out = _out_dir(args, "run")
    state = report.artifacts["state"]
    save_checkpoint(out / "model.nxl", state, extra={"experiment": cfg.to_ini()})
    _write_report(out, report)
    for name, m in report.splits.items():
        print(name, " ".join(f"Hit@{k}={v:.4f}" for k, v in m.hits.items()), f"dist={m.mean_distance_m:.1f}m")
    return EXIT_OK


def _cmd_evaluate(args, cfg):
    state, _ = load_checkpoint(args.checkpoint, force=args.force)
    ds, cfg = _dataset_for_checkpoint(args, cfg, state)
    expected = state.meta.get("location_digest")
    if not args.force and expected and expected != location_table_digest(ds):
        raise CheckpointError("location table differs from the one the checkpoint was trained on (use zero-shot for a new city)")
    space = "mercator" if cfg.retrieval_space == "auto" else cfg.retrieval_space
    splits = {s: evaluate_split(state, ds, s, cfg.ks, space) for s in ("train", "val", "test") if len(ds.split[s])}
    report = RunReport(
        mode="supervised",
        datasets=(ds.name,),
        config_digest=state.meta.get("experiment_digest", state.config.digest()),
        model_digest=state.params_digest(),
        norm_source=f"{ds.name}:{ds.norm_source}",
        distance="planar" if ds.virtual else "haversine",
        retrieval_space=space,
        seed=cfg.seed,
        splits=splits,
        notes={"checkpoint": Path(args.checkpoint).name},
    )
    _write_report(_out_dir(args, "eval"), report, "evaluation")
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_zero_shot(args, cfg):
    state, _ = load_checkpoint(args.checkpoint, force=args.force)
    target, cfg = _dataset_for_checkpoint(args, cfg, state)
    report = run_zero_shot(state, target, cfg)
    _write_report(_out_dir(args, "zero-shot"), report, "zero_shot")
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_predict(args, cfg):
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    state, _ = load_checkpoint(args.checkpoint, force=args.force)
    ds, cfg = _dataset_for_checkpoint(args, cfg, state)
    indices = np.arange(len(ds.pairs)) if args.split == "all" else ds.split[args.split]
    ranked, pred_xy, _ = rank_locations(state, ds, indices, args.k, args.space)
    lines = [
        f"{int(i)}\t{x!r}\t{y!r}\t{' '.join(str(lid) for lid in ids)}"
        for i, (x, y), ids in zip(indices, pred_xy.tolist(), ranked)
    ]
    text = "pair\tx\ty\tranked_ids\n" + "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_gradcheck(args, cfg):
    from ..backbone import build_model

    # a small city keeps the float64 finite-difference sweep quick
    spec = replace(cfg.synth, n_agents=4, n_days=42, M=cfg.M, N=cfg.N, stride=cfg.stride)
    ds = synth_generate(spec)
    state = build_model(cfg.model_config(), len(ds.categories), seed=cfg.seed, categories=ds.categories, dtype=np.float64)
    batch = encode_pairs(ds, ds.split["train"][: args.pairs])
    report = grad_check(state, batch, samples_per_param=args.samples, seed=cfg.seed)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_NUMERIC


COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "zero-shot": _cmd_zero_shot,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "nextloc: error: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if args.command == "keys":
            print(describe_keys())
            return EXIT_OK
        cfg = _load_cfg(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DegenerateVarianceError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"nextloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ZeroShotIntegrityError, FloatingPointError) as exc:
        print(f"nextloc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
