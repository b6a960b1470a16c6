"""Command-line driver: synth | train | eval | ablate | report.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import shutil
import sys
from pathlib import Path

from . import code_version
from .checkpoint import CheckpointError, ConfigMismatchError
from .config import ConfigError, ExperimentConfig, load_config
from .dataset import DatasetError, synthesize, write_dataset
from .experiment import ablate_run, eval_run, report_runs, train_run
from .objectives import TrainingAborted
from .scene import PartitionError

log = logging.getLogger("mae_search")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# files a run may leave behind; --force removes only these
_DATASET_ENTRIES = ("dataset.json", "images", "labels", "masks", "annotations")
_RUN_ENTRIES = ("config.toml", "train_log.jsonl", "checkpoints", "model.ckpt", "metrics.json",
                "metrics.csv", "sweep.csv", "run.json")


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="overwrite existing outputs")
    parser.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="validate the configuration and exit without writing")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mae-search", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {code_version()}")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset to disk")
    _common(p, suppress=True)
    p.add_argument("--identities", type=int)
    p.add_argument("--train-scenes", type=int)
    p.add_argument("--test-scenes", type=int)
    p.add_argument("--k", type=int, dest="k", help="attribute partition recorded in the manifest")

    p = sub.add_parser("train", help="train one model")
    _common(p, suppress=True)
    p.add_argument("--data", type=Path, help="dataset directory (overrides dataset.path)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.add_argument("--no-eval", action="store_true", help="skip the held-out evaluation")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, suppress=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset directory (overrides dataset.path)")
    p.add_argument("--gallery-sweep", help="comma-separated gallery sizes, e.g. 20,40,80")

    p = sub.add_parser("ablate", help="train/evaluate the mask x K variant grid over seeds")
    _common(p, suppress=True)
    p.add_argument("--data", type=Path, help="dataset directory shared by every seed")
    p.add_argument("--seeds", help="comma-separated seed list (overrides ablation.seeds)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="reuse completed variant runs in --out")

    p = sub.add_parser("report", help="aggregate run directories into CSV series")
    _common(p, suppress=True)
    p.add_argument("runs", nargs="+", type=Path, help="run or ablation directories")
    return parser


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag}: expected comma-separated integers (got {text!r})") from exc


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if getattr(args, "data", None) is not None:
        cfg.dataset.path = str(args.data)
    if getattr(args, "epochs", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if getattr(args, "k", None) is not None:
        cfg.ablation.K = args.k
    for name in ("identities", "train_scenes", "test_scenes"):
        if getattr(args, name, None) is not None:
            setattr(cfg.dataset, name, getattr(args, name))
    if getattr(args, "gallery_sweep", None):
        cfg.protocol.gallery_sizes = _int_list(args.gallery_sweep, "--gallery-sweep")
    if getattr(args, "seeds", None):
        cfg.ablation.seeds = _int_list(args.seeds, "--seeds")
    cfg.validate()
    return cfg


def _prepare_out(out: Path, owned: tuple[str, ...], force: bool, keep: bool = False) -> None:
    """Refuse to write into a non-empty directory unless --force (or resuming)."""
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not keep:
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        for name in owned:
            target = out / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    if args.dry_run:
        print(f"config valid; would write {cfg.dataset.train_scenes}+{cfg.dataset.test_scenes} scenes to {out}")
        return EXIT_OK
    _prepare_out(out, _DATASET_ENTRIES, args.force)
    d = cfg.dataset
    samples = synthesize(d.identities, d.train_scenes, d.test_scenes, cfg.seed, d.scene)
    extra = {"seed": cfg.seed, "code_version": code_version(), "config": cfg.to_dict()}
    path = write_dataset(samples, out, identities=d.identities, k=cfg.ablation.K, extra=extra)
    print(f"wrote {len(samples)} scenes ({d.identities} identities) to {path}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    if args.dry_run:
        print(f"config valid; would train {cfg.train.epochs} epochs into {out}")
        return EXIT_OK
    _prepare_out(out, _RUN_ENTRIES, args.force, keep=args.resume)
    record = train_run(cfg, out, resume=args.resume, evaluate=not args.no_eval)
    msg = f"trained {record['epochs_completed']} epochs in {record['wall_clock']['train_s']:.1f}s"
    if "metrics" in record:
        m = record["metrics"]
        msg += f"; mAP {m['map']:.4f} rank-1 {m.get('rank1', float('nan')):.4f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if args.dry_run:
        print(f"config valid; would evaluate {args.checkpoint} into {out}")
        return EXIT_OK
    _prepare_out(out, _RUN_ENTRIES, args.force)
    expect = cfg.resolved_network() if args.config is not None else None
    report = eval_run(cfg, args.checkpoint, out, expect_net=expect)
    print(f"mAP {report.search['map']:.4f}  cmc {report.search['cmc']}  "
          f"detector recall {report.detector['recall']:.4f} AP {report.detector['ap']:.4f}")
    for row in report.sweep:
        print(f"  gallery {row['size']:>4}: mAP {row['map']:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    if args.dry_run:
        from .experiment import ablation_variants

        variants = ablation_variants(cfg)
        print(f"config valid; {len(variants)} variants x {len(cfg.ablation.seeds)} seeds into {out}")
        return EXIT_OK
    _prepare_out(out, ("ablation.json", "ablation.csv") + tuple(f"seed_{s}" for s in cfg.ablation.seeds),
                 args.force, keep=args.resume)
    doc = ablate_run(cfg, out, resume=args.resume)
    for row in doc["rows"]:
        print(f"{row['variant']:<12} mAP {row['map_mean']:.4f} ± {row['map_sd']:.4f}  "
              f"rank-1 {row['rank1_mean']:.4f}  Δ {row['delta_map']:+.4f}")
    for name, value in doc["margins"].items():
        print(f"{name}: {value:+.4f}")
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    for p in args.runs:
        if not p.is_dir():
            raise UsageError(f"run directory not found: {p}")
    out = Path(cfg.out)
    if args.dry_run:
        print(f"would aggregate {len(args.runs)} run directories into {out}")
        return EXIT_OK
    result = report_runs(args.runs, out)
    print(result["summary"], end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, PartitionError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        # disk full, permission denied and the like
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
