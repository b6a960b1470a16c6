"""Run orchestration shared by the command line and the test suite.

A run directory holds::

    config.toml        resolved experiment config
    train_log.jsonl    one record per optimiser step
    checkpoints/       epoch_XXX.ckpt training checkpoints
    model.ckpt         final weights
    metrics.json       evaluation report (embeds config and code version)
    metrics.csv        one-row summary of the report
    sweep.csv          gallery-size sweep, when requested
    run.json           RunRecord: config snapshot, file checksums, wall clock
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, code_version
from .config import ExperimentConfig
from .dataset import read_dataset, read_manifest, synthesize
from .evaluator import MetricsReport, evaluate_model
from .network import NetworkConfig, load_model, save_model
from .objectives import load_train_state, train
from .scene import SceneSample

log = logging.getLogger(__name__)

RUN_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# files


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def provenance(config: dict) -> dict:
    return {"code_version": code_version(), "config_sha256": sha256_text(canonical_json(config))}


def write_csv(path, header: list[str], rows: list[list], config: dict) -> None:
    """CSV with a leading ``#`` line naming the code version and config digest."""
    p = provenance(config)
    buf = io.StringIO()
    buf.write(f"# code_version={p['code_version']} config_sha256={p['config_sha256']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# data


@dataclass
class SceneSplits:
    train: list[SceneSample]
    test: list[SceneSample]
    identities: int


def load_scenes(cfg: ExperimentConfig, seed: int | None = None) -> SceneSplits:
    """Read the configured dataset, or synthesize one in memory from the spec and seed."""
    seed = cfg.seed if seed is None else seed
    ds = cfg.dataset
    if ds.path:
        manifest = read_manifest(ds.path)
        return SceneSplits(read_dataset(ds.path, "train"), read_dataset(ds.path, "test"), int(manifest["identities"]))
    samples = synthesize(ds.identities, ds.train_scenes, ds.test_scenes, seed, ds.scene)
    return SceneSplits(
        [s for s in samples if s.split == "train"],
        [s for s in samples if s.split == "test"],
        ds.identities,
    )


# ---------------------------------------------------------------------------
# training


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def _trim_log(path: Path, epochs_done: int) -> None:
    # drop records from a partially finished epoch so the resumed log matches a straight run
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["epoch"] <= epochs_done]
    atomic_write(path, "".join(ln + "\n" for ln in keep))


def train_run(
    cfg: ExperimentConfig,
    run_dir,
    *,
    net: NetworkConfig | None = None,
    scenes: SceneSplits | None = None,
    resume: bool = False,
    evaluate: bool = True,
    stop_after_epoch: int | None = None,
) -> dict:
    """Train one model into ``run_dir`` and return its RunRecord."""
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    net = net or cfg.resolved_network()
    tcfg = cfg.resolved_train()
    resolved = experiment_dict(cfg, net)
    atomic_write(run_dir / "config.toml", cfg.dumps_toml())
    scenes = scenes or load_scenes(cfg)
    log_path = run_dir / "train_log.jsonl"
    state = None
    if resume and (ckpt := latest_checkpoint(run_dir)) is not None:
        state, _, stored_train = load_train_state(ckpt, net)
        # the epoch budget may grow on resume; everything else must match
        if {**stored_train.to_dict(), "epochs": tcfg.epochs} != tcfg.to_dict():
            raise checkpoint.ConfigMismatchError(f"{ckpt}: training config differs from the requested config")
        _trim_log(log_path, state.epoch)
        log.info("resuming from %s (epoch %d)", ckpt, state.epoch)
    elif log_path.exists():
        log_path.unlink()
    t0 = time.perf_counter()
    state = train(
        scenes.train, net, tcfg, scenes.identities, state=state, log_path=log_path,
        checkpoint_dir=run_dir / "checkpoints", stop_after_epoch=stop_after_epoch,
    )
    train_s = time.perf_counter() - t0
    record = {
        "schema_version": RUN_SCHEMA_VERSION,
        "kind": "train",
        **provenance(resolved),
        "config": resolved,
        "epochs_completed": state.epoch,
        "history": state.history,
        "files": {},
        "wall_clock": {"train_s": train_s},
    }
    if state.epoch < tcfg.epochs:
        record["status"] = "interrupted"
        _write_record(run_dir, record)
        return record
    model_digest = save_model(run_dir / "model.ckpt", state.params, net)
    record["status"] = "complete"
    record["checkpoint"] = {"path": "model.ckpt", "sha256": model_digest}
    if evaluate:
        t1 = time.perf_counter()
        report = evaluate_model(state.params, net, scenes.test, cfg.resolved_protocol())
        write_report(run_dir, report, resolved, model_digest)
        record["wall_clock"]["eval_s"] = time.perf_counter() - t1
        record["metrics"] = summary_row(report)
    _write_record(run_dir, record)
    return record


def portable_config(cfg: ExperimentConfig) -> dict:
    """Config dict without the output location, so reruns elsewhere hash the same."""
    d = cfg.to_dict()
    d.pop("out", None)
    return d


def experiment_dict(cfg: ExperimentConfig, net: NetworkConfig) -> dict:
    d = portable_config(cfg)
    d["resolved_network"] = net.to_dict()
    return d


def _write_record(run_dir: Path, record: dict) -> None:
    files = {}
    for name in ("config.toml", "train_log.jsonl", "model.ckpt", "metrics.json", "metrics.csv", "sweep.csv"):
        if (run_dir / name).exists():
            files[name] = sha256_file(run_dir / name)
    record["files"] = files
    body = {k: v for k, v in record.items() if k != "checksum"}
    record["checksum"] = sha256_text(canonical_json(body))
    atomic_write(run_dir / "run.json", canonical_json(record))


def verify_record(path) -> dict:
    record = json.loads(Path(path).read_text())
    body = {k: v for k, v in record.items() if k != "checksum"}
    if record.get("checksum") != sha256_text(canonical_json(body)):
        raise ValueError(f"{path}: RunRecord checksum mismatch")
    return record


# ---------------------------------------------------------------------------
# evaluation


def summary_row(report: MetricsReport) -> dict:
    out = {"map": report.search["map"]}
    for k, v in report.search["cmc"].items():
        out[f"rank{k}"] = v
    out["det_recall"] = report.detector["recall"]
    out["det_ap"] = report.detector["ap"]
    out["queries"] = report.search["queries"]
    return out


def write_report(out_dir, report: MetricsReport, config: dict, checkpoint_sha256: str | None) -> None:
    out_dir = Path(out_dir)
    doc = report.to_json()
    doc["run"] = {**provenance(config), "config": config, "checkpoint_sha256": checkpoint_sha256}
    atomic_write(out_dir / "metrics.json", canonical_json(doc))
    row = summary_row(report)
    write_csv(out_dir / "metrics.csv", list(row), [list(row.values())], config)
    if report.sweep:
        ranks = list(report.sweep[0]["cmc"])
        write_csv(
            out_dir / "sweep.csv",
            ["size", "map"] + [f"rank{k}" for k in ranks],
            [[r["size"], r["map"]] + [r["cmc"][k] for k in ranks] for r in report.sweep],
            config,
        )


def eval_run(
    cfg: ExperimentConfig,
    checkpoint_path,
    out_dir,
    *,
    expect_net: NetworkConfig | None = None,
    scenes: SceneSplits | None = None,
) -> MetricsReport:
    """Evaluate a saved model on the test split; writes metrics.json/csv (and sweep.csv)."""
    params, net, _ = load_model(checkpoint_path, expect_net)
    scenes = scenes or load_scenes(cfg)
    protocol = cfg.resolved_protocol()
    report = evaluate_model(params, net, scenes.test, protocol)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(out_dir, report, experiment_dict(cfg, net), sha256_file(checkpoint_path))
    return report


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class Variant:
    name: str
    k: int
    use_global_mask: bool
    use_local: bool = True


def ablation_variants(cfg: ExperimentConfig) -> list[Variant]:
    a = cfg.ablation
    if a.design == "grid":
        pairs = [(k, m) for m in a.mask_values for k in a.k_values]
    else:
        pairs = [(k, True) for k in a.k_values] + [(a.K, m) for m in a.mask_values if m is not True]
        if (a.K, True) not in pairs:
            pairs.append((a.K, True))
    variants = [Variant(f"K{k}_mask{'on' if m else 'off'}", k, m) for k, m in pairs]
    if a.include_baseline:
        variants.append(Variant("baseline", a.K, True, use_local=False))
    return variants


def reference_variant(cfg: ExperimentConfig) -> str:
    return f"K{cfg.ablation.K}_maskon"


def mean_sd(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (nan for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else float("nan")
    return float(arr.mean()), sd


def summarize_ablation(cfg: ExperimentConfig, results: dict[str, dict[int, dict]]) -> dict:
    """Aggregate per-seed metric rows into mean/sd rows and deltas against the reference."""
    ref_name = reference_variant(cfg)
    rows = []
    means = {}
    for name, per_seed in results.items():
        maps = [per_seed[s]["map"] for s in sorted(per_seed)]
        r1 = [per_seed[s]["rank1"] for s in sorted(per_seed)]
        m_map, sd_map = mean_sd(maps)
        m_r1, sd_r1 = mean_sd(r1)
        means[name] = (m_map, m_r1)
        rows.append({"variant": name, "n": len(maps), "map_mean": m_map, "map_sd": sd_map,
                     "rank1_mean": m_r1, "rank1_sd": sd_r1})
    ref = means.get(ref_name)
    for row in rows:
        if ref is None:
            row["delta_map"] = row["delta_rank1"] = float("nan")
        else:
            row["delta_map"] = means[row["variant"]][0] - ref[0]
            row["delta_rank1"] = means[row["variant"]][1] - ref[1]
    margins = {}
    if ref is not None:
        off = f"K{cfg.ablation.K}_maskoff"
        if off in means:
            margins["mask_on_minus_off"] = ref[0] - means[off][0]
        if "baseline" in means:
            margins["mae_minus_baseline"] = ref[0] - means["baseline"][0]
    if "K5_maskon" in means and "K3_maskon" in means:
        margins["k5_minus_k3"] = means["K5_maskon"][0] - means["K3_maskon"][0]
    return {"reference": ref_name, "rows": rows, "margins": margins}


def ablate_run(cfg: ExperimentConfig, out_dir, *, resume: bool = False) -> dict:
    """Train and evaluate every variant for every seed; write ablation.json/csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ablation_variants(cfg)
    results: dict[str, dict[int, dict]] = {v.name: {} for v in variants}
    for seed in cfg.ablation.seeds:
        seed_cfg = cfg.with_seed(seed)
        scenes = load_scenes(seed_cfg)
        for v in variants:
            run_dir = out_dir / f"seed_{seed}" / v.name
            record_path = run_dir / "run.json"
            record = None
            if resume and record_path.exists():
                record = verify_record(record_path)
                if record.get("status") != "complete":
                    record = None
            if record is None:
                net = seed_cfg.resolved_network(k=v.k, use_global_mask=v.use_global_mask, use_local=v.use_local)
                log.info("ablation: seed %d variant %s", seed, v.name)
                record = train_run(seed_cfg, run_dir, net=net, scenes=scenes, resume=resume)
            results[v.name][seed] = record["metrics"]
    summary = summarize_ablation(cfg, results)
    resolved = portable_config(cfg)
    doc = {
        **provenance(resolved),
        "config": resolved,
        "variants": [v.__dict__ for v in variants],
        "grid_runs": len(cfg.ablation.mask_values) * len(cfg.ablation.k_values) * len(cfg.ablation.seeds)
        if cfg.ablation.design == "grid" else None,
        "per_seed": {name: {str(s): m for s, m in per.items()} for name, per in results.items()},
        **summary,
    }
    atomic_write(out_dir / "ablation.json", canonical_json(doc))
    header = ["variant", "n", "map_mean", "map_sd", "rank1_mean", "rank1_sd", "delta_map", "delta_rank1"]
    write_csv(out_dir / "ablation.csv", header, [[r[h] for h in header] for r in summary["rows"]], resolved)
    return doc


# ---------------------------------------------------------------------------
# reporting


def find_records(paths) -> list[tuple[Path, dict]]:
    """Every RunRecord under the given directories (each must exist)."""
    found = []
    for p in paths:
        p = Path(p)
        if not p.is_dir():
            raise FileNotFoundError(p)
        for rec in sorted(p.rglob("run.json")):
            found.append((rec.parent, verify_record(rec)))
    return found


def report_runs(paths, out_dir) -> dict:
    """Aggregate run directories into per-figure CSV series and a text summary."""
    records = [(d, r) for d, r in find_records(paths) if r.get("status") == "complete" and "metrics" in r]
    if not records:
        raise ValueError("no completed runs found under " + ", ".join(str(p) for p in paths))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_k: dict[int, list[dict]] = {}
    by_variant: dict[str, list[dict]] = {}
    by_size: dict[int, list[dict]] = {}
    for run_dir, rec in records:
        net = rec["config"]["resolved_network"]
        key = ("global-only" if not net["use_local"] else
               f"K{net['k']}_mask{'on' if net['use_global_mask'] else 'off'}")
        by_variant.setdefault(key, []).append(rec["metrics"])
        if net["use_local"] and net["use_global_mask"]:
            by_k.setdefault(net["k"], []).append(rec["metrics"])
        if (run_dir / "metrics.json").exists():
            for row in json.loads((run_dir / "metrics.json").read_text()).get("sweep", []):
                by_size.setdefault(row["size"], []).append({"map": row["map"], "rank1": row["cmc"].get("1", float("nan"))})
    meta = {"runs": [str(d) for d, _ in records]}

    def stats(rows: list[dict]) -> list:
        m, s = mean_sd([r["map"] for r in rows])
        r1, r1s = mean_sd([r["rank1"] for r in rows])
        return [len(rows), m, s, r1, r1s]

    header = ["n", "map_mean", "map_sd", "rank1_mean", "rank1_sd"]
    write_csv(out_dir / "k_series.csv", ["K"] + header, [[k] + stats(by_k[k]) for k in sorted(by_k)], meta)
    write_csv(out_dir / "gallery_series.csv", ["size"] + header, [[s] + stats(by_size[s]) for s in sorted(by_size)], meta)
    write_csv(out_dir / "variants.csv", ["variant"] + header, [[v] + stats(by_variant[v]) for v in sorted(by_variant)], meta)
    lines = [f"{len(records)} completed runs", ""]
    lines.append(f"{'variant':<16} {'n':>3} {'mAP':>15} {'rank-1':>15}")
    for v in sorted(by_variant):
        n, m, s, r1, r1s = stats(by_variant[v])
        lines.append(f"{v:<16} {n:>3} {m:>7.4f} ± {s:<5.3f} {r1:>7.4f} ± {r1s:<5.3f}")
    if by_size:
        lines += ["", "gallery size sweep (mAP)"]
        for size in sorted(by_size):
            n, m, s, _, _ = stats(by_size[size])
            lines.append(f"  {size:>5}: {m:.4f} ± {s:.3f} (n={n})")
    text = "\n".join(lines) + "\n"
    atomic_write(out_dir / "summary.txt", text)
    return {"records": len(records), "summary": text}
