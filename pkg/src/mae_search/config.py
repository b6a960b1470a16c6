"""Experiment configuration: one TOML file, fully defaulted.

Every table is optional. Unknown keys are rejected so that a typo never
silently falls back to a default. Example::

    seed = 0
    out = "runs/exp1"

    [dataset]
    path = ""            # empty: synthesize in memory from this spec and the seed
    identities = 16
    train_scenes = 200
    test_scenes = 80

    [network]
    c1 = 64
    embed_dim = 16

    [train]
    epochs = 12
    base_lr = 0.003

    [protocol]
    gallery_sizes = [20, 40, 80]

    [ablation]
    K = 5
    use_global_mask = true
    seeds = [0, 1, 2, 3, 4]
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .evaluator import EvalProtocol
from .network import NetworkConfig
from .objectives import ProposalPolicy, TrainConfig
from .scene import PARTITIONS, SceneConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DatasetSpec:
    path: str = ""
    identities: int = 16
    train_scenes: int = 200
    test_scenes: int = 80
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class AblationSpec:
    K: int = 5
    use_global_mask: bool = True
    mask_values: list[bool] = field(default_factory=lambda: [True, False])
    k_values: list[int] = field(default_factory=lambda: [3, 4, 5])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    include_baseline: bool = True
    design: str = "grid"  # "grid": every mask x K pair; "axes": vary one axis at a time


# network fields owned elsewhere in the file
_NETWORK_RESERVED = {"k": "ablation.K", "use_global_mask": "ablation.use_global_mask", "seed": "seed"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def resolved_network(self, *, seed: int | None = None, k: int | None = None,
                         use_global_mask: bool | None = None, use_local: bool | None = None) -> NetworkConfig:
        return dataclasses.replace(
            self.network,
            seed=self.seed if seed is None else seed,
            k=self.ablation.K if k is None else k,
            use_global_mask=self.ablation.use_global_mask if use_global_mask is None else use_global_mask,
            use_local=self.network.use_local if use_local is None else use_local,
        )

    def resolved_train(self, seed: int | None = None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed if seed is None else seed)

    def resolved_protocol(self, seed: int | None = None) -> EvalProtocol:
        return dataclasses.replace(self.protocol, seed=self.seed if seed is None else seed)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=seed)

    def validate(self) -> None:
        if self.ablation.K not in PARTITIONS:
            raise ConfigError(f"ablation.K: must be one of {sorted(PARTITIONS)} (got {self.ablation.K})")
        for k in self.ablation.k_values:
            if k not in PARTITIONS:
                raise ConfigError(f"ablation.k_values: {k} is not one of {sorted(PARTITIONS)}")
        if not self.ablation.seeds:
            raise ConfigError("ablation.seeds: at least one seed is required")
        if not self.ablation.mask_values or not self.ablation.k_values:
            raise ConfigError("ablation: mask_values and k_values must be non-empty")
        if self.ablation.design not in ("grid", "axes"):
            raise ConfigError(f"ablation.design: expected 'grid' or 'axes' (got {self.ablation.design!r})")
        d = self.dataset
        if d.identities < 1:
            raise ConfigError("dataset.identities: must be >= 1")
        if d.train_scenes < 0 or d.test_scenes < 0:
            raise ConfigError("dataset.train_scenes/test_scenes: must be >= 0")
        try:
            d.scene.validate()
        except ValueError as exc:
            raise ConfigError(f"dataset.scene: {exc}") from exc
        try:
            self.resolved_network().validate()
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from exc
        t = self.train
        if t.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")
        if t.accumulation < 1:
            raise ConfigError("train.accumulation: must be >= 1")
        if t.base_lr <= 0:
            raise ConfigError("train.base_lr: must be > 0")
        sizes = self.protocol.gallery_sizes
        if sizes != sorted(set(sizes)) or any(s < 1 for s in sizes):
            raise ConfigError("protocol.gallery_sizes: must be positive and strictly ascending")
        for name in ("det_threshold", "iou_thr", "nms_iou"):
            v = getattr(self.protocol, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"protocol.{name}: must lie in [0, 1] (got {v})")

    def to_dict(self) -> dict:
        d = self.dataset
        return {
            "seed": self.seed,
            "out": self.out,
            "dataset": {
                "path": d.path,
                "identities": d.identities,
                "train_scenes": d.train_scenes,
                "test_scenes": d.test_scenes,
                "scene": {**dataclasses.asdict(d.scene), "person_height": list(d.scene.person_height)},
            },
            "network": {k: v for k, v in self.network.to_dict().items() if k not in _NETWORK_RESERVED},
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "protocol": {k: v for k, v in self.protocol.to_dict().items() if k != "seed"},
            "ablation": dataclasses.asdict(self.ablation),
        }

    def dumps_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        _check_keys("", raw, {"seed", "out", "dataset", "network", "train", "protocol", "ablation"})
        cfg = cls()
        if "seed" in raw:
            cfg.seed = _typed("seed", raw["seed"], int)
        if "out" in raw:
            cfg.out = _typed("out", raw["out"], str)
        if "dataset" in raw:
            ds = dict(raw["dataset"])
            scene = ds.pop("scene", {})
            cfg.dataset = _build("dataset", DatasetSpec, ds)
            s = dict(scene)
            if "person_height" in s:
                s["person_height"] = tuple(s["person_height"])
            cfg.dataset.scene = _build("dataset.scene", SceneConfig, s)
        if "network" in raw:
            net = dict(raw["network"])
            for key, owner in _NETWORK_RESERVED.items():
                if key in net:
                    raise ConfigError(f"network.{key}: set this through {owner}")
            if "roi" in net:
                net["roi"] = tuple(net["roi"])
            cfg.network = _build("network", NetworkConfig, net)
        if "train" in raw:
            tr = dict(raw["train"])
            if "seed" in tr:
                raise ConfigError("train.seed: set the top-level seed instead")
            policy = _policy("train.proposals", tr.pop("proposals", None), ProposalPolicy())
            cfg.train = _build("train", TrainConfig, tr)
            cfg.train.proposals = policy
        if "protocol" in raw:
            pr = dict(raw["protocol"])
            if "seed" in pr:
                raise ConfigError("protocol.seed: set the top-level seed instead")
            base = EvalProtocol()
            policy = _policy("protocol.proposals", pr.pop("proposals", None), base.proposals)
            cfg.protocol = _build("protocol", EvalProtocol, pr)
            cfg.protocol.proposals = policy
        if "ablation" in raw:
            cfg.ablation = _build("ablation", AblationSpec, dict(raw["ablation"]))
        cfg.validate()
        return cfg


def _check_keys(prefix: str, raw: dict, allowed: set[str]) -> None:
    for key in raw:
        if key not in allowed:
            where = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"{where}: unknown configuration key")


def _typed(name: str, value, kind):
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _build(prefix: str, cls, values: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    _check_keys(prefix, values, allowed)
    defaults = cls()
    for key, value in values.items():
        current = getattr(defaults, key)
        if isinstance(current, bool):
            _typed(f"{prefix}.{key}", value, bool)
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            values[key] = float(value)
        elif isinstance(current, (int, float, str)):
            _typed(f"{prefix}.{key}", value, type(current))
        elif isinstance(current, (list, tuple)) and not isinstance(value, (list, tuple)):
            raise ConfigError(f"{prefix}.{key}: expected a list")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def _policy(prefix: str, raw, default: ProposalPolicy) -> ProposalPolicy:
    if raw is None:
        return default
    values = {**dataclasses.asdict(default), **dict(raw)}
    values["bg_height"] = tuple(values["bg_height"])
    _check_keys(prefix, raw, {f.name for f in dataclasses.fields(ProposalPolicy)})
    return ProposalPolicy(**values)


def load_config(path=None) -> ExperimentConfig:
    """Parse a TOML file (or return defaults when ``path`` is None)."""
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return ExperimentConfig.from_dict(raw)
