"""Losses, proposals, optimiser and the training loop."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, code_version
from .metrics import iou
from .network import (
    NetworkConfig,
    forward_scene,
    init_params,
    load_param_arrays,
    param_arrays,
)
from .scene import Box, SceneSample
from .tensor import (
    NonFiniteError,
    ParamSet,
    Tensor,
    binary_cross_entropy,
    cross_entropy,
    matmul_const,
    scale,
    take_rows,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# proposals


@dataclass(frozen=True)
class Proposal:
    box: Box
    kind: str  # "identity" | "unlabeled" | "background"
    identity: int = -1
    source: str = "gt"  # "gt" | "jitter" | "random"

    @property
    def foreground(self) -> bool:
        return self.kind != "background"


@dataclass
class ProposalPolicy:
    include_gt: bool = True
    jitters: int = 3
    backgrounds: int = 4
    jitter: float = 0.1
    fg_iou: float = 0.5
    bg_iou: float = 0.3
    bg_height: tuple[int, int] = (32, 80)
    max_tries: int = 50


@dataclass
class ProposalSet:
    proposals: list[Proposal]
    short_of_backgrounds: bool = False


def _jittered(box: Box, rng: np.random.Generator, mag: float, h: int, w: int) -> Box:
    cx = (box.x1 + box.x2) / 2 + rng.uniform(-mag, mag) * box.width
    cy = (box.y1 + box.y2) / 2 + rng.uniform(-mag, mag) * box.height
    bw = box.width * (1 + rng.uniform(-mag, mag))
    bh = box.height * (1 + rng.uniform(-mag, mag))
    return Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clip(h, w)


def make_proposals(
    gts: list[Box],
    identities: list[int],
    image_size: tuple[int, int],
    rng: np.random.Generator,
    policy: ProposalPolicy | None = None,
) -> ProposalSet:
    """GT boxes, jittered copies and background boxes standing in for a region proposer.

    Foreground proposals keep IoU >= ``fg_iou`` with their GT box (jitters are
    redrawn until they do); backgrounds have IoU < ``bg_iou`` with every GT.
    """
    policy = policy or ProposalPolicy()
    h, w = image_size
    out: list[Proposal] = []
    for gt, ident in zip(gts, identities):
        kind = "identity" if ident >= 0 else "unlabeled"
        if policy.include_gt:
            out.append(Proposal(gt, kind, ident, "gt"))
        for _ in range(policy.jitters):
            box = gt
            if policy.jitter > 0:
                for _ in range(policy.max_tries):
                    cand = _jittered(gt, rng, policy.jitter, h, w)
                    if iou(cand, gt) >= policy.fg_iou:
                        box = cand
                        break
            out.append(Proposal(box, kind, ident, "jitter"))
    short = False
    lo, hi = policy.bg_height
    hi = min(hi, h)
    lo = min(lo, hi)
    for _ in range(policy.backgrounds):
        placed = False
        for _ in range(policy.max_tries):
            bh = rng.uniform(lo, hi)
            bw = min(w, bh * rng.uniform(0.3, 0.6))
            x1 = rng.uniform(0, w - bw)
            y1 = rng.uniform(0, h - bh)
            cand = Box(x1, y1, x1 + bw, y1 + bh)
            if all(iou(cand, g) < policy.bg_iou for g in gts):
                out.append(Proposal(cand, "background", -1, "random"))
                placed = True
                break
        if not placed:
            short = True
    if short:
        log.warning("could not place all background proposals (scene too crowded)")
    return ProposalSet(out, short)


# ---------------------------------------------------------------------------
# OIM


@dataclass
class OimState:
    lut: np.ndarray  # L x D, unit rows
    cq: np.ndarray  # Q x D
    tau: float = 1.0 / 30.0
    momentum: float = 0.5
    next_slot: int = 0

    @classmethod
    def create(cls, num_ids: int, dim: int, queue: int = 64, tau: float = 1 / 30, momentum: float = 0.5, seed: int = 0) -> OimState:
        if tau <= 0:
            raise ValueError("OIM temperature must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("OIM momentum must lie in [0, 1)")
        rng = np.random.default_rng([seed, 4271])
        lut = rng.normal(size=(num_ids, dim))
        lut /= np.linalg.norm(lut, axis=1, keepdims=True)
        return cls(lut, np.zeros((queue, dim)), tau, momentum, 0)

    def copy(self) -> OimState:
        return OimState(self.lut.copy(), self.cq.copy(), self.tau, self.momentum, self.next_slot)


def oim_loss(e_hats: Tensor, labels, state: OimState, update: bool = True) -> Tensor | None:
    """Matching loss against the lookup table plus circular queue.

    ``labels`` holds an identity index per row, or -1 for an unlabeled
    person. Returns ``None`` when no row is labeled. The table is updated in
    place after the loss is formed (momentum blend then renormalise for
    labeled rows; unlabeled rows are pushed into the queue).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if e_hats.ndim != 2 or labels.shape != (e_hats.shape[0],):
        raise ValueError("oim_loss expects N x D embeddings and N labels")
    norms = np.linalg.norm(e_hats.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("oim_loss inputs must be unit-norm")
    if np.any(labels >= state.lut.shape[0]) or np.any(labels < -1):
        raise ValueError(f"identity label out of range for {state.lut.shape[0]} identities")
    labeled = np.nonzero(labels >= 0)[0]
    loss = None
    if labeled.size:
        picked = take_rows(e_hats, labeled)
        table = np.vstack([state.lut, state.cq])
        logits = scale(matmul_const(picked, table), 1.0 / state.tau)
        loss = cross_entropy(logits, labels[labeled])
    if update:
        oim_update(state, e_hats.data, labels)
    return loss


def oim_update(state: OimState, e_hats: np.ndarray, labels) -> None:
    for x, y in zip(e_hats, labels):
        if y >= 0:
            v = state.momentum * state.lut[y] + (1.0 - state.momentum) * x
            state.lut[y] = v / np.linalg.norm(v)
        elif len(state.cq):
            state.cq[state.next_slot] = x
            state.next_slot = (state.next_slot + 1) % len(state.cq)


def detection_loss(det_scores: Tensor, fg_flags) -> Tensor:
    """Mean binary cross-entropy of the norm-based detection scores."""
    if det_scores.data.size == 0:
        raise ValueError("detection_loss on an empty batch")
    return binary_cross_entropy(det_scores, np.asarray(fg_flags, dtype=np.float64))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    epochs: int = 12
    base_lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_epochs: int = 8
    lr_gamma: float = 0.1
    warmup_factor: float = 0.001
    accumulation: int = 6
    oim_weight: float = 1.0
    oim_tau: float = 1.0 / 30.0
    oim_momentum: float = 0.5
    oim_queue: int = 64
    proposals: ProposalPolicy = field(default_factory=ProposalPolicy)
    seed: int = 0
    checkpoint_every: int = 1  # epochs; 0 disables periodic checkpoints
    freeze_lut: bool = False  # test-only: keep the OIM table fixed
    bn_eval: bool = False  # test-only: batch norm in eval mode during training

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proposals"]["bg_height"] = list(self.proposals.bg_height)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        prop = dict(d.pop("proposals", {}))
        if "bg_height" in prop:
            prop["bg_height"] = tuple(prop["bg_height"])
        return cls(proposals=ProposalPolicy(**prop), **d)


def learning_rate(cfg: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    """Step schedule (/10 every ``lr_step_epochs``) with linear warm-up over the first epoch.

    ``epoch`` is zero-based; ``step_in_epoch`` counts optimiser steps already
    taken this epoch.
    """
    lr = cfg.base_lr * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)
    if epoch == 0 and steps_per_epoch > 0:
        alpha = step_in_epoch / steps_per_epoch
        lr *= cfg.warmup_factor * (1 - alpha) + alpha
    return lr


@dataclass
class OptimState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        """SGD with momentum and L2 weight decay (decay added to the gradient)."""
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        for name, t in params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            d = g + self.weight_decay * t.data
            buf = self.buffers.get(name)
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[name] = buf
            t.data = t.data - lr * buf


class TrainingAborted(RuntimeError):
    pass


@dataclass
class StepLoss:
    detection: float
    oim: float
    total: float


def scene_loss(sample: SceneSample, props: list[Proposal], params: ParamSet, net: NetworkConfig, oim: OimState, cfg: TrainConfig) -> tuple[Tensor, StepLoss]:
    """Forward one scene and build its loss; updates the OIM table unless frozen."""
    out = forward_scene(sample, props, params, net)
    fg = np.array([p.foreground for p in props])
    det = detection_loss(out.det_score, fg)
    total = det
    oim_value = 0.0
    fg_idx = np.nonzero(fg)[0]
    if fg_idx.size:
        fg_hat = take_rows(out.e_hat, fg_idx)
        labels = [props[i].identity if props[i].kind == "identity" else -1 for i in fg_idx]
        lo = oim_loss(fg_hat, labels, oim, update=not cfg.freeze_lut)
        if lo is not None:
            total = total + scale(lo, cfg.oim_weight)
            oim_value = lo.item()
    return total, StepLoss(det.item(), oim_value, total.item())


def scene_proposals(sample: SceneSample, cfg: TrainConfig, epoch: int, index: int) -> list[Proposal]:
    rng = np.random.default_rng([cfg.seed, 31, epoch, index])
    ids = [p.identity for p in sample.persons]
    return make_proposals(sample.gt_boxes, ids, (sample.height, sample.width), rng, cfg.proposals).proposals


@dataclass
class TrainState:
    params: ParamSet
    optim: OptimState
    oim: OimState
    epoch: int = 0  # epochs completed
    step: int = 0  # optimiser steps taken
    history: list[dict] = field(default_factory=list)  # per-epoch mean losses


def new_train_state(net: NetworkConfig, cfg: TrainConfig, num_ids: int) -> TrainState:
    params = init_params(net)
    return TrainState(
        params,
        OptimState(momentum=cfg.momentum, weight_decay=cfg.weight_decay),
        OimState.create(num_ids, net.feature_dim, cfg.oim_queue, cfg.oim_tau, cfg.oim_momentum, cfg.seed),
    )


def training_step(
    scenes: list[SceneSample],
    proposals: list[list[Proposal]],
    state: TrainState,
    net: NetworkConfig,
    cfg: TrainConfig,
    lr: float,
) -> tuple[list[StepLoss], float]:
    """One optimiser update from a window of scenes; returns per-scene losses and grad norm.

    Per-scene gradients are accumulated and averaged over the window before
    the SGD update.
    """
    params = state.params
    params.set_training(not cfg.bn_eval)
    trainable = params.trainable()
    for t in trainable.values():
        t.grad = None
    losses = []
    for sample, props in zip(scenes, proposals):
        if not props:
            continue
        loss, parts = scene_loss(sample, props, params, net, state.oim, cfg)
        loss.backward()
        losses.append(parts)
    if not losses:
        return losses, 0.0
    n = len(losses)
    sq = 0.0
    for t in trainable.values():
        if t.grad is not None:
            t.grad = t.grad / n
            sq += float((t.grad * t.grad).sum())
    if not math.isfinite(sq):
        raise NonFiniteError("non-finite gradient")
    state.optim.step(trainable, lr)
    state.step += 1
    return losses, math.sqrt(sq)


def _dump_diagnostic(path: Path | None, info: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, default=str))


def train(
    scenes: list[SceneSample],
    net: NetworkConfig,
    cfg: TrainConfig,
    num_ids: int,
    state: TrainState | None = None,
    log_path=None,
    checkpoint_dir=None,
    stop_after_epoch: int | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs (resuming from ``state.epoch`` if given).

    Scene order per epoch and every proposal draw derive from
    ``(cfg.seed, epoch, index)``, so a run resumed from an epoch-boundary
    checkpoint reproduces an uninterrupted one bit-for-bit.
    """
    state = state or new_train_state(net, cfg, num_ids)
    n = len(scenes)
    steps_per_epoch = math.ceil(n / cfg.accumulation) if n else 0
    log_file = open(log_path, "a") if log_path else None
    diag = Path(checkpoint_dir) / "nan_diagnostic.json" if checkpoint_dir else None
    try:
        for epoch in range(state.epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, 17, epoch]).permutation(n)
            totals = []
            for k in range(steps_per_epoch):
                window = order[k * cfg.accumulation : (k + 1) * cfg.accumulation]
                batch = [scenes[i] for i in window]
                props = [scene_proposals(scenes[i], cfg, epoch, int(i)) for i in window]
                lr = learning_rate(cfg, epoch, k, steps_per_epoch)
                try:
                    losses, gnorm = training_step(batch, props, state, net, cfg, lr)
                except NonFiniteError as exc:
                    _dump_diagnostic(diag, {"epoch": epoch + 1, "step": state.step, "scenes": [scenes[i].scene_id for i in window], "error": str(exc)})
                    raise TrainingAborted(f"non-finite value at epoch {epoch + 1}, step {state.step}: {exc}") from exc
                if not losses:
                    continue
                rec = {
                    "epoch": epoch + 1,
                    "step": state.step,
                    "lr": lr,
                    "detection_loss": float(np.mean([x.detection for x in losses])),
                    "oim_loss": float(np.mean([x.oim for x in losses])),
                    "total_loss": float(np.mean([x.total for x in losses])),
                    "grad_norm": gnorm,
                }
                totals.append(rec["total_loss"])
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
            state.epoch = epoch + 1
            state.history.append({"epoch": epoch + 1, "mean_total_loss": float(np.mean(totals)) if totals else float("nan")})
            if checkpoint_dir and cfg.checkpoint_every and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs):
                save_train_state(Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.ckpt", state, net, cfg)
            if on_epoch:
                on_epoch(state)
            if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
                break
    finally:
        if log_file:
            log_file.close()
    state.params.set_training(False)
    return state


# ---------------------------------------------------------------------------
# training checkpoints


def save_train_state(path, state: TrainState, net: NetworkConfig, cfg: TrainConfig) -> str:
    arrays = dict(param_arrays(state.params))
    for name, buf in state.optim.buffers.items():
        arrays[f"optim.{name}"] = buf
    arrays["oim.lut"] = state.oim.lut
    arrays["oim.cq"] = state.oim.cq
    meta = {
        "kind": "train",
        "code_version": code_version(),
        "config": net.to_dict(),
        "train": cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "oim_next_slot": state.oim.next_slot,
        "history": state.history,
    }
    return checkpoint.save(path, meta, arrays)


def load_train_state(path, net: NetworkConfig | None = None) -> tuple[TrainState, NetworkConfig, TrainConfig]:
    meta, arrays = checkpoint.load(path)
    stored = NetworkConfig.from_dict(meta["config"])
    if net is not None and net.to_dict() != stored.to_dict():
        raise checkpoint.ConfigMismatchError("checkpoint network config differs from requested config")
    cfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig()
    params = init_params(stored)
    load_param_arrays(params, arrays)
    buffers = {k[len("optim.") :]: v for k, v in arrays.items() if k.startswith("optim.")}
    oim = OimState(
        arrays["oim.lut"], arrays["oim.cq"], cfg.oim_tau, cfg.oim_momentum, int(meta["oim_next_slot"])
    ) if "oim.lut" in arrays else OimState.create(1, stored.feature_dim)
    state = TrainState(
        params,
        OptimState(buffers, cfg.momentum, cfg.weight_decay),
        oim,
        int(meta.get("epoch", 0)),
        int(meta.get("step", 0)),
        list(meta.get("history", [])),
    )
    return state, stored, cfg
