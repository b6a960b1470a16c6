"""The MAE forward model.

Pipeline per scene: stem -> global attention block on the whole frame ->
per proposal RoIAlign of both the stem map (head branch) and the attention
output (local branch) -> local fusion block over attribute-masked copies ->
global/local embeddings -> concatenation -> norm-aware split into a detection
score (from the norm) and a unit identity direction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint, code_version
from .scene import Box, SceneSample, downsample_mask, get_partition, roi_attribute_masks
from .tensor import (
    BatchNormState,
    ConfigurationError,
    DimensionError,
    ParamSet,
    Tensor,
    avg_pool2d,
    batchnorm2d,
    concat_channels,
    conv2d,
    global_max_pool,
    l2_normalize,
    linear,
    mul_mask,
    relu,
    reshape,
    roi_align,
    row_norm,
    sigmoid,
)


@dataclass
class NetworkConfig:
    c1: int = 64
    c3: int = 10
    c5: int = 16
    k: int = 5
    roi: tuple[int, int] = (14, 14)
    embed_dim: int = 16
    stem_stride: int = 4
    use_global_mask: bool = True
    use_local: bool = True
    seed: int = 0

    @classmethod
    def paper(cls, **overrides) -> NetworkConfig:
        """Channel widths from the published architecture (1024 -> 154 -> 770 -> 256, 128-d)."""
        base = dict(c1=1024, c3=154, c5=256, embed_dim=128, stem_stride=16)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        get_partition(self.k)
        for name in ("c1", "c3", "c5"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.c1 < 4:
            raise ConfigurationError("c1 must be >= 4 (stem widths are c1/4, c1/2, c1)")
        if self.embed_dim < 2:
            raise ConfigurationError("embed_dim must be >= 2")
        s = self.stem_stride
        if s < 1 or s & (s - 1):
            raise ConfigurationError("stem_stride must be a power of two")
        if self.roi[0] % 2 or self.roi[1] % 2:
            raise ConfigurationError("roi extent must be even (head pools by 2)")

    @property
    def lf_in(self) -> int:
        return self.k * self.c3

    @property
    def ga_mid(self) -> int:
        return max(1, self.c1 // 4)

    @property
    def lf_mid(self) -> int:
        return max(1, self.c5 // 2)

    @property
    def feature_dim(self) -> int:
        return 2 * self.embed_dim if self.use_local else self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi"] = list(self.roi)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        d = dict(d)
        d["roi"] = tuple(d.get("roi", (14, 14)))
        return cls(**d)


def _stem_strides(stride: int) -> list[int]:
    """Pool factor after each of the three stem stages."""
    pools = []
    remaining = stride
    for _ in range(3):
        f = 2 if remaining >= 2 else 1
        pools.append(f)
        remaining //= f
    pools[-1] *= remaining
    return pools


def _conv_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, int, int]]:
    """name -> (c_out, c_in, kernel)."""
    shapes = {
        "stem.conv1": (cfg.c1 // 4, 3, 3),
        "stem.conv2": (cfg.c1 // 2, cfg.c1 // 4, 3),
        "stem.conv3": (cfg.c1, cfg.c1 // 2, 3),
        "head.conv": (cfg.c1, cfg.c1, 3),
    }
    if cfg.use_local:
        b, c5 = cfg.lf_mid, cfg.c5
        shapes.update(
            {
                "ga.g1": (cfg.ga_mid, cfg.c1, 1),
                "ga.g2": (cfg.ga_mid, cfg.ga_mid, 3),
                "ga.g3": (cfg.c3, cfg.ga_mid, 1),
                "lf.l1": (b, cfg.lf_in, 1),
                "lf.l2": (b, b, 3),
                "lf.l3": (c5, b, 1),
                "lf.l4": (b, c5, 1),
                "lf.l5": (b, b, 3),
                "lf.l6": (c5, b, 1),
                "lf.l7": (c5, c5, 1),
                "lf.l8": (c5, c5, 1),
                "lf.l9": (c5, c5, 1),
            }
        )
    return shapes


def _norm_channels(cfg: NetworkConfig) -> dict[str, int]:
    chans = {"stem.bn1": cfg.c1 // 4, "stem.bn2": cfg.c1 // 2, "stem.bn3": cfg.c1, "head.bn": cfg.c1, "calib.bn": 1}
    if cfg.use_local:
        chans.update({"ga.bn": cfg.c3, "lf.bn1": cfg.c5, "lf.bn2": cfg.c5, "lf.bn3": cfg.c5})
    return chans


def init_params(cfg: NetworkConfig) -> ParamSet:
    """He-normal convolutions, 1/sqrt(fan-in) fully-connected layers, zero biases."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1013])
    p = ParamSet()
    for name, (co, ci, k) in _conv_shapes(cfg).items():
        std = np.sqrt(2.0 / (ci * k * k))
        p.tensors[f"{name}.w"] = Tensor(rng.normal(0, std, (co, ci, k, k)), requires_grad=True)
        p.tensors[f"{name}.b"] = Tensor(np.zeros(co), requires_grad=True)
    fcs = {"fc_global": cfg.c1}
    if cfg.use_local:
        fcs["fc_local"] = cfg.c5
    for name, fan_in in fcs.items():
        w = rng.normal(0, 1.0 / np.sqrt(fan_in), (cfg.embed_dim, fan_in))
        p.tensors[f"{name}.w"] = Tensor(w, requires_grad=True)
        p.tensors[f"{name}.b"] = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)
    for name, ch in _norm_channels(cfg).items():
        p.norms[name] = BatchNormState.create(ch)
    return p


def _conv(p: ParamSet, name: str, x: Tensor) -> Tensor:
    w = p[f"{name}.w"]
    return conv2d(x, w, p[f"{name}.b"], stride=1, pad=w.shape[-1] // 2)


# ---------------------------------------------------------------------------
# blocks


def image_tensor(image: np.ndarray) -> Tensor:
    return Tensor((image.astype(np.float64) / 255.0 - 0.5) / 0.25)


def stem_forward(image: Tensor, p: ParamSet, cfg: NetworkConfig) -> Tensor:
    """Three conv/BN/ReLU stages, each followed by average pooling; output C1 x H/s x W/s."""
    _, h, w = image.shape
    if h % cfg.stem_stride or w % cfg.stem_stride:
        raise ConfigurationError(
            f"image {h}x{w} is not divisible by stem stride {cfg.stem_stride}"
        )
    x = image
    for i, pool in enumerate(_stem_strides(cfg.stem_stride), start=1):
        x = relu(batchnorm2d(_conv(p, f"stem.conv{i}", x), p.norms[f"stem.bn{i}"]))
        if pool > 1:
            x = avg_pool2d(x, pool)
    return x


def ga_block(f1: Tensor, mask: np.ndarray, p: ParamSet) -> Tensor:
    """Global attention: mask the stem map, squeeze-conv, then project to C3 with BN."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[1:] != f1.shape[-2:]:
        raise DimensionError(f"global mask {mask.shape} does not match feature {f1.shape}")
    if f1.shape[-3] != p["ga.g1.w"].shape[1]:
        raise DimensionError("stem channels do not match the attention block")
    f2 = mul_mask(f1, mask)
    f2p = relu(_conv(p, "ga.g2", _conv(p, "ga.g1", f2)))
    return relu(batchnorm2d(_conv(p, "ga.g3", f2p), p.norms["ga.bn"]))


def lf_block(f3_roi: Tensor, roi_masks: np.ndarray, p: ParamSet, return_parts: bool = False):
    """Local fusion over K attribute-masked copies of the RoI features.

    ``f3_roi`` is C3 x h x w or N x C3 x h x w; ``roi_masks`` is K x h x w or
    N x K x h x w. With ``return_parts`` the intermediate maps are returned too.
    """
    masks = np.asarray(roi_masks)
    batched = f3_roi.ndim == 4
    k_axis = 1 if batched else 0
    k = masks.shape[k_axis]
    expected_in = p["lf.l1.w"].shape[1]
    if k * f3_roi.shape[k_axis] != expected_in:
        raise DimensionError(
            f"{k} masks x {f3_roi.shape[k_axis]} channels != local block input {expected_in}"
        )
    if masks.shape[k_axis + 1 :] != f3_roi.shape[k_axis + 1 :]:
        raise DimensionError("attribute masks do not match RoI spatial size")
    if batched:
        parts = [mul_mask(f3_roi, masks[:, i : i + 1]) for i in range(k)]
    else:
        parts = [mul_mask(f3_roi, masks[i : i + 1]) for i in range(k)]
    f4 = concat_channels(parts)
    f4p = relu(batchnorm2d(_conv(p, "lf.l3", _conv(p, "lf.l2", _conv(p, "lf.l1", f4))), p.norms["lf.bn1"]))
    mid = batchnorm2d(_conv(p, "lf.l6", _conv(p, "lf.l5", _conv(p, "lf.l4", f4p))), p.norms["lf.bn2"])
    if mid.shape != f4p.shape:
        raise DimensionError("residual branches disagree in shape")
    f4pp = mid + f4p
    f5 = relu(batchnorm2d(_conv(p, "lf.l9", _conv(p, "lf.l8", _conv(p, "lf.l7", f4pp))), p.norms["lf.bn3"]))
    if return_parts:
        return f5, {"F4": f4, "F4'": f4p, "F4''": f4pp}
    return f5


def head_forward(f_roi: Tensor, p: ParamSet) -> Tensor:
    """Conv5 surrogate: 2x pooling, 3x3 conv/BN/ReLU, global max pool, FC to embed_dim."""
    if f_roi.shape[-3] != p["head.conv.w"].shape[1]:
        raise DimensionError("RoI channels do not match the head")
    x = relu(batchnorm2d(_conv(p, "head.conv", avg_pool2d(f_roi, 2)), p.norms["head.bn"]))
    return linear(global_max_pool(x), p["fc_global.w"], p["fc_global.b"])


def local_feature(f5: Tensor, p: ParamSet) -> Tensor:
    return linear(global_max_pool(f5), p["fc_local.w"], p["fc_local.b"])


def fuse_embed(g: Tensor, loc: Tensor) -> Tensor:
    """Concatenate global then local features along the feature axis."""
    if g.shape != loc.shape:
        raise DimensionError(f"global {g.shape} and local {loc.shape} features differ")
    return concat_channels([g, loc])


@dataclass
class EmbeddingRecord:
    e: np.ndarray
    r: float
    e_hat: np.ndarray
    det_score: float


def norm_aware_split(e, calibration: tuple[float, float]) -> EmbeddingRecord:
    """Split ``e`` into its norm (detection confidence) and unit direction (identity)."""
    e = np.asarray(e, dtype=np.float64)
    r = float(np.sqrt(e @ e))
    if r == 0.0:
        raise ValueError("degenerate embedding: zero vector has no direction")
    gain, offset = calibration
    z = gain * (r - offset)
    score = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
    return EmbeddingRecord(e=e.copy(), r=r, e_hat=e / r, det_score=float(score))


@dataclass
class SceneOutput:
    """Differentiable outputs for every proposal of one scene."""

    e: Tensor
    r: Tensor
    e_hat: Tensor
    det_score: Tensor
    intermediates: dict = field(default_factory=dict)

    def records(self) -> list[EmbeddingRecord]:
        return [
            EmbeddingRecord(self.e.data[i].copy(), float(self.r.data[i]), self.e_hat.data[i].copy(), float(self.det_score.data[i]))
            for i in range(self.e.shape[0])
        ]


def scene_masks(sample: SceneSample, boxes, cfg: NetworkConfig, feature_hw) -> tuple[np.ndarray, np.ndarray]:
    """Downsampled global mask (1 x m x n) and per-proposal RoI masks (N x K x h x w)."""
    if cfg.use_global_mask:
        gmask = downsample_mask(sample.global_mask[0], feature_hw)[None]
    else:
        gmask = np.ones((1,) + tuple(feature_hw), dtype=np.uint8)
    part = get_partition(cfg.k)
    roi = np.stack([roi_attribute_masks(sample.label_map, b, part, cfg.roi) for b in boxes]) if boxes else np.zeros((0, cfg.k) + tuple(cfg.roi))
    return gmask, roi


def forward_scene(sample: SceneSample, proposals, p: ParamSet, cfg: NetworkConfig, keep: bool = False) -> SceneOutput:
    """Run the full pipeline on one scene for the given proposal boxes."""
    boxes = [b if isinstance(b, Box) else Box(*b) for b in (getattr(q, "box", q) for q in proposals)]
    boxes = [b.clip(sample.height, sample.width) for b in boxes]
    if not boxes:
        raise ValueError("forward_scene needs at least one proposal")
    img = image_tensor(sample.image)
    f1 = stem_forward(img, p, cfg)
    size = (sample.height, sample.width)
    f1_roi = roi_align(f1, boxes, size, cfg.roi)
    g = head_forward(f1_roi, p)
    inter = {}
    if cfg.use_local:
        gmask, rmasks = scene_masks(sample, boxes, cfg, f1.shape[-2:])
        f3 = ga_block(f1, gmask, p)
        f3_roi = roi_align(f3, boxes, size, cfg.roi)
        f5 = lf_block(f3_roi, rmasks, p)
        loc = local_feature(f5, p)
        e = fuse_embed(g, loc)
        if keep:
            inter.update(F1=f1, F3=f3, F5=f5, g=g, l=loc, roi_masks=rmasks, global_mask=gmask)
    else:
        e = g
        if keep:
            inter.update(F1=f1, g=g)
    r = row_norm(e)
    e_hat = l2_normalize(e)
    return SceneOutput(e, r, e_hat, detection_score(r, p), inter)


def detection_score(r: Tensor, p: ParamSet) -> Tensor:
    """Sigmoid of the batch-normalised norm; in eval mode an affine map of ``r``."""
    n = r.shape[0]
    z = batchnorm2d(reshape(r, (n, 1, 1, 1)), p.norms["calib.bn"])
    return sigmoid(reshape(z, (n,)))


def calibration(p: ParamSet) -> tuple[float, float]:
    """Eval-mode ``(scale, bias)`` with ``det_score = sigmoid(scale * (r - bias))``."""
    bn = p.norms["calib.bn"]
    sd = float(np.sqrt(bn.running_var[0] + bn.eps))
    gamma, beta = float(bn.gamma.data[0]), float(bn.beta.data[0])
    scale = gamma / sd
    if scale == 0.0:
        raise ValueError("degenerate calibration: zero gain")
    return scale, float(bn.running_mean[0]) - beta / scale


# ---------------------------------------------------------------------------
# checkpoint


def param_arrays(p: ParamSet) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in p.tensors.items()}
    for name, bn in p.norms.items():
        arrays[f"{name}.gamma"] = bn.gamma.data
        arrays[f"{name}.beta"] = bn.beta.data
        arrays[f"{name}.running_mean"] = bn.running_mean
        arrays[f"{name}.running_var"] = bn.running_var
    return arrays


def load_param_arrays(p: ParamSet, arrays: dict[str, np.ndarray]) -> None:
    for name, t in p.tensors.items():
        _assign(t, arrays, name)
    for name, bn in p.norms.items():
        _assign(bn.gamma, arrays, f"{name}.gamma")
        _assign(bn.beta, arrays, f"{name}.beta")
        bn.running_mean = arrays[f"{name}.running_mean"].copy()
        bn.running_var = arrays[f"{name}.running_var"].copy()


def _assign(t: Tensor, arrays, key: str) -> None:
    if key not in arrays:
        raise checkpoint.CheckpointError(f"checkpoint lacks parameter {key}")
    if arrays[key].shape != t.shape:
        raise checkpoint.CheckpointError(f"parameter {key}: shape {arrays[key].shape} != {t.shape}")
    t.data = arrays[key].copy()


def save_model(path, p: ParamSet, cfg: NetworkConfig, extra_meta: dict | None = None) -> str:
    meta = {"kind": "model", "code_version": code_version(), "config": cfg.to_dict(), **(extra_meta or {})}
    return checkpoint.save(path, meta, param_arrays(p))


def load_model(path, cfg: NetworkConfig | None = None) -> tuple[ParamSet, NetworkConfig, dict]:
    """Load a model (or training) checkpoint; rejects a mismatching ``cfg``."""
    meta, arrays = checkpoint.load(path)
    stored = NetworkConfig.from_dict(meta["config"])
    if cfg is not None and cfg.to_dict() != stored.to_dict():
        raise checkpoint.ConfigMismatchError(
            f"checkpoint config {stored.to_dict()} differs from requested {cfg.to_dict()}"
        )
    p = init_params(stored)
    load_param_arrays(p, arrays)
    return p, stored, meta
