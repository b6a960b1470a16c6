"""Synthetic whole-scene datasets with exact multi-attribute label maps.

Scenes are rendered from simple rectangle-built pedestrians over a cluttered
background. Because the renderer knows every part rectangle, the attribute
label map and the foreground mask are exact, which stands in for an external
human-parsing model. The module also provides the label plumbing the network
needs: cropping a label map to a box, splicing crops back onto a canvas,
merging attribute channels into coarser partitions and block-max resizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BASE_ATTRIBUTES = ("head", "upper-clothes", "lower-clothes", "shoes", "bag")
NUM_BASE = len(BASE_ATTRIBUTES)


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class AttributePartition:
    k: int
    names: tuple[str, ...]
    merge_map: tuple[int, ...]  # base attribute index -> merged channel

    def __post_init__(self):
        if len(self.merge_map) != NUM_BASE:
            raise PartitionError("merge_map must cover all five base attributes")
        if sorted(set(self.merge_map)) != list(range(self.k)):
            raise PartitionError("merge_map must be surjective onto 0..K-1")
        if len(self.names) != self.k:
            raise PartitionError("one name per merged channel")


PARTITIONS = {
    5: AttributePartition(5, BASE_ATTRIBUTES, (0, 1, 2, 3, 4)),
    4: AttributePartition(4, ("head", "upper-clothes", "lower-clothes", "bag"), (0, 1, 2, 2, 3)),
    3: AttributePartition(3, ("head", "all-clothes", "bag"), (0, 1, 1, 1, 2)),
}


def get_partition(k: int) -> AttributePartition:
    try:
        return PARTITIONS[int(k)]
    except (KeyError, TypeError, ValueError):
        raise PartitionError(f"unknown attribute partition K={k!r}; expected 3, 4 or 5") from None


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clip(self, height: int, width: int) -> Box:
        x1, x2 = min(max(self.x1, 0), width), min(max(self.x2, 0), width)
        y1, y2 = min(max(self.y1, 0), height), min(max(self.y2, 0), height)
        return Box(x1, y1, x2, y2)

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """Integer pixel extent ``(x0, y0, x1, y1)`` covered by the box, end-exclusive."""
        return (
            int(math.floor(self.x1)),
            int(math.floor(self.y1)),
            int(math.ceil(self.x2)),
            int(math.ceil(self.y2)),
        )


Rect = tuple[int, int, int, int]  # x0, y0, x1, y1 end-exclusive image pixels


@dataclass
class PersonAppearance:
    """Identity-level look: one RGB colour per base attribute plus texture."""

    colors: list[list[int]]
    stripe_period: int = 0  # 0 = plain upper clothes
    has_bag: bool = False

    def to_json(self) -> dict:
        return {"colors": self.colors, "stripe_period": self.stripe_period, "has_bag": self.has_bag}

    @classmethod
    def from_json(cls, d: dict) -> PersonAppearance:
        return cls([list(c) for c in d["colors"]], int(d["stripe_period"]), bool(d["has_bag"]))


@dataclass
class PersonInstance:
    identity: int  # -1 marks an unlabeled passer-by
    box: Box
    appearance: PersonAppearance
    part_layout: list[list[Rect]]  # per base attribute, list of rectangles (may be empty)
    skin_layout: list[Rect]
    visibility: list[bool]

    def silhouette_rects(self) -> list[Rect]:
        return [r for rects in self.part_layout for r in rects] + list(self.skin_layout)


@dataclass
class SceneSample:
    scene_id: str
    split: str
    image: np.ndarray  # uint8, 3 x H x W
    persons: list[PersonInstance]
    label_map: np.ndarray  # uint8 0/1, 5 x H x W, pairwise disjoint
    global_mask: np.ndarray  # uint8 0/1, 1 x H x W

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def gt_boxes(self) -> list[Box]:
        return [p.box for p in self.persons]


@dataclass
class SceneConfig:
    height: int = 96
    width: int = 160
    min_persons: int = 1
    max_persons: int = 4
    person_height: tuple[int, int] = (40, 72)
    unlabeled_prob: float = 0.15
    clutter_shapes: int = 14
    noise_sigma: float = 6.0
    max_overlap_iou: float = 0.3

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ValueError("image extent must be at least 32 x 32")
        if not 0 <= self.min_persons <= self.max_persons <= 8:
            raise ValueError("persons per scene must satisfy 0 <= min <= max <= 8")
        lo, hi = self.person_height
        if not 8 <= lo <= hi <= self.height:
            raise ValueError("person_height range must fit in the image")


# ---------------------------------------------------------------------------
# identities

_PALETTE = np.array(
    [
        [200, 40, 40], [40, 160, 60], [40, 70, 200], [220, 200, 40], [150, 60, 180],
        [30, 170, 170], [240, 140, 30], [235, 235, 235], [30, 30, 30], [120, 80, 40],
    ],
    dtype=np.int64,
)
_SKIN = np.array([205, 160, 130])


def make_identity_pool(n: int, seed: int) -> list[PersonAppearance]:
    """Draw ``n`` distinct identity appearances; any two differ in at least two attributes."""
    if n < 1:
        raise ValueError("identity pool must not be empty")
    rng = np.random.default_rng([seed, 7919])
    pool: list[PersonAppearance] = []
    codes: list[tuple] = []
    attempts = 0
    while len(pool) < n:
        attempts += 1
        if attempts > 100_000:
            raise RuntimeError("could not draw enough distinct identities")
        idx = rng.integers(0, len(_PALETTE), size=NUM_BASE)
        stripe = int(rng.choice([0, 0, 2, 3]))
        bag = bool(rng.random() < 0.5)
        code = tuple(idx.tolist()) + (stripe, bag)
        if any(sum(a != b for a, b in zip(code, c)) < 2 for c in codes):
            continue
        codes.append(code)
        pool.append(PersonAppearance([_PALETTE[i].tolist() for i in idx], stripe, bag))
    return pool


def random_appearance(rng: np.random.Generator) -> PersonAppearance:
    colors = rng.integers(20, 236, size=(NUM_BASE, 3)).tolist()
    return PersonAppearance(colors, int(rng.choice([0, 2, 3])), bool(rng.random() < 0.4))


# ---------------------------------------------------------------------------
# rendering

# fractions of the box: (x0, y0, x1, y1)
_PART_FRACTIONS = {
    0: [(0.30, 0.00, 0.70, 0.15)],
    1: [(0.15, 0.19, 0.85, 0.52)],
    2: [(0.20, 0.52, 0.80, 0.86)],
    3: [(0.20, 0.90, 0.45, 1.00), (0.55, 0.90, 0.80, 1.00)],
    4: [(0.85, 0.38, 1.00, 0.64)],
}
_SKIN_FRACTIONS = [
    (0.42, 0.15, 0.58, 0.19),
    (0.00, 0.19, 0.15, 0.50),
    (0.85, 0.19, 1.00, 0.38),
    (0.85, 0.64, 1.00, 0.70),
    (0.25, 0.86, 0.75, 0.90),
]


def _frac_rect(box: Rect, f) -> Rect:
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    rx0 = x0 + int(round(f[0] * w))
    ry0 = y0 + int(round(f[1] * h))
    rx1 = max(rx0 + 1, x0 + int(round(f[2] * w)))
    ry1 = max(ry0 + 1, y0 + int(round(f[3] * h)))
    return (rx0, ry0, min(rx1, x1), min(ry1, y1))


def person_layout(box: Box, has_bag: bool) -> tuple[list[list[Rect]], list[Rect]]:
    """Part and skin rectangles for a pedestrian filling ``box``."""
    pb = box.pixel_bounds()
    parts: list[list[Rect]] = []
    for a in range(NUM_BASE):
        if a == 4 and not has_bag:
            parts.append([])
            continue
        parts.append([_frac_rect(pb, f) for f in _PART_FRACTIONS[a]])
    skin = [_frac_rect(pb, f) for f in _SKIN_FRACTIONS]
    if not has_bag:
        skin.append(_frac_rect(pb, (0.85, 0.38, 1.00, 0.64)))
    # Rounding can make neighbouring rectangles touch; trim skin so regions stay disjoint.
    occupied = np.zeros((pb[3] - pb[1], pb[2] - pb[0]), dtype=bool)
    for rects in parts:
        for x0, y0, x1, y1 in rects:
            occupied[y0 - pb[1] : y1 - pb[1], x0 - pb[0] : x1 - pb[0]] = True
    kept = []
    for x0, y0, x1, y1 in skin:
        if not occupied[y0 - pb[1] : y1 - pb[1], x0 - pb[0] : x1 - pb[0]].any():
            kept.append((x0, y0, x1, y1))
    return parts, kept


def _iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _background(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    c0, c1 = rng.integers(40, 200, size=(2, 3))
    t = np.linspace(0.0, 1.0, w)[None, :, None]
    img = (c0[None, None, :] * (1 - t) + c1[None, None, :] * t) * np.ones((h, 1, 1))
    for _ in range(cfg.clutter_shapes):
        sw, sh = rng.integers(4, max(5, w // 4)), rng.integers(4, max(5, h // 3))
        x0, y0 = rng.integers(0, w - sw), rng.integers(0, h - sh)
        if rng.random() < 0.5:
            color = _PALETTE[rng.integers(len(_PALETTE))]
        else:
            color = rng.integers(0, 256, size=3)
        img[y0 : y0 + sh, x0 : x0 + sw] = color
    return img


def render_scene(
    cfg: SceneConfig,
    identity_pool: list[PersonAppearance],
    seed,
    scene_id: str = "scene",
    split: str = "train",
    identities: list[int] | None = None,
) -> SceneSample:
    """Render one scene deterministically from ``seed``.

    ``identities`` fixes the labeled identities to place (``-1`` for an
    unlabeled passer-by); otherwise they are drawn from the pool. Persons are
    painted back to front by the bottom edge of their box.
    """
    if not identity_pool:
        raise ValueError("identity pool is empty")
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    if identities is None:
        count = int(rng.integers(cfg.min_persons, cfg.max_persons + 1))
        chosen = rng.choice(len(identity_pool), size=min(count, len(identity_pool)), replace=False)
        identities = [int(i) if rng.random() >= cfg.unlabeled_prob else -1 for i in chosen]

    boxes: list[Box] = []
    kept_ids: list[int] = []
    for ident in identities:
        if ident >= len(identity_pool):
            raise ValueError(f"identity {ident} not in pool of {len(identity_pool)}")
        for _ in range(30):
            ph = int(rng.integers(cfg.person_height[0], cfg.person_height[1] + 1))
            pw = max(6, int(round(ph * 0.42)))
            if pw > w or ph > h:
                raise ValueError("person box exceeds image bounds")
            x0 = int(rng.integers(0, w - pw + 1))
            y0 = int(rng.integers(0, h - ph + 1))
            cand = Box(x0, y0, x0 + pw, y0 + ph)
            if all(_iou(cand, b) <= cfg.max_overlap_iou for b in boxes):
                boxes.append(cand)
                kept_ids.append(ident)
                break

    appearances = [
        identity_pool[i] if i >= 0 else random_appearance(rng) for i in kept_ids
    ]
    order = sorted(range(len(boxes)), key=lambda i: (boxes[i].y2, i))
    boxes = [boxes[i] for i in order]
    kept_ids = [kept_ids[i] for i in order]
    appearances = [appearances[i] for i in order]

    img = _background(rng, cfg)
    labels = np.zeros((NUM_BASE, h, w), dtype=np.uint8)
    owner = np.full((h, w), -1, dtype=np.int64)
    part_owner = np.full((h, w), -1, dtype=np.int64)
    persons: list[PersonInstance] = []
    light = rng.uniform(0.85, 1.15)
    for pi, (box, ident, app) in enumerate(zip(boxes, kept_ids, appearances)):
        if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
            raise ValueError("person box exceeds image bounds")
        parts, skin = person_layout(box, app.has_bag)
        tint = rng.uniform(-10, 10, size=3)
        for x0, y0, x1, y1 in skin:
            img[y0:y1, x0:x1] = _SKIN * light + tint
            labels[:, y0:y1, x0:x1] = 0
            owner[y0:y1, x0:x1] = pi
            part_owner[y0:y1, x0:x1] = -1
        for a, rects in enumerate(parts):
            color = np.asarray(app.colors[a], dtype=np.float64) * light + tint
            for x0, y0, x1, y1 in rects:
                img[y0:y1, x0:x1] = color
                if a == 1 and app.stripe_period:
                    rows = np.arange(y0, y1)
                    dark = rows[((rows - y0) // app.stripe_period) % 2 == 1]
                    img[dark, x0:x1] = color * 0.55
                labels[:, y0:y1, x0:x1] = 0
                labels[a, y0:y1, x0:x1] = 1
                owner[y0:y1, x0:x1] = pi
                part_owner[y0:y1, x0:x1] = pi * NUM_BASE + a
        persons.append(PersonInstance(ident, box, app, parts, skin, [False] * NUM_BASE))

    for pi, p in enumerate(persons):
        p.visibility = [bool(np.any(part_owner == pi * NUM_BASE + a)) for a in range(NUM_BASE)]

    noise = rng.normal(0.0, cfg.noise_sigma, size=img.shape) if cfg.noise_sigma > 0 else 0.0
    image = np.clip(np.rint(img + noise), 0, 255).astype(np.uint8).transpose(2, 0, 1)
    global_mask = (owner >= 0).astype(np.uint8)[None]
    return SceneSample(scene_id, split, np.ascontiguousarray(image), persons, labels, global_mask)


# ---------------------------------------------------------------------------
# label plumbing


def _box_slices(box: Box, height: int, width: int, strict: bool) -> tuple[slice, slice]:
    x0, y0, x1, y1 = box.pixel_bounds()
    if strict and (x0 < 0 or y0 < 0 or x1 > width or y1 > height):
        raise ValueError(f"box {box.as_tuple()} lies outside the {height}x{width} canvas")
    x0, x1 = max(x0, 0), min(x1, width)
    y0, y1 = max(y0, 0), min(y1, height)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box.as_tuple()} has zero area after clipping")
    return slice(y0, y1), slice(x0, x1)


def crop_labels(label_map: np.ndarray, box: Box) -> np.ndarray:
    """Cut the K-channel label map to the pixel extent of ``box`` (clipped to the map)."""
    _, h, w = label_map.shape
    ys, xs = _box_slices(box, h, w, strict=False)
    return label_map[:, ys, xs].copy()


def splice_crops(crops, canvas: tuple[int, int]) -> np.ndarray:
    """Paste per-box K-channel crops onto an empty canvas; later crops win per pixel."""
    h, w = canvas
    out = None
    for masks, box in crops:
        masks = np.asarray(masks)
        if out is None:
            out = np.zeros((masks.shape[0], h, w), dtype=np.uint8)
        ys, xs = _box_slices(box, h, w, strict=True)
        if masks.shape[1:] != (ys.stop - ys.start, xs.stop - xs.start):
            raise ValueError("crop extent does not match its box")
        out[:, ys, xs] = masks
    if out is None:
        return np.zeros((NUM_BASE, h, w), dtype=np.uint8)
    return out


def merge_partition(label_map: np.ndarray, target) -> np.ndarray:
    """OR base attribute channels together according to ``target``'s merge map."""
    part = target if isinstance(target, AttributePartition) else get_partition(target)
    if label_map.shape[0] != NUM_BASE:
        raise PartitionError("merge_partition expects the five base channels")
    out = np.zeros((part.k,) + label_map.shape[1:], dtype=label_map.dtype)
    for src, dst in enumerate(part.merge_map):
        out[dst] |= label_map[src]
    return out


def _cell_edges(src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(dst)
    lo = (i * src) // dst
    hi = -((-(i + 1) * src) // dst)  # ceil
    return lo, hi


def _block_counts(masks: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Per-cell count of set pixels, cells given by uniform coordinate mapping."""
    c, h, w = masks.shape
    m, n = target
    integral = np.zeros((c, h + 1, w + 1), dtype=np.int64)
    integral[:, 1:, 1:] = masks.astype(np.int64).cumsum(axis=1).cumsum(axis=2)
    r0, r1 = _cell_edges(h, m)
    c0, c1 = _cell_edges(w, n)
    return (
        integral[:, r1[:, None], c1[None, :]]
        - integral[:, r0[:, None], c1[None, :]]
        - integral[:, r1[:, None], c0[None, :]]
        + integral[:, r0[:, None], c0[None, :]]
    )


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block-max downsampling: a cell is set iff any pixel it covers is set."""
    mask = np.asarray(mask)
    squeeze = mask.ndim == 2
    m3 = mask[None] if squeeze else mask
    if target[0] > m3.shape[1] or target[1] > m3.shape[2]:
        raise ValueError(f"target {target} larger than source {m3.shape[1:]}")
    out = (_block_counts(m3, target) > 0).astype(np.uint8)
    return out[0] if squeeze else out


def resize_labels(label_map: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize a disjoint K-channel label map to ``target`` keeping channels disjoint.

    Cells follow the block-max rule (works for up- and down-sampling). A cell
    claimed by several channels goes to the channel with the most pixels in it
    (ties to the lower index). Channels left without a cell are then given one
    through augmenting paths over the cells they cover, so every channel
    present in the input keeps at least one cell whenever such an assignment
    exists.
    """
    counts = _block_counts(np.asarray(label_map), target)
    k = counts.shape[0]
    present = counts > 0
    any_set = present.any(axis=0)
    owner = np.where(any_set, np.argmax(counts, axis=0), -1)
    flat_counts = counts.reshape(k, -1)
    flat_owner = owner.reshape(-1)
    # candidate cells per channel, densest first
    cands = [list(np.argsort(-flat_counts[ch], kind="stable")[: int((flat_counts[ch] > 0).sum())]) for ch in range(k)]
    held: dict[int, int] = {}  # channel -> cell reserved for it
    holder: dict[int, int] = {}  # cell -> channel
    for ch in range(k):
        for cell in cands[ch]:
            if flat_owner[cell] == ch:
                held[ch], holder[int(cell)] = int(cell), ch
                break

    def augment(ch: int, seen: set[int]) -> bool:
        for cell in cands[ch]:
            cell = int(cell)
            if cell in seen:
                continue
            seen.add(cell)
            other = holder.get(cell)
            if other is None or augment(other, seen):
                held[ch], holder[cell] = cell, ch
                return True
        return False

    for ch in range(k):
        if cands[ch] and ch not in held:
            augment(ch, set())
    for cell, ch in holder.items():
        flat_owner[cell] = ch
    out = np.zeros(counts.shape, dtype=np.uint8)
    for ch in range(k):
        out[ch] = owner == ch
    return out


def roi_attribute_masks(
    label_map: np.ndarray, box: Box, partition: AttributePartition, out=(14, 14)
) -> np.ndarray:
    """Crop, merge to ``partition`` and resize the label map for one proposal."""
    crop = crop_labels(label_map, box)
    return resize_labels(merge_partition(crop, partition), out)
