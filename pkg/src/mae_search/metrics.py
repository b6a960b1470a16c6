"""Detection and retrieval metrics for person search.

All functions are pure. Rankings sort by descending similarity and break
ties by gallery insertion order; detections sort by descending score and
break ties by scene id, then box coordinates, so results never depend on the
order tied items were supplied in.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .scene import Box

log = logging.getLogger(__name__)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    for box in (a, b):
        if not (box.x1 < box.x2 and box.y1 < box.y2):
            raise ValueError(f"degenerate box {box}")
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


# ---------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: Box
    score: float


def detection_pr(
    dets: Sequence[Detection], gts: dict[str, list[Box]], iou_thr: float = 0.5
) -> tuple[float, float]:
    """Recall and AP of scored detections against ground-truth boxes.

    Detections are matched greedily in score order, each to the unmatched GT
    of its scene with the highest IoU >= ``iou_thr``. AP is the area under
    the (non-interpolated) precision/recall step curve.
    """
    total = sum(len(v) for v in gts.values())
    if total == 0 or not dets:
        return 0.0, 0.0
    order = sorted(dets, key=lambda d: (-d.score, d.scene_id, d.box.as_tuple()))
    used = {sid: [False] * len(boxes) for sid, boxes in gts.items()}
    tp = np.zeros(len(order))
    for i, d in enumerate(order):
        best, best_iou = -1, iou_thr
        for j, g in enumerate(gts.get(d.scene_id, [])):
            if used[d.scene_id][j]:
                continue
            o = iou(d.box, g)
            if o >= best_iou:
                best, best_iou = j, o
        if best >= 0:
            used[d.scene_id][best] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / total
    ap = float(np.sum(precision * tp) / total)
    return float(recall[-1]), ap


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Greedy non-maximum suppression within one scene."""
    keep: list[Detection] = []
    for d in sorted(dets, key=lambda d: (-d.score, d.box.as_tuple())):
        if all(iou(d.box, k.box) <= iou_thr for k in keep):
            keep.append(d)
    return keep


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class GalleryEntry:
    scene_id: str
    box: Box
    e_hat: np.ndarray
    det_score: float
    gt_identity: int | None = None  # scoring only, never used for ranking


@dataclass
class QueryCase:
    e_hat: np.ndarray
    identity: int
    scene_id: str = ""
    candidates: list[str] | None = None  # gallery scene ids; None = every scene but its own


@dataclass
class SearchResult:
    map: float
    aps: list[float | None]  # None for excluded queries
    excluded: int = 0

    @property
    def evaluated(self) -> int:
        return sum(a is not None for a in self.aps)


def ranked_relevance(query: QueryCase, gallery: Sequence[GalleryEntry]) -> np.ndarray:
    """0/1 relevance of the query's candidate entries in ranked order.

    At most one entry per (query, scene) is relevant: the best-ranked one
    carrying the query identity.
    """
    if query.candidates is None:
        allowed = None
    else:
        allowed = set(query.candidates)
    entries = [
        g
        for g in gallery
        if g.scene_id != query.scene_id and (allowed is None or g.scene_id in allowed)
    ]
    if not entries:
        return np.zeros(0)
    sims = np.array([float(np.dot(query.e_hat, g.e_hat)) for g in entries])
    order = np.argsort(-sims, kind="stable")
    rel = np.zeros(len(entries))
    credited: set[str] = set()
    for rank, idx in enumerate(order):
        g = entries[idx]
        if g.gt_identity is not None and g.gt_identity == query.identity and g.scene_id not in credited:
            credited.add(g.scene_id)
            rel[rank] = 1.0
    return rel


def average_precision(relevance: np.ndarray) -> float | None:
    """Mean precision at the ranks of relevant items; None when nothing is relevant."""
    rel = np.asarray(relevance, dtype=np.float64)
    npos = rel.sum()
    if npos == 0:
        return None
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, len(rel) + 1)
    return float((precision * rel).sum() / npos)


def search_map(queries: Sequence[QueryCase], gallery: Sequence[GalleryEntry], include_empty: bool = False) -> SearchResult:
    """Mean average precision over queries.

    Queries without any relevant entry are excluded (logged) unless
    ``include_empty`` is set, in which case they score AP 0.
    """
    aps: list[float | None] = []
    excluded = 0
    for q in queries:
        ap = average_precision(ranked_relevance(q, gallery))
        if ap is None:
            if include_empty:
                ap = 0.0
            else:
                excluded += 1
        aps.append(ap)
    if excluded:
        log.info("excluded %d queries with no positive in their gallery", excluded)
    valid = [a for a in aps if a is not None]
    return SearchResult(float(np.mean(valid)) if valid else 0.0, aps, excluded)


def cmc(queries: Sequence[QueryCase], gallery: Sequence[GalleryEntry], max_rank: int = 10, include_empty: bool = False) -> np.ndarray:
    """CMC curve: entry k-1 is the fraction of queries whose first hit is at rank <= k."""
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    firsts = []
    for q in queries:
        rel = ranked_relevance(q, gallery)
        hits = np.nonzero(rel)[0]
        if hits.size:
            firsts.append(int(hits[0]) + 1)
        elif include_empty:
            firsts.append(None)
    if not firsts:
        return np.zeros(max_rank)
    ranks = np.arange(1, max_rank + 1)
    curve = np.array([sum(1 for f in firsts if f is not None and f <= k) for k in ranks], dtype=np.float64)
    return curve / len(firsts)


# ---------------------------------------------------------------------------
# gallery sweep


@dataclass
class SweepRow:
    size: int
    map: float
    cmc: np.ndarray
    aps: list[float | None] = field(default_factory=list)


def nested_galleries(
    query: QueryCase,
    pool: Sequence[str],
    scene_identities: dict[str, set[int]],
    sizes: Sequence[int],
    rng: np.random.Generator,
) -> list[list[str]]:
    """Nested candidate lists, one per size, growing only by distractor scenes.

    The pool is ordered as: scenes containing the query identity, the query's
    own scene (never ranked), then a random permutation of the distractors.
    Each gallery is a prefix of that order holding at least every positive.
    """
    positives = [s for s in pool if s != query.scene_id and query.identity in scene_identities.get(s, set())]
    own = [s for s in pool if s == query.scene_id]
    distractors = [s for s in pool if s != query.scene_id and s not in set(positives)]
    distractors = [distractors[i] for i in rng.permutation(len(distractors))]
    ordered = positives + own + distractors
    floor = len(positives) + len(own)
    return [ordered[: max(size, floor)] for size in sizes]


def gallery_sweep(
    queries: Sequence[QueryCase],
    gallery: Sequence[GalleryEntry],
    sizes: Sequence[int],
    pool: Sequence[str],
    scene_identities: dict[str, set[int]],
    seed: int = 0,
    max_rank: int = 10,
    include_empty: bool = False,
) -> list[SweepRow]:
    """Evaluate retrieval on nested galleries of increasing size (in scenes)."""
    sizes = list(sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError("gallery sizes must be strictly ascending")
    if sizes and sizes[-1] > len(pool):
        raise ValueError(f"gallery size {sizes[-1]} exceeds the {len(pool)} available scenes")
    per_size: list[list[QueryCase]] = [[] for _ in sizes]
    for qi, q in enumerate(queries):
        rng = np.random.default_rng([seed, 577, qi])
        for si, cands in enumerate(nested_galleries(q, pool, scene_identities, sizes, rng)):
            per_size[si].append(QueryCase(q.e_hat, q.identity, q.scene_id, cands))
    rows = []
    for size, qs in zip(sizes, per_size):
        res = search_map(qs, gallery, include_empty)
        rows.append(SweepRow(size, res.map, cmc(qs, gallery, max_rank, include_empty), res.aps))
    return rows
