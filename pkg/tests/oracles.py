"""Brute-force reference implementations for the retrieval and detection metrics.

These deliberately avoid sorting: ranks are counted pairwise and the
precision/recall curve is rebuilt from scratch at every cut-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mae_search.metrics import Detection, GalleryEntry, QueryCase, cmc, detection_pr, gallery_sweep, iou, search_map
from mae_search.scene import Box


def _candidates(q: QueryCase, gallery):
    return [
        (i, g) for i, g in enumerate(gallery)
        if g.scene_id != q.scene_id and (q.candidates is None or g.scene_id in q.candidates)
    ]


def _rank(i: int, sims: dict[int, float]) -> int:
    """1-based rank: entries with higher similarity, or equal similarity and earlier position, come first."""
    return 1 + sum(1 for j, s in sims.items() if s > sims[i] or (s == sims[i] and j < i))


def oracle_relevant_ranks(q: QueryCase, gallery) -> list[int]:
    cands = _candidates(q, gallery)
    sims = {i: float(np.dot(q.e_hat, g.e_hat)) for i, g in cands}
    ranks = {i: _rank(i, sims) for i, _ in cands}
    best_per_scene: dict[str, int] = {}
    for i, g in cands:
        if g.gt_identity is not None and g.gt_identity == q.identity:
            cur = best_per_scene.get(g.scene_id)
            if cur is None or ranks[i] < ranks[cur]:
                best_per_scene[g.scene_id] = i
    return sorted(ranks[i] for i in best_per_scene.values())


def oracle_ap(q: QueryCase, gallery) -> float | None:
    rel = oracle_relevant_ranks(q, gallery)
    if not rel:
        return None
    return sum((n + 1) / r for n, r in enumerate(rel)) / len(rel)


def oracle_map(queries, gallery, include_empty=False) -> float:
    aps = []
    for q in queries:
        ap = oracle_ap(q, gallery)
        if ap is None:
            if include_empty:
                aps.append(0.0)
            continue
        aps.append(ap)
    return float(np.mean(aps)) if aps else 0.0


def oracle_cmc(queries, gallery, max_rank, include_empty=False) -> np.ndarray:
    firsts = []
    for q in queries:
        rel = oracle_relevant_ranks(q, gallery)
        if rel:
            firsts.append(rel[0])
        elif include_empty:
            firsts.append(None)
    if not firsts:
        return np.zeros(max_rank)
    return np.array([sum(1 for f in firsts if f is not None and f <= k) / len(firsts) for k in range(1, max_rank + 1)])


def _greedy_tp(top, gts, thr) -> list[bool]:
    used = {sid: [False] * len(b) for sid, b in gts.items()}
    flags = []
    for d in top:
        best, best_iou = -1, thr
        for j, g in enumerate(gts.get(d.scene_id, [])):
            if not used[d.scene_id][j]:
                o = iou(d.box, g)
                if o >= best_iou:
                    best, best_iou = j, o
        if best >= 0:
            used[d.scene_id][best] = True
        flags.append(best >= 0)
    return flags


def oracle_detection(dets, gts, thr=0.5) -> tuple[float, float]:
    """Rebuild the PR curve one cut-off at a time; AP = sum of (R_k - R_{k-1}) * P_k."""
    total = sum(len(v) for v in gts.values())
    if total == 0 or not dets:
        return 0.0, 0.0
    # order by counting how many detections precede each one
    key = {i: (-d.score, d.scene_id, d.box.as_tuple()) for i, d in enumerate(dets)}
    pos = {i: sum(1 for j in key if key[j] < key[i] or (key[j] == key[i] and j < i)) for i in key}
    ordered = [None] * len(dets)
    for i, p in pos.items():
        ordered[p] = dets[i]
    ap, prev_r = 0.0, 0.0
    recall = 0.0
    for k in range(1, len(ordered) + 1):
        flags = _greedy_tp(ordered[:k], gts, thr)
        tp = sum(flags)
        recall = tp / total
        precision = tp / k
        ap += (recall - prev_r) * precision
        prev_r = recall
    return recall, ap


# ---------------------------------------------------------------------------
# random instances


def random_box(rng, w=40.0, h=40.0) -> Box:
    x1, y1 = rng.uniform(0, w - 6), rng.uniform(0, h - 6)
    return Box(x1, y1, x1 + rng.uniform(4, w - x1), y1 + rng.uniform(4, h - y1))


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def random_retrieval(rng, max_queries=5, max_entries=10, ties=True):
    n_ids = int(rng.integers(1, 4))
    n_scenes = int(rng.integers(2, 6))
    scenes = [f"s{i}" for i in range(n_scenes)]
    d = 3
    gallery = []
    for _ in range(int(rng.integers(1, max_entries + 1))):
        e = _unit(rng, d)
        if ties and rng.random() < 0.4:
            e = np.round(e, 1)
            e = e / np.linalg.norm(e) if np.linalg.norm(e) > 0 else np.array([1.0, 0, 0])
        ident = int(rng.integers(-1, n_ids)) if rng.random() < 0.9 else None
        gallery.append(GalleryEntry(str(rng.choice(scenes)), random_box(rng), e, float(rng.random()), ident))
    if ties and len(gallery) > 1 and rng.random() < 0.5:
        gallery[-1].e_hat = gallery[0].e_hat.copy()  # exact similarity tie
    queries = []
    for _ in range(int(rng.integers(1, max_queries + 1))):
        cands = None
        if rng.random() < 0.3:
            cands = [s for s in scenes if rng.random() < 0.7]
        queries.append(QueryCase(_unit(rng, d), int(rng.integers(0, n_ids)), str(rng.choice(scenes + ["q"])), cands))
    return queries, gallery


def random_detection(rng, max_dets=10):
    scenes = [f"s{i}" for i in range(int(rng.integers(1, 4)))]
    gts = {s: [random_box(rng) for _ in range(int(rng.integers(0, 4)))] for s in scenes}
    dets = []
    for _ in range(int(rng.integers(0, max_dets + 1))):
        s = str(rng.choice(scenes))
        if gts[s] and rng.random() < 0.6:
            g = gts[s][int(rng.integers(len(gts[s])))]
            j = rng.uniform(-2, 2, 4)
            box = Box(g.x1 + j[0], g.y1 + j[1], max(g.x1 + j[0] + 1, g.x2 + j[2]), max(g.y1 + j[1] + 1, g.y2 + j[3]))
        else:
            box = random_box(rng)
        score = float(np.round(rng.random(), 1))  # coarse scores produce ties
        dets.append(Detection(s, box, score))
    return dets, gts


@dataclass
class OracleReport:
    instances: int
    max_error: float
    monotone_violations: int


def run_oracle_suite(n: int = 50, seed: int = 0) -> OracleReport:
    """Compare library metrics with the oracles on ``n`` random instances of each kind."""
    worst = 0.0
    for i in range(n):
        rng = np.random.default_rng([seed, 606, i])
        queries, gallery = random_retrieval(rng)
        for include_empty in (False, True):
            worst = max(worst, abs(search_map(queries, gallery, include_empty).map - oracle_map(queries, gallery, include_empty)))
            worst = max(worst, float(np.max(np.abs(cmc(queries, gallery, 10, include_empty) - oracle_cmc(queries, gallery, 10, include_empty)))))
        dets, gts = random_detection(rng)
        r, ap = detection_pr(dets, gts)
        ro, apo = oracle_detection(dets, gts)
        worst = max(worst, abs(r - ro), abs(ap - apo))
    violations = sum(sweep_monotone_violations(np.random.default_rng([seed, 707, i])) for i in range(n))
    return OracleReport(n, worst, violations)


def random_sweep_instance(rng):
    n_scenes = int(rng.integers(4, 12))
    n_ids = int(rng.integers(1, 4))
    pool = [f"s{i}" for i in range(n_scenes)]
    gallery, ids = [], {}
    for s in pool:
        ids[s] = set()
        for _ in range(int(rng.integers(0, 3))):
            ident = int(rng.integers(-1, n_ids))
            if ident >= 0:
                ids[s].add(ident)
            gallery.append(GalleryEntry(s, random_box(rng), _unit(rng, 3), 1.0, ident))
    queries = [QueryCase(_unit(rng, 3), int(rng.integers(0, n_ids)), str(rng.choice(pool))) for _ in range(int(rng.integers(1, 5)))]
    sizes = sorted(set(int(x) for x in rng.integers(1, n_scenes + 1, size=3)))
    return queries, gallery, pool, ids, sizes


def sweep_monotone_violations(rng) -> int:
    queries, gallery, pool, ids, sizes = random_sweep_instance(rng)
    rows = gallery_sweep(queries, gallery, sizes, pool, ids, seed=int(rng.integers(1000)))
    bad = 0
    for qi in range(len(queries)):
        prev = None
        for row in rows:
            ap = row.aps[qi]
            if ap is None:
                continue
            if prev is not None and ap > prev + 1e-12:
                bad += 1
            prev = ap
    return bad
