import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mae_search.metrics import (
    Detection,
    GalleryEntry,
    QueryCase,
    average_precision,
    cmc,
    detection_pr,
    gallery_sweep,
    iou,
    nested_galleries,
    nms,
    search_map,
)
from mae_search.scene import Box


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-15)


def test_iou_rejects_degenerate_box():
    with pytest.raises(ValueError):
        iou(Box(0, 0, 0, 5), Box(0, 0, 1, 1))


def _e(*v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_ap_top_ranked_match_is_one():
    q = QueryCase(_e(1, 0), 7, "q")
    g = [GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 0), 1.0, 7), GalleryEntry("b", Box(0, 0, 1, 1), _e(0, 1), 1.0, 3)]
    assert search_map([q], g).map == 1.0


def test_ap_positive_second_of_two_is_half():
    q = QueryCase(_e(1, 0), 7, "q")
    g = [GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 0), 1.0, 3), GalleryEntry("b", Box(0, 0, 1, 1), _e(0, 1), 1.0, 7)]
    assert search_map([q], g).map == 0.5
    np.testing.assert_array_equal(cmc([q], g, 2), [0.0, 1.0])


def test_ties_break_by_gallery_order():
    q = QueryCase(_e(1, 0), 1, "q")
    pos = GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 1), 1.0, 1)
    neg = GalleryEntry("b", Box(0, 0, 1, 1), _e(1, 1), 1.0, 2)
    assert search_map([q], [pos, neg]).map == 1.0
    assert search_map([q], [neg, pos]).map == 0.5


def test_one_true_positive_per_scene():
    q = QueryCase(_e(1, 0), 1, "q")
    g = [
        GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 0), 1.0, 1),
        GalleryEntry("a", Box(2, 2, 3, 3), _e(1, 0.1), 1.0, 1),  # duplicate in the same scene
    ]
    res = search_map([q], g)
    assert res.map == 1.0
    np.testing.assert_array_equal(average_precision(np.array([1, 0])), 1.0)


def test_queries_without_positives_are_excluded_or_zero():
    q = QueryCase(_e(1, 0), 9, "q")
    g = [GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 0), 1.0, 1)]
    res = search_map([q], g)
    assert res.excluded == 1 and res.aps == [None]
    assert search_map([q], g, include_empty=True).aps == [0.0]


def test_own_scene_is_never_ranked():
    q = QueryCase(_e(1, 0), 1, "a")
    g = [GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 0), 1.0, 1), GalleryEntry("b", Box(0, 0, 1, 1), _e(0, 1), 1.0, 1)]
    assert search_map([q], g).map == 1.0
    np.testing.assert_array_equal(cmc([q], g, 1), [1.0])


@pytest.mark.parametrize("seed", range(50))
def test_search_map_and_cmc_match_oracle(seed):
    rng = np.random.default_rng([seed, 606])
    queries, gallery = oracles.random_retrieval(rng)
    for include_empty in (False, True):
        assert abs(search_map(queries, gallery, include_empty).map - oracles.oracle_map(queries, gallery, include_empty)) <= 1e-12
        np.testing.assert_allclose(cmc(queries, gallery, 10, include_empty), oracles.oracle_cmc(queries, gallery, 10, include_empty), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_detection_pr_matches_oracle(seed):
    dets, gts = oracles.random_detection(np.random.default_rng([seed, 808]))
    r, ap = detection_pr(dets, gts)
    ro, apo = oracles.oracle_detection(dets, gts)
    assert abs(r - ro) <= 1e-12 and abs(ap - apo) <= 1e-12


def test_detection_perfect_and_empty():
    gts = {"a": [Box(0, 0, 10, 10), Box(20, 0, 30, 10)]}
    dets = [Detection("a", Box(0, 0, 10, 10), 0.9), Detection("a", Box(20, 0, 30, 10), 0.8)]
    assert detection_pr(dets, gts) == (1.0, 1.0)
    assert detection_pr([], gts) == (0.0, 0.0)


def test_detection_mixed_case():
    # four GT, six detections: TP FP TP FP TP FP in score order
    gts = {"a": [Box(0, 0, 10, 10), Box(20, 0, 30, 10)], "b": [Box(0, 0, 10, 10), Box(40, 40, 50, 50)]}
    dets = [
        Detection("a", Box(0, 0, 10, 10), 0.9),
        Detection("a", Box(60, 60, 70, 70), 0.8),
        Detection("b", Box(0, 0, 10, 10), 0.7),
        Detection("a", Box(0, 0, 10, 10), 0.6),  # duplicate of a matched GT
        Detection("a", Box(20, 0, 30, 10), 0.5),
        Detection("b", Box(70, 70, 80, 80), 0.4),
    ]
    r, ap = detection_pr(dets, gts)
    assert r == 0.75
    assert ap == pytest.approx((1 / 1 + 2 / 3 + 3 / 5) / 4, abs=1e-15)


def test_detection_order_of_tied_inputs_is_irrelevant():
    rng = np.random.default_rng(5)
    for _ in range(30):
        dets, gts = oracles.random_detection(rng)
        perm = [dets[i] for i in rng.permutation(len(dets))]
        assert detection_pr(dets, gts) == detection_pr(perm, gts)


def test_nms_suppresses_overlaps():
    d1 = Detection("a", Box(0, 0, 10, 10), 0.9)
    d2 = Detection("a", Box(1, 1, 11, 11), 0.8)
    d3 = Detection("a", Box(30, 30, 40, 40), 0.7)
    assert nms([d2, d3, d1], 0.5) == [d1, d3]


# ---------------------------------------------------------------------------
# invariances


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rank_invariance_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    queries, gallery = oracles.random_retrieval(rng, ties=False)
    # rotate every embedding by the same orthogonal map: all similarities unchanged
    q_, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    rq = [QueryCase(q.e_hat @ q_, q.identity, q.scene_id, q.candidates) for q in queries]
    rg = [GalleryEntry(g.scene_id, g.box, g.e_hat @ q_, g.det_score, g.gt_identity) for g in gallery]
    a, b = search_map(queries, gallery), search_map(rq, rg)
    np.testing.assert_allclose([x or 0 for x in a.aps], [x or 0 for x in b.aps], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_low_similarity_distractor_leaves_ap_unchanged(seed):
    rng = np.random.default_rng(seed)
    queries, gallery = oracles.random_retrieval(rng, ties=False)
    before = search_map(queries, gallery).aps
    for q in queries:
        # a distractor pointing away from every query ranks last for all of them
        far = -np.mean([x.e_hat for x in queries], axis=0)
        if np.linalg.norm(far) == 0:
            return
    far = far / np.linalg.norm(far)
    if any(np.dot(q.e_hat, far) >= min(np.dot(q.e_hat, g.e_hat) for g in gallery) for q in queries):
        return
    after = search_map(queries, gallery + [GalleryEntry("zz", Box(0, 0, 1, 1), far, 1.0, -1)]).aps
    assert before == after


def test_cmc_non_decreasing_and_reaches_one():
    rng = np.random.default_rng(9)
    for _ in range(20):
        queries, gallery = oracles.random_retrieval(rng)
        curve = cmc(queries, gallery, 10)
        assert np.all(np.diff(curve) >= 0)
        if search_map(queries, gallery).excluded == 0 and len(queries):
            assert curve[-1] == 1.0 or len(gallery) < 10


# ---------------------------------------------------------------------------
# gallery sweep


def test_nested_galleries_are_nested_and_keep_positives():
    pool = [f"s{i}" for i in range(8)]
    ids = {s: ({1} if s in ("s2", "s5") else {0}) for s in pool}
    q = QueryCase(_e(1, 0), 1, "s0")
    gals = nested_galleries(q, pool, ids, [1, 3, 8], np.random.default_rng(0))
    for small, big in zip(gals, gals[1:]):
        assert big[: len(small)] == small
    for g in gals:
        assert {"s2", "s5"} <= set(g)


def test_sweep_full_size_reproduces_search_map():
    rng = np.random.default_rng(4)
    queries, gallery, pool, ids, _ = oracles.random_sweep_instance(rng)
    rows = gallery_sweep(queries, gallery, [len(pool)], pool, ids)
    assert rows[0].map == pytest.approx(search_map(queries, gallery).map, abs=1e-15)


def test_sweep_is_deterministic_and_validates_sizes():
    rng = np.random.default_rng(2)
    queries, gallery, pool, ids, sizes = oracles.random_sweep_instance(rng)
    a = gallery_sweep(queries, gallery, sizes, pool, ids, seed=3)
    b = gallery_sweep(queries, gallery, sizes, pool, ids, seed=3)
    assert [r.aps for r in a] == [r.aps for r in b]
    with pytest.raises(ValueError):
        gallery_sweep(queries, gallery, [3, 2], pool, ids)
    with pytest.raises(ValueError):
        gallery_sweep(queries, gallery, [len(pool) + 1], pool, ids)


def test_sweep_micro_case_against_oracle():
    # three queries, hand-built gallery: AP at every size equals the oracle on that candidate list
    pool = ["a", "b", "c", "d"]
    ids = {"a": {1}, "b": {2}, "c": {1, 2}, "d": set()}
    gallery = [
        GalleryEntry("a", Box(0, 0, 1, 1), _e(1, 0, 0), 1.0, 1),
        GalleryEntry("b", Box(0, 0, 1, 1), _e(0, 1, 0), 1.0, 2),
        GalleryEntry("c", Box(0, 0, 1, 1), _e(1, 1, 0), 1.0, 1),
        GalleryEntry("c", Box(2, 2, 3, 3), _e(0, 1, 1), 1.0, 2),
        GalleryEntry("d", Box(0, 0, 1, 1), _e(1, 0.2, 0), 1.0, None),
    ]
    queries = [QueryCase(_e(1, 0.1, 0), 1, "a"), QueryCase(_e(0, 1, 0.2), 2, "b"), QueryCase(_e(1, 1, 0.1), 1, "c")]
    rows = gallery_sweep(queries, gallery, [1, 2, 3, 4], pool, ids, seed=0)
    for row in rows:
        for qi, q in enumerate(queries):
            gal = nested_galleries(q, pool, ids, [row.size], np.random.default_rng([0, 577, qi]))[0]
            expected = oracles.oracle_ap(QueryCase(q.e_hat, q.identity, q.scene_id, gal), gallery)
            assert row.aps[qi] == pytest.approx(expected, abs=1e-12) if expected is not None else row.aps[qi] is None
    for qi in range(3):
        aps = [r.aps[qi] for r in rows if r.aps[qi] is not None]
        assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


@pytest.mark.parametrize("seed", range(50))
def test_sweep_per_query_ap_non_increasing(seed):
    assert oracles.sweep_monotone_violations(np.random.default_rng([seed, 707])) == 0
