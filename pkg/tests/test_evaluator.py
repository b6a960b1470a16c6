import json

import jsonschema
import numpy as np
import pytest

from mae_search.dataset import synthesize
from mae_search.evaluator import EvalProtocol, embed_scene, evaluate_model, report_schema
from mae_search.metrics import GalleryEntry, search_map
from mae_search.network import NetworkConfig, init_params
from mae_search.scene import SceneConfig

SMALL = SceneConfig(height=64, width=96, person_height=(32, 60), max_persons=3)
NET = NetworkConfig(c1=16, c3=4, c5=8, roi=(6, 6), embed_dim=8, stem_stride=4)


@pytest.fixture(scope="module")
def scenes():
    return synthesize(6, 0, 24, seed=0, cfg=SMALL)


@pytest.fixture(scope="module")
def report(scenes):
    # an untrained calibration scores everything near 0.5, so keep every candidate
    return evaluate_model(init_params(NET), NET, scenes, EvalProtocol(det_threshold=0.0, gallery_sizes=[6, 12, 24]))


def test_report_validates_against_schema(report):
    jsonschema.validate(json.loads(report.dumps()), report_schema())
    assert [r["size"] for r in report.sweep] == [6, 12, 24]
    assert report.meta["K"] == 5 and report.meta["gallery_size"] == 24


def test_evaluation_is_deterministic(scenes, report):
    again = evaluate_model(init_params(NET), NET, scenes, EvalProtocol(det_threshold=0.0, gallery_sizes=[6, 12, 24]))
    assert again.dumps() == report.dumps()


def test_full_size_sweep_row_matches_search(report):
    assert report.sweep[-1]["map"] == pytest.approx(report.search["map"], abs=1e-12)


def test_sweep_per_query_ap_non_increasing(report):
    rows = [r["per_query_ap"] for r in report.sweep]
    for qi in range(len(rows[0])):
        aps = [r[qi] for r in rows if r[qi] is not None]
        assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


def test_untrained_model_is_far_from_trained_targets(scenes, report):
    """Random-init conv features already carry colour, so they beat random embeddings but stay weak."""
    prot = EvalProtocol(det_threshold=0.0)
    p = init_params(NET)
    queries, gallery = [], []
    for i, s in enumerate(scenes):
        e = embed_scene(s, p, NET, prot, i)
        queries += e.queries
        gallery += e.entries
    rng = np.random.default_rng(0)
    chance = []
    for _ in range(20):
        rand = [GalleryEntry(g.scene_id, g.box, _unit(rng, len(g.e_hat)), g.det_score, g.gt_identity) for g in gallery]
        chance.append(search_map(queries, rand).map)
    assert np.mean(chance) < 0.15
    assert report.search["map"] < 0.5


def test_every_query_has_a_positive(report):
    assert report.search["excluded_queries"] == 0 and report.search["queries"] > 0


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)
