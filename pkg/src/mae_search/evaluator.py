"""Model evaluation protocol and metric reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .metrics import (
    Detection,
    GalleryEntry,
    QueryCase,
    SweepRow,
    cmc,
    detection_pr,
    gallery_sweep,
    iou,
    nms,
    search_map,
)
from .network import NetworkConfig, forward_scene
from .objectives import ProposalPolicy, make_proposals
from .scene import SceneSample
from .tensor import ParamSet

REPORT_VERSION = 1


def eval_proposal_policy() -> ProposalPolicy:
    # no exact GT boxes at test time: two jittered copies per person plus random boxes
    return ProposalPolicy(include_gt=False, jitters=2, backgrounds=6)


@dataclass
class EvalProtocol:
    det_threshold: float = 0.5
    iou_thr: float = 0.5
    nms_iou: float = 0.5
    gallery_sizes: list[int] = field(default_factory=list)
    cmc_ranks: list[int] = field(default_factory=lambda: [1, 5, 10])
    include_empty_queries: bool = False
    proposals: ProposalPolicy = field(default_factory=eval_proposal_policy)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proposals"]["bg_height"] = list(self.proposals.bg_height)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalProtocol:
        d = dict(d)
        prop = dict(d.pop("proposals", {}))
        if "bg_height" in prop:
            prop["bg_height"] = tuple(prop["bg_height"])
        policy = ProposalPolicy(**prop) if prop else eval_proposal_policy()
        return cls(proposals=policy, **d)


@dataclass
class MetricsReport:
    detector: dict
    search: dict
    sweep: list[dict]
    meta: dict
    per_query_ap: list[float | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "detector": self.detector,
            "search": self.search,
            "sweep": self.sweep,
            "meta": self.meta,
            "per_query_ap": self.per_query_ap,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def report_schema() -> dict:
    return json.loads(resources.files("mae_search").joinpath("metrics_report.schema.json").read_text())


@dataclass
class SceneEmbeddings:
    """What evaluation keeps from one scene's forward pass."""

    queries: list[QueryCase]
    detections: list[Detection]
    entries: list[GalleryEntry]


def embed_scene(sample: SceneSample, params: ParamSet, net: NetworkConfig, protocol: EvalProtocol, index: int) -> SceneEmbeddings:
    rng = np.random.default_rng([protocol.seed, 97, index])
    ids = [p.identity for p in sample.persons]
    props = make_proposals(sample.gt_boxes, ids, (sample.height, sample.width), rng, protocol.proposals).proposals
    query_persons = [p for p in sample.persons if p.identity >= 0]
    boxes = [p.box for p in query_persons] + [p.box for p in props]
    if not boxes:
        return SceneEmbeddings([], [], [])
    params.set_training(False)
    out = forward_scene(sample, boxes, params, net)
    nq = len(query_persons)
    queries = [
        QueryCase(out.e_hat.data[i].copy(), query_persons[i].identity, sample.scene_id)
        for i in range(nq)
    ]
    cands = [
        (Detection(sample.scene_id, props[j].box, float(out.det_score.data[nq + j])), nq + j)
        for j in range(len(props))
    ]
    kept = nms(
        [d for d, _ in cands if d.score >= protocol.det_threshold], protocol.nms_iou
    )
    row_of = {id(d): r for d, r in cands}
    entries = []
    for d in kept:
        r = row_of[id(d)]
        best, best_iou = None, protocol.iou_thr
        for person in sample.persons:
            o = iou(d.box, person.box)
            if o >= best_iou:
                best, best_iou = person.identity, o
        entries.append(GalleryEntry(sample.scene_id, d.box, out.e_hat.data[r].copy(), d.score, best))
    return SceneEmbeddings(queries, kept, entries)


def evaluate_model(params: ParamSet, net: NetworkConfig, scenes: list[SceneSample], protocol: EvalProtocol | None = None) -> MetricsReport:
    """Detection Recall/AP, search mAP and CMC (plus optional gallery sweep) on ``scenes``."""
    protocol = protocol or EvalProtocol()
    queries: list[QueryCase] = []
    detections: list[Detection] = []
    gallery: list[GalleryEntry] = []
    for i, s in enumerate(scenes):
        emb = embed_scene(s, params, net, protocol, i)
        queries += emb.queries
        detections += emb.detections
        gallery += emb.entries
    gts = {s.scene_id: s.gt_boxes for s in scenes}
    recall, ap = detection_pr(detections, gts, protocol.iou_thr)
    max_rank = max(protocol.cmc_ranks) if protocol.cmc_ranks else 1
    res = search_map(queries, gallery, protocol.include_empty_queries)
    curve = cmc(queries, gallery, max_rank, protocol.include_empty_queries)
    sweep_rows: list[SweepRow] = []
    if protocol.gallery_sizes:
        pool = [s.scene_id for s in scenes]
        ids = {s.scene_id: {p.identity for p in s.persons if p.identity >= 0} for s in scenes}
        sweep_rows = gallery_sweep(
            queries, gallery, protocol.gallery_sizes, pool, ids, protocol.seed, max_rank,
            protocol.include_empty_queries,
        )
    return MetricsReport(
        detector={"recall": recall, "ap": ap, "detections": len(detections)},
        search={
            "map": res.map,
            "cmc": {str(k): float(curve[k - 1]) for k in protocol.cmc_ranks},
            "queries": len(queries),
            "excluded_queries": res.excluded,
        },
        sweep=[
            {
                "size": row.size,
                "map": row.map,
                "cmc": {str(k): float(row.cmc[k - 1]) for k in protocol.cmc_ranks},
                "per_query_ap": row.aps,
            }
            for row in sweep_rows
        ],
        meta={
            "gallery_size": len(scenes),
            "K": net.k,
            "use_global_mask": net.use_global_mask,
            "use_local": net.use_local,
            "seed": protocol.seed,
            "protocol": protocol.to_dict(),
        },
        per_query_ap=res.aps,
    )
