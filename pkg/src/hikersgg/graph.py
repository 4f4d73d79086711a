"""Commonsense knowledge graph, per-image scene graphs and bridge weights."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hierarchy import Hierarchy
from .numerics import MlpParams, mlp_forward

log = logging.getLogger(__name__)

# Commonsense edge types: four relation sets plus up/down hierarchical sets per branch.
COMMONSENSE_EDGE_TYPES = (
    "rel_ce_cp", "rel_cp_ce", "rel_ce_ce", "rel_cp_cp",
    "hier_ent_down", "hier_ent_up", "hier_pred_down", "hier_pred_up",
)
SCENE_EDGE_TYPES = ("subject_of", "object_of", "has_subject", "has_object")
BRIDGE_EDGE_TYPES = ("class_to_ent", "has_inst_ent", "class_to_pred", "has_inst_pred")
EDGE_TYPES = COMMONSENSE_EDGE_TYPES + SCENE_EDGE_TYPES + BRIDGE_EDGE_TYPES

NODE_FAMILIES = ("CE", "CXE2", "CXE1", "CP", "CXP2", "CXP1")


@dataclass
class GroundTruth:
    labels: np.ndarray
    boxes: np.ndarray
    triplets: np.ndarray  # [m, 3] rows of (subject, predicate, object)


def _rows(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.reshape(n, x.shape[-1] if x.ndim == 2 else 0)
    return x.reshape(n, -1)


@dataclass
class DetectionBundle:
    boxes: np.ndarray
    scores: np.ndarray
    ent_features: np.ndarray
    pair_features: np.ndarray
    gt: GroundTruth
    image_id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.scores = _rows(self.scores, n)
        self.ent_features = _rows(self.ent_features, n)
        self.pair_features = _rows(self.pair_features, n * (n - 1))
        self.gt = GroundTruth(np.asarray(self.gt.labels, dtype=np.int64),
                              np.asarray(self.gt.boxes, dtype=np.float64).reshape(-1, 4),
                              np.asarray(self.gt.triplets, dtype=np.int64).reshape(-1, 3))
        self.validate()

    @property
    def n(self) -> int:
        return len(self.boxes)

    def validate(self) -> None:
        b = self.boxes
        if n_bad := int(np.sum((b[:, 0] >= b[:, 2]) | (b[:, 1] >= b[:, 3]))):
            raise ValueError(f"{n_bad} proposal boxes violate x1 < x2, y1 < y2")
        if np.any(b < 0) or np.any(b > 1):
            raise ValueError("proposal boxes must lie in [0, 1]")
        if np.any(self.scores < 0) or np.any(self.scores.sum(axis=1) > 1 + 1e-6):
            raise ValueError("detector score rows must be non-negative and sum to at most 1")
        g = self.gt
        if len(g.labels) != len(g.boxes):
            raise ValueError("ground-truth labels and boxes differ in length")
        if len(g.triplets):
            ent = g.triplets[:, [0, 2]]
            if ent.min() < 0 or ent.max() >= len(g.labels):
                raise ValueError("triplet references a missing ground-truth entity")

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "boxes": self.boxes.tolist(), "scores": self.scores.tolist(),
            "ent_features": self.ent_features.tolist(), "pair_features": self.pair_features.tolist(),
            "gt": {"labels": self.gt.labels.tolist(), "boxes": self.gt.boxes.tolist(),
                   "triplets": self.gt.triplets.tolist()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DetectionBundle":
        g = doc["gt"]
        return cls(np.array(doc["boxes"], dtype=np.float64), np.array(doc["scores"], dtype=np.float64),
                   np.array(doc["ent_features"], dtype=np.float64),
                   np.array(doc["pair_features"], dtype=np.float64),
                   GroundTruth(np.array(g["labels"]), np.array(g["boxes"]), np.array(g["triplets"])),
                   str(doc.get("image_id", "")))


def load_bundles(path) -> list[DetectionBundle]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                b = DetectionBundle.from_json(json.loads(line))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not b.image_id:
                b.image_id = str(len(out))
            out.append(b)
    return out


def save_bundles(bundles, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_json(), sort_keys=True) + "\n")


def ordered_pairs(n: int) -> np.ndarray:
    """All ordered (subject, object) pairs with subject != object, subject-major."""
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = i != j
    return np.stack([i[keep], j[keep]], axis=1).astype(np.int64)


def pair_index(n: int, s: int, o: int) -> int:
    return s * (n - 1) + (o if o < s else o - 1)


@dataclass
class RelationEdge:
    src_kind: str
    src: int
    dst_kind: str
    dst: int
    label: str = ""


def load_relation_edges(path) -> list[RelationEdge]:
    doc = json.loads(Path(path).read_text())
    out = []
    for k, e in enumerate(doc):
        try:
            out.append(RelationEdge(e["src"]["kind"], int(e["src"]["idx"]), e["dst"]["kind"],
                                    int(e["dst"]["idx"]), str(e.get("label", ""))))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed relation edge #{k}") from exc
    return out


def save_relation_edges(edges, path) -> None:
    doc = [{"src": {"kind": e.src_kind, "idx": e.src}, "dst": {"kind": e.dst_kind, "idx": e.dst},
            "label": e.label} for e in edges]
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


@dataclass
class CommonsenseGraph:
    """Leaf class nodes plus superclass nodes for each hierarchy that is present.

    Node layout is family-major in ``NODE_FAMILIES`` order; a missing hierarchy
    contributes no superclass nodes. ``init_map`` expresses every node's initial
    feature as a fixed combination of the projected leaf embeddings
    (entity leaves first, then predicate leaves).
    """

    entity_classes: list[str]
    predicate_classes: list[str]
    ent_hierarchy: Hierarchy | None
    pred_hierarchy: Hierarchy | None
    relation_edges: list[RelationEdge]
    offsets: dict
    counts: dict
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_type: np.ndarray
    edge_label: list[str]
    init_map: np.ndarray
    features: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return int(sum(self.counts.values()))

    def family_slice(self, family: str) -> slice:
        o = self.offsets[family]
        return slice(o, o + self.counts[family])

    def edges_of(self, etype: str):
        m = self.edge_type == EDGE_TYPES.index(etype)
        return self.edge_src[m], self.edge_dst[m]

    def to_json(self) -> dict:
        return {
            "entity_classes": self.entity_classes, "predicate_classes": self.predicate_classes,
            "ent_hierarchy": self.ent_hierarchy.to_json() if self.ent_hierarchy else None,
            "pred_hierarchy": self.pred_hierarchy.to_json() if self.pred_hierarchy else None,
            "relation_edges": [{"src": {"kind": e.src_kind, "idx": e.src},
                                "dst": {"kind": e.dst_kind, "idx": e.dst}, "label": e.label}
                               for e in self.relation_edges],
            "nodes": [{"family": f, "offset": self.offsets[f], "count": self.counts[f]} for f in NODE_FAMILIES],
            "edges": [{"src": int(s), "dst": int(d), "type": EDGE_TYPES[t], "label": lab}
                      for s, d, t, lab in zip(self.edge_src, self.edge_dst, self.edge_type, self.edge_label)],
            "features": None if self.features is None else self.features.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CommonsenseGraph":
        eh = Hierarchy.from_json(doc["ent_hierarchy"]) if doc.get("ent_hierarchy") else None
        ph = Hierarchy.from_json(doc["pred_hierarchy"]) if doc.get("pred_hierarchy") else None
        rel = [RelationEdge(e["src"]["kind"], e["src"]["idx"], e["dst"]["kind"], e["dst"]["idx"], e["label"])
               for e in doc["relation_edges"]]
        g = build_structure(doc["entity_classes"], doc["predicate_classes"], eh, ph, rel)
        if doc.get("features") is not None:
            g.features = np.array(doc["features"], dtype=np.float64)
        stored = [(e["src"], e["dst"], e["type"]) for e in doc["edges"]]
        rebuilt = [(int(s), int(d), EDGE_TYPES[t]) for s, d, t in zip(g.edge_src, g.edge_dst, g.edge_type)]
        if stored != rebuilt:
            raise ValueError("stored edge list does not match the graph rebuilt from its inputs")
        return g


def build_structure(entity_classes, predicate_classes, ent_hierarchy, pred_hierarchy,
                    relation_edges) -> CommonsenseGraph:
    ne, npred = len(entity_classes), len(predicate_classes)
    for h, n, name in ((ent_hierarchy, ne, "entity"), (pred_hierarchy, npred, "predicate")):
        if h is not None and h.n_leaves != n:
            raise ValueError(f"{name} hierarchy covers {h.n_leaves} leaves but there are {n} classes")
    counts = {
        "CE": ne,
        "CXE2": ent_hierarchy.n_l2 if ent_hierarchy else 0,
        "CXE1": ent_hierarchy.n_l1 if ent_hierarchy else 0,
        "CP": npred,
        "CXP2": pred_hierarchy.n_l2 if pred_hierarchy else 0,
        "CXP1": pred_hierarchy.n_l1 if pred_hierarchy else 0,
    }
    offsets, o = {}, 0
    for f in NODE_FAMILIES:
        offsets[f] = o
        o += counts[f]
    n_nodes = o

    src, dst, typ, lab = [], [], [], []

    def add(s, d, t, label=""):
        src.append(s)
        dst.append(d)
        typ.append(EDGE_TYPES.index(t))
        lab.append(label)

    seen = set()
    kinds = {"CE": ("CE", ne), "CP": ("CP", npred)}
    for e in relation_edges:
        if e.src_kind not in kinds or e.dst_kind not in kinds:
            raise ValueError(f"relation edges may only join CE/CP nodes, got {e.src_kind}->{e.dst_kind}")
        for kind, idx in ((e.src_kind, e.src), (e.dst_kind, e.dst)):
            if not 0 <= idx < kinds[kind][1]:
                raise ValueError(f"relation edge references missing {kind} node {idx}")
        s = offsets[e.src_kind] + e.src
        d = offsets[e.dst_kind] + e.dst
        if s == d:
            raise ValueError("relation edges may not be self-loops")
        if (s, d) in seen:
            continue
        seen.add((s, d))
        add(s, d, f"rel_{e.src_kind.lower()}_{e.dst_kind.lower()}", e.label)

    n_leaf_total = ne + npred
    init_map = np.zeros((n_nodes, n_leaf_total))
    init_map[np.arange(ne), np.arange(ne)] = 1.0
    init_map[offsets["CP"] + np.arange(npred), ne + np.arange(npred)] = 1.0

    for h, leaf_fam, l2_fam, l1_fam, tag in (
        (ent_hierarchy, "CE", "CXE2", "CXE1", "ent"),
        (pred_hierarchy, "CP", "CXP2", "CXP1", "pred"),
    ):
        if h is None:
            continue
        for leaf, g in enumerate(h.leaf_to_l2):
            child, parent = offsets[leaf_fam] + leaf, offsets[l2_fam] + int(g)
            add(parent, child, f"hier_{tag}_down")
            add(child, parent, f"hier_{tag}_up")
        for g2, g1 in enumerate(h.l2_to_l1):
            child, parent = offsets[l2_fam] + g2, offsets[l1_fam] + int(g1)
            add(parent, child, f"hier_{tag}_down")
            add(child, parent, f"hier_{tag}_up")
        # superclass init = mean of direct children's initial features
        for g in range(h.n_l2):
            kids = offsets[leaf_fam] + np.flatnonzero(h.leaf_to_l2 == g)
            init_map[offsets[l2_fam] + g] = init_map[kids].mean(axis=0)
        for g in range(h.n_l1):
            kids = offsets[l2_fam] + np.flatnonzero(h.l2_to_l1 == g)
            init_map[offsets[l1_fam] + g] = init_map[kids].mean(axis=0)

    return CommonsenseGraph(
        list(entity_classes), list(predicate_classes), ent_hierarchy, pred_hierarchy, list(relation_edges),
        offsets, counts, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
        np.array(typ, dtype=np.int64), lab, init_map,
    )


def build_commonsense_graph(entity_classes, predicate_classes, ent_hierarchy, pred_hierarchy,
                            relation_edges, embeddings, proj_w, proj_b=None) -> CommonsenseGraph:
    """Structure plus initial features ``LinearProj(embedding)`` and superclass means."""
    g = build_structure(entity_classes, predicate_classes, ent_hierarchy, pred_hierarchy, relation_edges)
    leaf_emb = np.concatenate([embeddings.lookup(entity_classes), embeddings.lookup(predicate_classes)])
    proj = leaf_emb @ np.asarray(proj_w)
    if proj_b is not None:
        proj = proj + np.asarray(proj_b)
    g.features = g.init_map @ proj
    return g


@dataclass
class SceneGraph:
    boxes: np.ndarray
    pairs: np.ndarray
    se_features: np.ndarray | None = None
    sp_features: np.ndarray | None = None
    edges: dict = field(default_factory=dict)

    @property
    def n_se(self) -> int:
        return len(self.boxes)

    @property
    def n_sp(self) -> int:
        return len(self.pairs)


def scene_edges(n: int) -> dict:
    """Scene edge lists in local indexing: SE nodes 0..n-1, SP node k at n + k."""
    pairs = ordered_pairs(n)
    sp = n + np.arange(len(pairs))
    return {
        "subject_of": (pairs[:, 0], sp),
        "object_of": (pairs[:, 1], sp),
        "has_subject": (sp, pairs[:, 0]),
        "has_object": (sp, pairs[:, 1]),
    }


def init_scene_graph(bundle: DetectionBundle, fc_e: MlpParams | None = None,
                     fc_p: MlpParams | None = None) -> SceneGraph:
    if bundle.n < 2:
        log.warning("image %s has %d proposal(s); no predicate nodes", bundle.image_id, bundle.n)
    sg = SceneGraph(bundle.boxes.copy(), ordered_pairs(bundle.n), edges=scene_edges(bundle.n))
    if fc_e is not None:
        sg.se_features = mlp_forward(fc_e, bundle.ent_features) if bundle.n else np.zeros((0, fc_e.out_dim))
    if fc_p is not None:
        sg.sp_features = (mlp_forward(fc_p, bundle.pair_features) if sg.n_sp
                          else np.zeros((0, fc_p.out_dim)))
    return sg


@dataclass
class BridgeSet:
    se_ce: np.ndarray
    sp_cp: np.ndarray


def normalize_score_rows(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("detector scores must be a matrix")
    out = np.empty_like(s)
    tot = s.sum(axis=1)
    zero = tot <= 0
    if np.any(zero):
        log.warning("%d all-zero detector score row(s) set uniform", int(zero.sum()))
    out[~zero] = s[~zero] / tot[~zero, None]
    out[zero] = 1.0 / s.shape[1]
    return out


def init_bridges(scene: SceneGraph, detector_scores, n_pred_classes: int) -> BridgeSet:
    scores = np.asarray(detector_scores, dtype=np.float64)
    if len(scores) != scene.n_se:
        raise ValueError("score rows do not align with scene entity nodes")
    return BridgeSet(normalize_score_rows(scores),
                     np.full((scene.n_sp, n_pred_classes), 1.0 / n_pred_classes))


def save_graph(g: CommonsenseGraph, path, **extra) -> None:
    doc = g.to_json()
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_graph(path) -> tuple[CommonsenseGraph, dict]:
    doc = json.loads(Path(path).read_text())
    return CommonsenseGraph.from_json(doc), doc
