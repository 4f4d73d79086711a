"""Synthetic desk-scale datasets with a known class hierarchy.

Class prototypes are built from orthonormal directions, one per level-1
group, level-2 group and leaf: ``proto = sep * (a*e_l1 + b*e_l2 + c*e_leaf)``
with ``a > b > c``, so superclasses stay separable at noise levels that already
confuse siblings. Word embeddings use the same recipe in independent directions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import DetectionBundle, GroundTruth, RelationEdge, ordered_pairs, save_bundles, save_relation_edges
from .hierarchy import ConfusionMatrix, EmbeddingTable, Hierarchy
from .numerics import Rng, softmax

LEVEL_WEIGHTS = (1.0, 0.75, 0.5)


@dataclass
class SyntheticSpec:
    n_images: int = 200
    n_test: int = 50
    min_objects: int = 2
    max_objects: int = 5
    n_entities: int = 12
    n_predicates: int = 8
    ent_groups: tuple = (4, 2)
    pred_groups: tuple = (4, 2)
    dim: int = 32
    emb_dim: int = 32
    separation: float = 1.0
    noise: float = 0.15
    surrogate_noise: float = 0.0
    relation_prob: float = 0.5
    preferred_prob: float = 0.7
    seed: int = 0

    def __post_init__(self):
        self.ent_groups = tuple(int(g) for g in self.ent_groups)
        self.pred_groups = tuple(int(g) for g in self.pred_groups)
        for n, (g2, g1) in ((self.n_entities, self.ent_groups), (self.n_predicates, self.pred_groups)):
            if not n >= g2 >= g1 >= 1:
                raise ValueError("class counts must be >= level-2 groups >= level-1 groups >= 1")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.n_images < 0 or self.n_test < 0 or not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid image or object counts")
        if min(self.noise, self.surrogate_noise) < 0:
            raise ValueError("noise scales must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["ent_groups"], d["pred_groups"] = list(self.ent_groups), list(self.pred_groups)
        return d


def block_hierarchy(target: str, n: int, n_l2: int, n_l1: int, names=None) -> Hierarchy:
    """Contiguous blocks: leaf i under group ``i * n_l2 // n``."""
    leaf_to_l2 = np.arange(n) * n_l2 // n
    l2_to_l1 = np.arange(n_l2) * n_l1 // n_l2
    return Hierarchy(target, leaf_to_l2, l2_to_l1, names)


def collapsed(h: Hierarchy) -> Hierarchy:
    """Same level-1 grouping with level 2 merged into it (level-2 map is the identity)."""
    return Hierarchy(h.target, h.leaf_to_l1, np.arange(h.n_l1), h.leaf_names)


def _directions(rng: Rng, dim: int, k: int) -> np.ndarray:
    a = rng.normal((dim, k))
    if k <= dim:
        q, r = np.linalg.qr(a)
        return (q * np.sign(np.diag(r))).T
    return (a / np.linalg.norm(a, axis=0)).T


def prototypes(rng: Rng, h: Hierarchy, dim: int, sep: float) -> np.ndarray:
    e = _directions(rng, dim, h.n_l1 + h.n_l2 + h.n_leaves)
    e1, e2, el = e[:h.n_l1], e[h.n_l1:h.n_l1 + h.n_l2], e[h.n_l1 + h.n_l2:]
    a, b, c = LEVEL_WEIGHTS
    return sep * (a * e1[h.leaf_to_l1] + b * e2[h.leaf_to_l2] + c * el)


def nearest_confusion(rng: Rng, protos: np.ndarray, noise: float, labels, samples: int = 200) -> ConfusionMatrix:
    n, d = protos.shape
    r = np.zeros((n, n))
    for i in range(n):
        x = protos[i] + rng.normal((samples, d), scale=noise)
        pred = np.argmin(((x[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
        r[i] = np.bincount(pred, minlength=n) / samples
    return ConfusionMatrix(list(labels), r)


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    entity_classes: list
    predicate_classes: list
    ent_hierarchy: Hierarchy
    pred_hierarchy: Hierarchy
    ent_protos: np.ndarray
    pred_protos: np.ndarray
    embeddings: EmbeddingTable
    relation_edges: list
    preferred: np.ndarray
    ent_confusion: ConfusionMatrix
    pred_confusion: ConfusionMatrix
    train: list
    test: list

    def leaf_embeddings(self) -> np.ndarray:
        return self.embeddings.lookup(self.entity_classes + self.predicate_classes)


def _image(rng: Rng, data_parts, spec: SyntheticSpec, image_id: str) -> DetectionBundle:
    ent_protos, pred_protos, preferred = data_parts
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    labels = rng.integers(0, spec.n_entities, size=n)
    xy = rng.uniform(0.0, 0.7, size=(n, 2))
    wh = rng.uniform(0.1, 0.3, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    ent_feats = ent_protos[labels] + rng.normal((n, spec.dim), scale=spec.noise)
    d2 = ((ent_feats[:, None, :] - ent_protos[None]) ** 2).sum(-1)
    scores = np.stack([softmax(-row / spec.separation ** 2) for row in d2]) if n else np.zeros((0, spec.n_entities))
    pairs = ordered_pairs(n)
    pair_feats = rng.normal((len(pairs), spec.dim), scale=spec.noise)
    triplets = []
    labeled = rng.uniform(size=len(pairs)) < spec.relation_prob
    if len(pairs) and not labeled.any():
        labeled[int(rng.integers(0, len(pairs)))] = True
    for k, (s, o) in enumerate(pairs):
        if not labeled[k]:
            continue
        if rng.uniform() < spec.preferred_prob:
            p = int(preferred[labels[s]][int(rng.integers(0, preferred.shape[1]))])
        else:
            p = int(rng.integers(0, spec.n_predicates))
        pair_feats[k] += pred_protos[p]
        triplets.append((int(s), p, int(o)))
    gt = GroundTruth(labels.astype(np.int64), boxes.copy(), np.array(triplets, dtype=np.int64).reshape(-1, 3))
    return DetectionBundle(boxes, scores, ent_feats, pair_feats, gt, image_id)


def generate(spec: SyntheticSpec) -> SyntheticData:
    root = Rng(spec.seed, "synth")
    ents = [f"ent{i:02d}" for i in range(spec.n_entities)]
    preds = [f"pred{i:02d}" for i in range(spec.n_predicates)]
    eh = block_hierarchy("entity", spec.n_entities, *spec.ent_groups, ents)
    ph = block_hierarchy("predicate", spec.n_predicates, *spec.pred_groups, preds)
    ent_protos = prototypes(root.child("ent-protos"), eh, spec.dim, spec.separation)
    pred_protos = prototypes(root.child("pred-protos"), ph, spec.dim, spec.separation)
    emb = np.concatenate([prototypes(root.child("ent-emb"), eh, spec.emb_dim, 1.0),
                          prototypes(root.child("pred-emb"), ph, spec.emb_dim, 1.0)])
    emb = emb + root.child("emb-noise").normal(emb.shape, scale=0.05)
    table = EmbeddingTable(ents + preds, emb)

    n_pref = min(2, spec.n_predicates)
    pref_rng = root.child("preferred")
    preferred = np.stack([pref_rng.permutation(spec.n_predicates)[:n_pref] for _ in range(spec.n_entities)])
    edges = []
    for e in range(spec.n_entities):
        for p in preferred[e]:
            edges.append(RelationEdge("CE", e, "CP", int(p), "prefers"))
            edges.append(RelationEdge("CP", int(p), "CE", e, "preferred_by"))
    for kind, h in (("CE", eh), ("CP", ph)):
        for i in range(h.n_leaves):
            for j in range(h.n_leaves):
                if i != j and h.leaf_to_l2[i] == h.leaf_to_l2[j]:
                    edges.append(RelationEdge(kind, i, kind, j, "sibling"))

    conf_noise = max(spec.noise, 0.3 * spec.separation)
    ec = nearest_confusion(root.child("ent-conf"), ent_protos, conf_noise, ents)
    pc = nearest_confusion(root.child("pred-conf"), pred_protos, conf_noise, preds)
    parts = (ent_protos, pred_protos, preferred)
    train = [_image(root.child(f"train/{i}"), parts, spec, f"train{i:05d}") for i in range(spec.n_images)]
    test = [_image(root.child(f"test/{i}"), parts, spec, f"test{i:05d}") for i in range(spec.n_test)]
    if spec.surrogate_noise > 0:
        test = add_feature_noise(test, spec.surrogate_noise * spec.separation, spec.seed)
    return SyntheticData(spec, ents, preds, eh, ph, ent_protos, pred_protos, table, edges, preferred,
                         ec, pc, train, test)


def add_feature_noise(bundles, sigma: float, seed: int) -> list[DetectionBundle]:
    """Seeded Gaussian noise on entity and pair features; ``sigma = 0`` returns exact copies."""
    out = []
    for i, b in enumerate(bundles):
        rng = Rng(seed, f"feature-noise/{i}/{b.image_id}")
        ef, pf = b.ent_features.copy(), b.pair_features.copy()
        if sigma > 0:
            ef = ef + rng.normal(ef.shape, scale=sigma)
            pf = pf + rng.normal(pf.shape, scale=sigma)
        out.append(DetectionBundle(b.boxes.copy(), b.scores.copy(), ef, pf, b.gt, b.image_id))
    return out


def write_dataset(data: SyntheticData, out_dir, config_hash: str = "") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    def put(name, doc):
        (out / name).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        files[name] = str(out / name)

    put("spec.json", {"spec": data.spec.to_json(), "config_hash": config_hash})
    put("classes.json", {"entities": data.entity_classes, "predicates": data.predicate_classes})
    data.embeddings.save(out / "embeddings.txt")
    save_relation_edges(data.relation_edges, out / "relations.json")
    put("ent_hierarchy.json", data.ent_hierarchy.to_json())
    put("pred_hierarchy.json", data.pred_hierarchy.to_json())
    put("ent_hierarchy.manual.json", collapsed(data.ent_hierarchy).to_json())
    put("pred_hierarchy.manual.json", collapsed(data.pred_hierarchy).to_json())
    put("ent_confusion.json", data.ent_confusion.to_json())
    put("pred_confusion.json", data.pred_confusion.to_json())
    save_bundles(data.train, out / "train.jsonl")
    save_bundles(data.test, out / "test.jsonl")
    for name in ("embeddings.txt", "relations.json", "train.jsonl", "test.jsonl"):
        files[name] = str(out / name)
    return files
