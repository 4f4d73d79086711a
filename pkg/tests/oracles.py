"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except for plain data containers.
"""

from __future__ import annotations

import itertools

import numpy as np

from hikersgg.evaluation import ImagePredictions
from hikersgg.graph import DetectionBundle, GroundTruth, RelationEdge
from hikersgg.hierarchy import Hierarchy
from hikersgg.model import HikerModel, ModelConfig
from hikersgg.numerics import Rng


# ---------------------------------------------------------------- clustering

def brute_agglomerate(s):
    """Average linkage recomputed from leaf similarities at every step.

    Returns ``[(a, b, sim, new_id)]``. Ties go to the lowest (a, b) id pair.
    """
    s = np.asarray(s, dtype=float)
    n = len(s)
    clusters = {i: [i] for i in range(n)}
    merges = []
    for new in range(n, 2 * n - 1):
        best = None
        for a, b in itertools.combinations(sorted(clusters), 2):
            sim = sum(s[i, j] for i in clusters[a] for j in clusters[b]) / (len(clusters[a]) * len(clusters[b]))
            if best is None or sim > best[2] + 1e-12:
                best = (a, b, sim)
        a, b, sim = best
        merges.append((a, b, sim, new))
        clusters[new] = clusters.pop(a) + clusters.pop(b)
    return merges


def brute_clusters(s, n_clusters):
    """Leaf sets after merging down to ``n_clusters`` clusters, sorted by smallest leaf."""
    n = len(s)
    clusters = {i: [i] for i in range(n)}
    for a, b, _, new in brute_agglomerate(s)[:n - n_clusters]:
        clusters[new] = sorted(clusters.pop(a) + clusters.pop(b))
    return sorted(clusters.values(), key=lambda c: c[0])


# ---------------------------------------------------------------- matching

def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: max(0.0, r[2] - r[0]) * max(0.0, r[3] - r[1])  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def brute_match(p: ImagePredictions, gt: GroundTruth, k, constrained, label_map=None, thresh=0.5):
    """Walk predictions in rank order; a gt triplet is hit if any eligible one matches."""
    lm = (lambda c: c) if label_map is None else (lambda c: int(label_map[c]))
    eligible, seen = [], set()
    for i in range(len(p)):
        pair = (int(p.subj[i]), int(p.obj[i]))
        if constrained and pair in seen:
            continue
        seen.add(pair)
        eligible.append(i)
    eligible = eligible[:k]
    hits = []
    for s, pr, o in gt.triplets:
        ok = False
        for i in eligible:
            if (lm(int(p.pred[i])) == lm(int(pr)) and p.subj_cls[i] == gt.labels[s] and p.obj_cls[i] == gt.labels[o]
                    and box_iou(p.subj_box[i], gt.boxes[s]) >= thresh and box_iou(p.obj_box[i], gt.boxes[o]) >= thresh):
                ok = True
                break
        hits.append(ok)
    return np.array(hits, dtype=bool)


def brute_mean_recall(preds, gts, k, constrained, n_classes, label_map=None):
    hits = [0] * n_classes
    total = [0] * n_classes
    for p, g in zip(preds, gts):
        for (s, pr, o), ok in zip(g.triplets, brute_match(p, g, k, constrained, label_map)):
            total[pr] += 1
            hits[pr] += int(ok)
    vals = [100.0 * h / t for h, t in zip(hits, total) if t]
    return sum(vals) / len(vals)


def random_scene(rng: np.random.Generator, n_obj=4, n_pred=3, n_ent=3, n_preds=12):
    """Tiny scene with jittered prediction boxes so IoU decisions vary."""
    xy = rng.uniform(0, 0.6, size=(n_obj, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(0.1, 0.4, size=(n_obj, 2))], axis=1)
    labels = rng.integers(0, n_ent, n_obj)
    pairs = [(s, o) for s in range(n_obj) for o in range(n_obj) if s != o]
    m = int(rng.integers(1, 5))
    trip = [(*pairs[i], int(rng.integers(0, n_pred))) for i in rng.choice(len(pairs), size=min(m, len(pairs)),
                                                                         replace=False)]
    gt = GroundTruth(labels, boxes, np.array([[s, p, o] for s, o, p in trip]).reshape(-1, 3))
    rows = []
    for _ in range(n_preds):
        s, o = pairs[int(rng.integers(0, len(pairs)))]
        jitter = lambda b: b + rng.normal(0, 0.08, 4) * (rng.uniform() < 0.5)  # noqa: E731
        cls = lambda i: labels[i] if rng.uniform() < 0.8 else int(rng.integers(0, n_ent))  # noqa: E731
        rows.append((s, o, int(rng.integers(0, n_pred)), float(rng.uniform()), cls(s), cls(o),
                     jitter(boxes[s]), jitter(boxes[o])))
    rows.sort(key=lambda r: -r[3])
    col = lambda i: np.array([r[i] for r in rows])  # noqa: E731
    p = ImagePredictions(col(0), col(1), col(2), col(3), col(4), col(5), col(6), col(7), "scene")
    return p, gt


# ---------------------------------------------------------------- toy model

TOY_ENTS = ["a", "b", "c", "d"]
TOY_PREDS = ["p", "q", "r", "s"]


def toy_model(mode="sgcls", steps=2, seed=1, dim=4, **cfg) -> HikerModel:
    r = Rng(seed, "toy")
    eh = Hierarchy("entity", [0, 0, 1, 1], [0, 0], TOY_ENTS)
    ph = Hierarchy("predicate", [0, 0, 1, 2], [0, 0, 1], TOY_PREDS)
    edges = [RelationEdge("CE", 0, "CP", 1, "x"), RelationEdge("CP", 2, "CE", 3, "y"),
             RelationEdge("CE", 1, "CE", 2, "z")]
    c = ModelConfig(dim=dim, steps=steps, feat_dim=3, emb_dim=3, mode=mode, seed=seed, **cfg)
    m = HikerModel.create(c, TOY_ENTS, TOY_PREDS, eh, ph, edges, r.normal((8, 3)))
    m.transition = np.array([[.7, .1, .1, .1], [.2, .6, .1, .1], [0, 0, 1, 0], [.1, .1, .1, .7]])
    return m


def toy_bundle(seed=1, n=3, triplets=None) -> DetectionBundle:
    """Three objects and two annotated relations by default."""
    if triplets is None:
        triplets = ((0, 1, 1), (2, 3, 0)) if n >= 3 else ((0, 1, 1),)
    r = Rng(seed, "toy-bundle")
    xy = r.uniform(0, 0.5, size=(n, 2))
    boxes = np.concatenate([xy, xy + 0.4], axis=1)
    sc = r.uniform(size=(n, 4))
    sc /= sc.sum(axis=1, keepdims=True)
    labels = r.integers(0, 4, size=n)
    return DetectionBundle(boxes, sc, r.normal((n, 3)), r.normal((n * (n - 1), 3)),
                           GroundTruth(labels, boxes, np.array(triplets).reshape(-1, 3)), f"toy{seed}")


def flatten(params: dict):
    keys = list(params)
    shapes = [params[k].shape for k in keys]
    x = np.concatenate([params[k].ravel() for k in keys])

    def unflat(v):
        out, o = {}, 0
        for k, s in zip(keys, shapes):
            n = int(np.prod(s))
            out[k] = v[o:o + n].reshape(s)
            o += n
        return out

    return x, unflat
