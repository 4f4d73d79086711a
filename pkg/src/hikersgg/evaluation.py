"""Triplet matching, mean recall at k, multi-hop recall and report emitters."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import DetectionBundle, GroundTruth, ordered_pairs
from .hierarchy import Hierarchy
from .model import HikerModel, batches, ent_distribution, forward, pred_distribution

log = logging.getLogger(__name__)

KS = (20, 50, 100)
HOPS = (1, 2, 3)


def iou(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        log.warning("degenerate box in IoU")
        return 0.0
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(w, 0.0) * max(h, 0.0)
    return float(inter / (area_a + area_b - inter))


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between box sets ``a`` [n, 4] and ``b`` [m, 4]; degenerate boxes give 0."""
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    ok = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    return np.where(ok, inter / np.where(ok, union, 1.0), 0.0)


@dataclass
class ImagePredictions:
    """Ranked triplets for one image (descending score)."""

    subj: np.ndarray
    obj: np.ndarray
    pred: np.ndarray
    score: np.ndarray
    subj_cls: np.ndarray
    obj_cls: np.ndarray
    subj_box: np.ndarray
    obj_box: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        for name in ("subj", "obj", "pred", "subj_cls", "obj_cls"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).ravel())
        self.score = np.asarray(self.score, dtype=np.float64).ravel()
        self.subj_box = np.asarray(self.subj_box, dtype=np.float64).reshape(-1, 4)
        self.obj_box = np.asarray(self.obj_box, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.score)):
            raise ValueError("non-finite triplet score")
        if np.any(np.diff(self.score) > 0):
            raise ValueError("triplets must be sorted by descending score")

    def __len__(self):
        return len(self.score)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "triplets": [
            {"subject": int(s), "object": int(o), "predicate": int(p), "score": float(sc),
             "subject_class": int(sc_), "object_class": int(oc),
             "subject_box": sb.tolist(), "object_box": ob.tolist()}
            for s, o, p, sc, sc_, oc, sb, ob in zip(self.subj, self.obj, self.pred, self.score, self.subj_cls,
                                                    self.obj_cls, self.subj_box, self.obj_box)]}

    @classmethod
    def from_json(cls, doc: dict) -> "ImagePredictions":
        t = doc["triplets"]
        col = lambda k: [x[k] for x in t]  # noqa: E731
        return cls(col("subject"), col("object"), col("predicate"), col("score"), col("subject_class"),
                   col("object_class"), col("subject_box"), col("object_box"), str(doc.get("image_id", "")))


def save_predictions(preds, path, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            doc = p.to_json()
            doc["config_hash"] = config_hash
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def load_predictions(path) -> list[ImagePredictions]:
    with open(path, encoding="utf-8") as fh:
        return [ImagePredictions.from_json(json.loads(line)) for line in fh if line.strip()]


def rank_image(pred_probs, boxes, ent_cls, ent_score, max_triplets: int = 100, image_id: str = ""):
    """Rank every (pair, predicate) candidate of one image by
    ``P(predicate) * score(subject) * score(object)``.

    Keeps the top ``max_triplets`` plus the best candidate of every pair, so the
    graph-constrained ranking is never truncated.
    """
    n = len(boxes)
    pairs = ordered_pairs(n)
    c = pred_probs.shape[1] if pred_probs.ndim == 2 else 0
    if len(pairs) == 0:
        e = np.zeros(0)
        return ImagePredictions(e, e, e, e, e, e, np.zeros((0, 4)), np.zeros((0, 4)), image_id)
    s, o = pairs[:, 0], pairs[:, 1]
    score = pred_probs * (ent_score[s] * ent_score[o])[:, None]
    flat = score.ravel()
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(len(flat), dtype=bool)
    keep[order[:max_triplets]] = True
    keep[np.arange(len(pairs)) * c + np.argmax(score, axis=1)] = True
    order = order[keep[order]]
    k, p = order // c, order % c
    return ImagePredictions(s[k], o[k], p, flat[order], ent_cls[s[k]], ent_cls[o[k]], boxes[s[k]], boxes[o[k]],
                            image_id)


def predict(model: HikerModel, bundles, batch_size: int = 16, max_triplets: int = 100) -> list[ImagePredictions]:
    out = []
    for batch in batches(list(bundles), batch_size):
        fwd = forward(model, batch)
        pp = pred_distribution(model, fwd)
        ep = ent_distribution(model, fwd) if model.config.mode == "sgcls" else None
        for b, ssl, esl in zip(batch, fwd.layout.image_slices("sp"), fwd.layout.image_slices("se")):
            if ep is None:
                cls, sc = b.gt.labels, np.ones(b.n)
            else:
                cls, sc = np.argmax(ep[esl], axis=1), np.max(ep[esl], axis=1)
            out.append(rank_image(pp[ssl], b.boxes, cls, sc, max_triplets, b.image_id))
    return out


def eligible(p: ImagePredictions, k: int, constrained: bool) -> np.ndarray:
    """Indices of the top-k eligible predictions; under the graph constraint only the
    first (highest-ranked) prediction of each ordered pair is eligible."""
    idx = np.arange(len(p))
    if constrained and len(p):
        key = p.subj * (max(p.subj.max(), p.obj.max()) + 1) + p.obj
        _, first = np.unique(key, return_index=True)
        idx = np.sort(first)
    return idx[:k]


def match_triplets(p: ImagePredictions, gt: GroundTruth, k: int, constrained: bool, iou_thresh: float = 0.5,
                   label_map=None) -> np.ndarray:
    """Boolean per ground-truth triplet: matched by some eligible top-k prediction.

    ``label_map`` maps leaf predicates to the level used for comparison (multi-hop).
    """
    m = len(gt.triplets)
    if m == 0 or len(p) == 0:
        return np.zeros(m, dtype=bool)
    idx = eligible(p, k, constrained)
    lm = (lambda x: x) if label_map is None else (lambda x: np.asarray(label_map)[x])
    gs, gp, go = gt.triplets[:, 0], gt.triplets[:, 1], gt.triplets[:, 2]
    same_pred = lm(p.pred[idx])[:, None] == lm(gp)[None, :]
    same_cls = (p.subj_cls[idx][:, None] == gt.labels[gs][None, :]) & (p.obj_cls[idx][:, None] == gt.labels[go][None, :])
    box_ok = (iou_matrix(p.subj_box[idx], gt.boxes[gs]) >= iou_thresh) & \
             (iou_matrix(p.obj_box[idx], gt.boxes[go]) >= iou_thresh)
    return np.any(same_pred & same_cls & box_ok, axis=0)


def per_class_recall(preds, gts, k: int, constrained: bool, n_classes: int, label_map=None):
    """Hits and totals per leaf predicate class, pooled over images."""
    hits, total = np.zeros(n_classes), np.zeros(n_classes)
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth image lists differ in length")
    for p, g in zip(preds, gts):
        if len(g.triplets) == 0:
            continue
        ok = match_triplets(p, g, k, constrained, label_map=label_map)
        np.add.at(total, g.triplets[:, 1], 1.0)
        np.add.at(hits, g.triplets[:, 1], ok.astype(float))
    return hits, total


def mean_recall_at_k(preds, gts, k: int, constrained: bool, n_classes: int | None = None, label_map=None) -> float:
    """Percent recall per predicate class, averaged over classes that have ground truth."""
    gts = [g.gt if isinstance(g, DetectionBundle) else g for g in gts]
    if n_classes is None:
        n_classes = 1 + max([int(g.triplets[:, 1].max()) for g in gts if len(g.triplets)], default=-1)
    hits, total = per_class_recall(preds, gts, k, constrained, n_classes, label_map)
    present = total > 0
    if not present.any():
        raise ValueError("no ground-truth triplets")
    return float(100.0 * np.mean(hits[present] / total[present]))


def hop_map(h: Hierarchy | None, hop: int, n_classes: int) -> np.ndarray | None:
    if hop not in HOPS:
        raise ValueError(f"hop must be one of {HOPS}")
    if hop == 3:
        return None
    if h is None:
        raise ValueError("multi-hop recall needs a predicate hierarchy")
    if h.n_leaves != n_classes:
        raise ValueError("hierarchy does not cover the predicate classes")
    return h.leaf_to_l2 if hop == 2 else h.leaf_to_l1


def multi_hop_recall(preds, gts, hierarchy: Hierarchy, hop: int, k: int, constrained: bool = True) -> float:
    """mR@k with the predicate match relaxed to the level-2 (hop 2) or level-1 (hop 1) parent."""
    return mean_recall_at_k(preds, gts, k, constrained, hierarchy.n_leaves,
                            hop_map(hierarchy, hop, hierarchy.n_leaves))


@dataclass
class MetricsReport:
    mode: str
    classes: list
    per_class: dict            # "C"/"UC" -> {class: {k: recall%}}
    mean_recall: dict          # "C"/"UC" -> {k: mR%}
    multi_hop: dict            # hop -> {k: mR%} (constrained)
    counts: dict
    label: str = "clean"
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self), sort_keys=True))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))

    def to_csv(self, regime: str = "C") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class"] + [f"recall@{k}" for k in KS])
        for name in self.classes:
            row = self.per_class[regime].get(name)
            if row is not None:
                w.writerow([name] + [f"{row[str(k)]:.4f}" for k in KS])
        return buf.getvalue()

    def metric(self, name: str) -> float:
        """``mR@50 C`` style lookup."""
        k, regime = name.split()
        return self.mean_recall[regime][k.split("@")[1]]


def evaluate(preds, bundles, pred_classes, hierarchy: Hierarchy | None = None, mode: str = "predcls",
             label: str = "clean", config_hash: str = "") -> MetricsReport:
    gts = [b.gt if isinstance(b, DetectionBundle) else b for b in bundles]
    n = len(pred_classes)
    per_class, mean = {}, {}
    present = None
    for regime, constrained in (("C", True), ("UC", False)):
        per_class[regime], mean[regime] = {}, {}
        for k in KS:
            hits, total = per_class_recall(preds, gts, k, constrained, n)
            present = total > 0
            if not present.any():
                raise ValueError("no ground-truth triplets")
            rec = 100.0 * hits / np.maximum(total, 1)
            mean[regime][str(k)] = float(rec[present].mean())
            for c in np.flatnonzero(present):
                per_class[regime].setdefault(pred_classes[c], {})[str(k)] = float(rec[c])
        vals = [mean[regime][str(k)] for k in KS]
        if not (vals[0] <= vals[1] + 1e-9 and vals[1] <= vals[2] + 1e-9):
            raise RuntimeError(f"mean recall is not monotone in k: {vals}")
    hops = {}
    if hierarchy is not None:
        for hop in HOPS:
            hops[str(hop)] = {str(k): multi_hop_recall(preds, gts, hierarchy, hop, k) for k in KS}
        for k in KS:
            v = [hops[str(h)][str(k)] for h in HOPS]
            if not (v[0] + 1e-9 >= v[1] and v[1] + 1e-9 >= v[2]):
                raise RuntimeError(f"multi-hop recall is not nested: {v}")
    totals = np.zeros(n)
    for g in gts:
        np.add.at(totals, g.triplets[:, 1], 1)
    counts = {"images": len(gts), "triplets": int(totals.sum()),
              "per_class": {pred_classes[c]: int(totals[c]) for c in range(n)}}
    return MetricsReport(mode, list(pred_classes), per_class, mean, hops, counts, label, config_hash)


TABLE_METRICS = tuple(f"mR@{k} {r}" for k in KS for r in ("UC", "C"))


def corruption_table(reports: dict) -> list[list[str]]:
    """Rows are metrics, columns are corruption labels (first column = metric name)."""
    labels = list(reports)
    rows = [["metric"] + labels]
    for m in TABLE_METRICS:
        rows.append([m] + [f"{reports[lab].metric(m):.2f}" for lab in labels])
    return rows


def table_csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def relative_degradation(clean: float, noisy: float) -> float:
    """Percent drop from ``clean`` to ``noisy``."""
    if clean <= 0:
        raise ValueError("clean metric must be positive")
    return 100.0 * (clean - noisy) / clean
