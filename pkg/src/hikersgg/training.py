"""Losses, the optimization loop, transition re-estimation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tape
from .graph import DetectionBundle, RelationEdge
from .hierarchy import ConfusionMatrix, Hierarchy
from .inference import HierarchicalDistribution, build_transition, check_row_stochastic
from .model import (HikerModel, ModelConfig, batches, chain_loss_terms, forward, labeled_rows, pred_distribution)
from .numerics import Rng

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step: int = 10
    alpha: float = 0.9
    loss_weights: tuple = (1.0, 1.0, 1.0)
    optimizer: str = "sgd"
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr < 0 or self.batch_size < 1:
            raise ValueError("lr must be >= 0 and batch_size >= 1")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        return self.lr * self.lr_decay ** (epoch // self.lr_step)

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


class Losses(NamedTuple):
    xp1: np.ndarray
    xp2: np.ndarray
    p: np.ndarray
    saturated: np.ndarray


def compute_losses(dist: HierarchicalDistribution, gt, hierarchy: Hierarchy | None, t=None) -> Losses:
    """Per-row negative log-likelihoods of the level-1 prefix, level-2 prefix and leaf.

    Probabilities are clamped at 1e-12 before the log; ``saturated`` flags rows
    where that happened. With ``t`` the leaf term uses the refined distribution.
    """
    gt = np.atleast_1d(np.asarray(gt, dtype=np.intp))
    joint = np.atleast_2d(dist.joint)
    if t is not None:
        joint = joint @ np.asarray(t)
    rows = np.arange(len(gt))
    pl = joint[rows, gt]
    if hierarchy is None:
        p1 = p12 = np.ones(len(gt))
    else:
        p1 = np.atleast_2d(dist.l1)[rows, hierarchy.leaf_to_l1[gt]]
        p12 = p1 * np.atleast_2d(dist.l2_cond)[rows, hierarchy.leaf_to_l2[gt]]
    probs = np.stack([p1, p12, pl])
    sat = (probs < 1e-12).any(axis=0)
    nll = -np.log(np.maximum(probs, 1e-12))
    return Losses(nll[0], nll[1], nll[2], sat)


def blend_transition(t_new, t_old, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    t_new, t_old = np.asarray(t_new, dtype=np.float64), np.asarray(t_old, dtype=np.float64)
    if t_new.shape != t_old.shape:
        raise ValueError("transition matrices differ in shape")
    check_row_stochastic(t_new)
    check_row_stochastic(t_old)
    return alpha * t_new + (1.0 - alpha) * t_old


@dataclass
class EpochStats:
    epoch: int
    lr: float
    xp1: float
    xp2: float
    p: float
    ent: float
    total: float
    saturated: int
    confusion: list
    transition: list
    wall_time: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    config_hash: str = ""

    def totals(self) -> list[float]:
        return [e.total for e in self.epochs]

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "epochs": [asdict(e) for e in self.epochs]}


class Optimizer:
    """Plain gradient descent or Adam over a flat parameter table."""

    def __init__(self, kind: str, params: dict):
        self.kind = kind
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()} if kind == "adam" else {}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if kind == "adam" else {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        if lr == 0.0:
            return
        self.t += 1
        for k, g in grads.items():
            if self.kind == "sgd":
                params[k] = (params[k] - lr * g).astype(params[k].dtype)
                continue
            b1, b2 = 0.9, 0.999
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.t)
            vh = self.v[k] / (1 - b2 ** self.t)
            params[k] = (params[k] - lr * mh / (np.sqrt(vh) + 1e-8)).astype(params[k].dtype)


def batch_objective(model: HikerModel, bundles, params: dict, weights=(1.0, 1.0, 1.0)):
    """Total loss Var (mean over targets) and the summed loss parts as floats."""
    fwd = forward(model, bundles, params)
    rows, gt = labeled_rows(fwd, bundles)
    t = model.transition if model.config.adaptive_refinement else None
    pt = chain_loss_terms(fwd.pred, rows, gt, model.active_pred_hierarchy, t)
    w1, w2, w3 = weights
    total = w1 * pt.xp1 + w2 * pt.xp2 + w3 * pt.p
    n = max(pt.count, 1)
    parts = {"xp1": float(pt.xp1.value), "xp2": float(pt.xp2.value), "p": float(pt.p.value), "ent": 0.0,
             "count": pt.count, "saturated": pt.saturated}
    if model.config.mode == "sgcls" and model.config.ent_losses:
        labels = np.concatenate([b.gt.labels for b in bundles if b.n]).astype(np.intp)
        et = chain_loss_terms(fwd.ent, np.arange(len(labels)), labels, model.active_ent_hierarchy)
        ent_total = w1 * et.xp1 + w2 * et.xp2 + w3 * et.p
        total = total * (1.0 / n) + ent_total * (1.0 / max(et.count, 1))
        parts["ent"] = float(ent_total.value)
        parts["ent_count"] = et.count
        parts["saturated"] += et.saturated
    else:
        total = total * (1.0 / n)
    return total, parts


def shuffled(n: int, seed: int, epoch: int) -> np.ndarray:
    return Rng(seed, f"shuffle/{epoch}").permutation(n)


def train_epoch(model: HikerModel, dataset: list[DetectionBundle], config: TrainConfig, epoch: int,
                opt: Optimizer) -> dict:
    """One pass in seeded shuffled order; parameters are updated in place."""
    if not dataset:
        raise ValueError("empty training set")
    order = shuffled(len(dataset), config.seed, epoch)
    lr = config.lr_at(epoch)
    sums = {"xp1": 0.0, "xp2": 0.0, "p": 0.0, "ent": 0.0, "total": 0.0}
    count, ent_count, saturated = 0, 0, 0
    for idx in batches(list(order), config.batch_size):
        batch = [dataset[i] for i in idx]
        leaves = {k: tape.leaf(v) for k, v in model.params.items()}
        total, parts = batch_objective(model, batch, leaves, config.loss_weights)
        if parts["count"] == 0 and parts.get("ent_count", 0) == 0:
            continue
        grads = tape.gradients(total, leaves)
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad or not np.isfinite(total.value):
            raise FloatingPointError(f"non-finite gradient in epoch {epoch + 1} for {bad[:5]}")
        opt.step(model.params, grads, lr)
        for k in ("xp1", "xp2", "p"):
            sums[k] += parts[k]
        sums["ent"] += parts["ent"]
        count += parts["count"]
        ent_count += parts.get("ent_count", 0)
        saturated += parts["saturated"]
    w1, w2, w3 = config.loss_weights
    out = {k: sums[k] / max(count, 1) for k in ("xp1", "xp2", "p")}
    out["ent"] = sums["ent"] / max(ent_count, 1)
    out["total"] = w1 * out["xp1"] + w2 * out["xp2"] + w3 * out["p"] + out["ent"]
    out["saturated"] = saturated
    out["lr"] = lr
    return out


def pair_predictions(model: HikerModel, dataset, refined: bool = True, batch_size: int = 16):
    """Predicted and true predicate for every annotated triplet, in dataset order."""
    pred, true = [], []
    for batch in batches(list(dataset), batch_size):
        fwd = forward(model, batch)
        rows, gt = labeled_rows(fwd, batch)
        if len(rows):
            pred.append(np.argmax(pred_distribution(model, fwd, refined)[rows], axis=1))
            true.append(gt)
    if not pred:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(pred), np.concatenate(true)


def reevaluate_confusion(model: HikerModel, train_dataset, batch_size: int = 16) -> ConfusionMatrix:
    """Row-normalized counts of (true, predicted) predicate pairs, using the unrefined argmax."""
    if not train_dataset:
        raise ValueError("empty dataset")
    pred, true = pair_predictions(model, train_dataset, refined=False, batch_size=batch_size)
    return confusion_from_pairs(true, pred, model.n_pred, model.predicate_classes)


def confusion_from_pairs(true, pred, n: int, labels=None) -> ConfusionMatrix:
    counts = np.zeros((n, n))
    np.add.at(counts, (np.asarray(true, dtype=np.intp), np.asarray(pred, dtype=np.intp)), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    r = np.where(tot > 0, counts / np.maximum(tot, 1), np.eye(n))
    return ConfusionMatrix(list(labels) if labels is not None else [str(i) for i in range(n)], r)


def leaf_accuracy(model: HikerModel, dataset, batch_size: int = 16) -> float:
    pred, true = pair_predictions(model, dataset, refined=True, batch_size=batch_size)
    if len(true) == 0:
        raise ValueError("no annotated triplets")
    return float(np.mean(pred == true))


def train(model: HikerModel, dataset, config: TrainConfig, on_epoch=None) -> TrainReport:
    report = TrainReport(config_hash=run_hash(model.config, config))
    opt = Optimizer(config.optimizer, model.params)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        stats = train_epoch(model, dataset, config, epoch, opt)
        r = reevaluate_confusion(model, dataset, config.batch_size)
        if model.config.adaptive_refinement:
            # the blend only takes effect from the next epoch on
            model.transition = blend_transition(build_transition(r), model.transition, config.alpha)
        report.epochs.append(EpochStats(epoch + 1, stats["lr"], stats["xp1"], stats["xp2"], stats["p"],
                                        stats["ent"], stats["total"], stats["saturated"], r.matrix.tolist(),
                                        model.transition.tolist(), time.perf_counter() - t0))
        log.info("epoch %d total %.4f", epoch + 1, stats["total"])
        if on_epoch is not None:
            on_epoch(report.epochs[-1])
    return report


def run_hash(model_config: ModelConfig, train_config: TrainConfig | None = None) -> str:
    doc = {"model": model_config.to_json(), "train": train_config.to_json() if train_config else None}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# checkpoint layout: magic, u32 block count, then per block: u16 name length, name,
# u8 bytes per value (4 or 8), u8 ndim, u32 dims, raw little-endian values; then a
# canonical JSON trailer and its u64 length. Parameters use the model precision,
# the transition matrix and embeddings are always 8-byte.
MAGIC = b"HIKR1"


def _blocks(model: HikerModel) -> list[tuple[str, np.ndarray, np.dtype]]:
    pdt = np.dtype("<f8") if model.config.precision == 64 else np.dtype("<f4")
    out = [(k, v, pdt) for k, v in model.params.items()]
    out.append(("transition", model.transition, np.dtype("<f8")))
    out.append(("leaf_embeddings", model.leaf_embeddings, np.dtype("<f8")))
    return out


def save_checkpoint(model: HikerModel, path, extra: dict | None = None) -> None:
    blocks = _blocks(model)
    body = bytearray()
    body += MAGIC + struct.pack("<I", len(blocks))
    digest = hashlib.sha256()
    for name, arr, dt in blocks:
        a = np.ascontiguousarray(arr, dtype=dt)
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", dt.itemsize, a.ndim)
        body += struct.pack(f"<{a.ndim}I", *a.shape)
        raw = a.tobytes()
        digest.update(raw)
        body += raw
    trailer = {
        "config": model.config.to_json(),
        "config_hash": model.config.digest(),
        "param_sha256": digest.hexdigest(),
        "entity_classes": model.entity_classes,
        "predicate_classes": model.predicate_classes,
        "ent_hierarchy": model.ent_hierarchy.to_json() if model.ent_hierarchy else None,
        "pred_hierarchy": model.pred_hierarchy.to_json() if model.pred_hierarchy else None,
        "ent_hierarchy_sha256": model.ent_hierarchy.digest() if model.ent_hierarchy else None,
        "pred_hierarchy_sha256": model.pred_hierarchy.digest() if model.pred_hierarchy else None,
        "relation_edges": [[e.src_kind, e.src, e.dst_kind, e.dst, e.label] for e in model.relation_edges],
        "extra": extra or {},
    }
    tb = json.dumps(trailer, sort_keys=True).encode()
    body += tb + struct.pack("<Q", len(tb))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path, expected_feat_dim: int | None = None) -> HikerModel:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (tlen,) = struct.unpack("<Q", data[-8:])
    trailer = json.loads(data[-8 - tlen:-8])
    (nblocks,) = struct.unpack("<I", data[5:9])
    pos, blocks = 9, {}
    digest = hashlib.sha256()
    for _ in range(nblocks):
        (nlen,) = struct.unpack("<H", data[pos:pos + 2])
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        itemsize, ndim = struct.unpack("<BB", data[pos:pos + 2])
        dt = np.dtype("<f8") if itemsize == 8 else np.dtype("<f4")
        shape = struct.unpack(f"<{ndim}I", data[pos + 2:pos + 2 + 4 * ndim])
        pos += 2 + 4 * ndim
        size = int(np.prod(shape)) * itemsize
        raw = data[pos:pos + size]
        digest.update(raw)
        blocks[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        pos += size
    if digest.hexdigest() != trailer["param_sha256"]:
        raise ValueError(f"{path}: parameter hash mismatch")
    cfg = ModelConfig(**trailer["config"])
    if cfg.digest() != trailer["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    if expected_feat_dim is not None and expected_feat_dim != cfg.feat_dim:
        raise ValueError(f"{path}: checkpoint expects feature dim {cfg.feat_dim}, got {expected_feat_dim}")
    hier = {}
    for key in ("ent_hierarchy", "pred_hierarchy"):
        doc = trailer[key]
        hier[key] = Hierarchy.from_json(doc) if doc else None
        if hier[key] is not None and hier[key].digest() != trailer[f"{key}_sha256"]:
            raise ValueError(f"{path}: {key} hash mismatch")
    edges = [RelationEdge(*e) for e in trailer["relation_edges"]]
    native = cfg.dtype
    params = {k: v.astype(native) for k, v in blocks.items() if k not in ("transition", "leaf_embeddings")}
    m = HikerModel(cfg, trailer["entity_classes"], trailer["predicate_classes"], hier["ent_hierarchy"],
                   hier["pred_hierarchy"], edges, blocks["leaf_embeddings"].astype(np.float64), params,
                   blocks["transition"].astype(np.float64))
    return m


def checkpoint_extra(path) -> dict:
    data = Path(path).read_bytes()
    (tlen,) = struct.unpack("<Q", data[-8:])
    return json.loads(data[-8 - tlen:-8])
