"""The full scene-graph model: parameters, batched forward pass and readout."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape
from .graph import EDGE_TYPES, CommonsenseGraph, DetectionBundle, build_structure, normalize_score_rows, pair_index
from .hierarchy import Hierarchy
from .inference import HierarchicalDistribution, LogChain, greedy_path, log_chain, refine
from .numerics import GruParams, MlpParams, Rng, mlp_apply
from .propagation import (BatchLayout, PropagationConfig, PropagationParams, PropagationState, branch_similarities,
                          build_layout, run_propagation)
from .tape import Var

LOG_FLOOR = float(np.log(1e-12))
MODES = ("predcls", "sgcls")


@dataclass
class ModelConfig:
    dim: int = 1024
    steps: int = 3
    feat_dim: int = 32
    emb_dim: int = 32
    mode: str = "predcls"
    pred_hierarchy: bool = True
    ent_hierarchy: bool = True
    adaptive_refinement: bool = True
    ent_losses: bool = True
    greedy: bool = False
    precision: int = 64
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if min(self.dim, self.feat_dim, self.emb_dim) < 1 or self.steps < 0:
            raise ValueError("dimensions must be positive and steps >= 0")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def projection_params(cfg: ModelConfig) -> dict:
    """Initial embedding projection; the same draw ``init_params`` starts from."""
    rng = Rng(cfg.seed, "params").child("proj")
    d, dt = cfg.dim, cfg.dtype
    return {"proj_w": rng.normal((cfg.emb_dim, d), scale=cfg.init_scale / np.sqrt(cfg.emb_dim)).astype(dt),
            "proj_b": np.zeros(d, dt)}


def init_params(cfg: ModelConfig) -> dict:
    """Flat ``name -> array`` table in a fixed order."""
    rng = Rng(cfg.seed, "params")
    d, dt, s = cfg.dim, cfg.dtype, cfg.init_scale
    p = projection_params(cfg)
    for name, din in (("fc_e", cfg.feat_dim), ("fc_p", cfg.feat_dim)):
        for k, v in MlpParams.init(rng.child(name), (din, d, d, d), dt).items():
            p[f"{name}.{k}"] = v
    for t in EDGE_TYPES:
        p[f"transform.{t}"] = rng.child(f"transform/{t}").normal((d, d), scale=s / np.sqrt(d)).astype(dt)
    for k, v in GruParams.init(rng.child("gru"), d, dt).items():
        p[f"gru.{k}"] = v
    for name in ("sim_ent_scene", "sim_ent_cs", "sim_pred_scene", "sim_pred_cs"):
        for k, v in MlpParams.init(rng.child(name), (d, d, d, d), dt).items():
            p[f"{name}.{k}"] = v
    return p


def _mlp(p: dict, name: str) -> MlpParams:
    return MlpParams(*(p[f"{name}.{k}"] for k in ("w1", "b1", "w2", "b2", "w3", "b3")))


def propagation_params(p: dict) -> PropagationParams:
    gru = GruParams(*(p[f"gru.{k}"] for k in ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")))
    return PropagationParams({t: p[f"transform.{t}"] for t in EDGE_TYPES}, gru,
                             _mlp(p, "sim_ent_scene"), _mlp(p, "sim_ent_cs"),
                             _mlp(p, "sim_pred_scene"), _mlp(p, "sim_pred_cs"))


@dataclass
class HikerModel:
    config: ModelConfig
    entity_classes: list
    predicate_classes: list
    ent_hierarchy: Hierarchy | None       # as supplied, independent of the toggles
    pred_hierarchy: Hierarchy | None
    relation_edges: list
    leaf_embeddings: np.ndarray           # [n_ent + n_pred, emb_dim]
    params: dict
    transition: np.ndarray
    graph: CommonsenseGraph = field(init=False)

    def __post_init__(self):
        c = self.config
        self.graph = build_structure(self.entity_classes, self.predicate_classes,
                                     self.ent_hierarchy if c.ent_hierarchy else None,
                                     self.pred_hierarchy if c.pred_hierarchy else None, self.relation_edges)
        if self.leaf_embeddings.shape != (len(self.entity_classes) + len(self.predicate_classes), c.emb_dim):
            raise ValueError(f"leaf embeddings have shape {self.leaf_embeddings.shape}")

    @classmethod
    def create(cls, config: ModelConfig, entity_classes, predicate_classes, ent_hierarchy, pred_hierarchy,
               relation_edges, leaf_embeddings) -> "HikerModel":
        npred = len(predicate_classes)
        return cls(config, list(entity_classes), list(predicate_classes), ent_hierarchy, pred_hierarchy,
                   list(relation_edges), np.asarray(leaf_embeddings, dtype=np.float64),
                   init_params(config), np.eye(npred))

    @property
    def active_pred_hierarchy(self):
        return self.graph.pred_hierarchy

    @property
    def active_ent_hierarchy(self):
        return self.graph.ent_hierarchy

    @property
    def n_pred(self) -> int:
        return len(self.predicate_classes)

    @property
    def n_ent(self) -> int:
        return len(self.entity_classes)


@dataclass
class Forward:
    layout: BatchLayout
    state: PropagationState
    pred: LogChain
    ent: LogChain


def _concat_rows(arrays, width, dtype) -> np.ndarray:
    arrays = [a for a in arrays if len(a)]
    return np.concatenate(arrays).astype(dtype) if arrays else np.zeros((0, width), dtype)


def forward(model: HikerModel, bundles: list[DetectionBundle], params: dict | None = None) -> Forward:
    """Run propagation and inference for a batch of images as one block graph."""
    c, g = model.config, model.graph
    dt = c.dtype
    p = params if params is not None else model.params
    lay = build_layout(g, [b.n for b in bundles])

    leaf = tape.matmul(model.leaf_embeddings.astype(dt), p["proj_w"]) + p["proj_b"]
    cs = tape.matmul(g.init_map.astype(dt), leaf)
    cs_all = tape.gather(cs, np.tile(np.arange(g.n_nodes), len(bundles)))
    ent_x = _concat_rows([b.ent_features for b in bundles], c.feat_dim, dt)
    pair_x = _concat_rows([b.pair_features for b in bundles], c.feat_dim, dt)
    se = mlp_apply(_mlp(p, "fc_e"), ent_x)
    spx = mlp_apply(_mlp(p, "fc_p"), pair_x)
    x0 = tape.concat([cs_all, se, spx])

    if c.mode == "predcls":
        labels = np.concatenate([b.gt.labels for b in bundles]).astype(np.intp) if bundles else np.zeros(0, int)
        if len(labels) != len(lay.se_img):
            raise ValueError("predicate classification needs one ground-truth label per proposal")
        b_ent = np.eye(model.n_ent, dtype=dt)[labels]
    else:
        b_ent = _concat_rows([normalize_score_rows(b.scores) for b in bundles if b.n], model.n_ent, dt)
    b_pred = np.full((len(lay.sp_img), model.n_pred), 1.0 / model.n_pred, dtype=dt)

    state = PropagationState(x0, tape.as_var(b_ent), tape.as_var(b_pred), 0, lay, propagation_params(p))
    state = run_propagation(state, PropagationConfig(steps=c.steps, dim=c.dim))
    sp_sims = branch_similarities(state, "pred")
    se_sims = branch_similarities(state, "ent")
    pred = log_chain(sp_sims.get("CXP1"), sp_sims.get("CXP2"), sp_sims["CP"], g.pred_hierarchy)
    ent = log_chain(se_sims.get("CXE1"), se_sims.get("CXE2"), se_sims["CE"], g.ent_hierarchy)
    return Forward(lay, state, pred, ent)


def labeled_rows(fwd: Forward, bundles) -> tuple[np.ndarray, np.ndarray]:
    """Global SP row and ground-truth predicate for every annotated triplet in the batch."""
    rows, gts = [], []
    for sl, b in zip(fwd.layout.image_slices("sp"), bundles):
        for s, pr, o in b.gt.triplets:
            rows.append(sl.start + pair_index(b.n, int(s), int(o)))
            gts.append(int(pr))
    return np.array(rows, dtype=np.intp), np.array(gts, dtype=np.intp)


@dataclass
class LossTerms:
    """Summed (not averaged) terms over ``count`` targets."""

    xp1: Var
    xp2: Var
    p: Var
    count: int
    saturated: int


def chain_loss_terms(chain: LogChain, rows, gt, h: Hierarchy | None, t=None) -> LossTerms:
    rows = np.asarray(rows, dtype=np.intp)
    gt = np.asarray(gt, dtype=np.intp)
    zero = tape.Var(np.zeros((), chain.joint.value.dtype))
    if len(rows) == 0:
        return LossTerms(zero, zero, zero, 0, 0)
    sat = 0
    if t is None:
        lj = tape.pick(chain.joint, rows, gt)
        sat += int(np.sum(lj.value < LOG_FLOOR))
        lp = -tape.sum(tape.clamp_min(lj, LOG_FLOOR))
    else:
        refined = tape.matmul(tape.exp(tape.gather(chain.joint, rows)), np.asarray(t, chain.joint.value.dtype))
        pr = tape.pick(refined, np.arange(len(rows)), gt)
        sat += int(np.sum(pr.value < 1e-12))
        lp = -tape.sum(tape.log(pr, floor=1e-12))
    if h is None:
        return LossTerms(zero, zero, lp, len(rows), sat)
    l1 = tape.pick(chain.l1, rows, h.leaf_to_l1[gt])
    l12 = l1 + tape.pick(chain.l2, rows, h.leaf_to_l2[gt])
    sat += int(np.sum(l1.value < LOG_FLOOR) + np.sum(l12.value < LOG_FLOOR))
    return LossTerms(-tape.sum(tape.clamp_min(l1, LOG_FLOOR)), -tape.sum(tape.clamp_min(l12, LOG_FLOOR)),
                     lp, len(rows), sat)


def pred_distribution(model: HikerModel, fwd: Forward, refined: bool = True) -> np.ndarray:
    joint = np.exp(fwd.pred.joint.value.astype(np.float64))
    if model.config.greedy and model.active_pred_hierarchy is not None:
        joint = greedy_path(HierarchicalDistribution.from_chain(fwd.pred, model.active_pred_hierarchy)).joint
    if refined and model.config.adaptive_refinement:
        joint = refine(joint, model.transition)
    return joint


def ent_distribution(model: HikerModel, fwd: Forward) -> np.ndarray:
    joint = np.exp(fwd.ent.joint.value.astype(np.float64))
    if model.config.greedy and model.active_ent_hierarchy is not None:
        joint = greedy_path(HierarchicalDistribution.from_chain(fwd.ent, model.active_ent_hierarchy)).joint
    return joint


def batches(items, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]
