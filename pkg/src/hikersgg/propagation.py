"""Gated message passing over commonsense, scene and bridge edges.

A batch of images is laid out as one block-diagonal graph: every image gets
its own copy of the commonsense nodes followed by all scene entity (SE) and
scene predicate (SP) nodes. Images never exchange messages, so per-image
results do not depend on how images are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import tape
from .graph import COMMONSENSE_EDGE_TYPES, SCENE_EDGE_TYPES, CommonsenseGraph, scene_edges
from .numerics import GruParams, MlpParams, mlp_apply, gru_apply, mlp_forward
from .tape import Var

BRANCH_FAMILIES = {"ent": ("CE", "CXE2", "CXE1"), "pred": ("CP", "CXP2", "CXP1")}


@dataclass
class PropagationConfig:
    steps: int = 3
    dim: int = 1024

    def __post_init__(self):
        if self.steps < 0 or self.dim < 1:
            raise ValueError("steps must be >= 0 and dim >= 1")


@dataclass
class PropagationParams:
    transforms: dict
    gru: GruParams
    sim_ent_scene: MlpParams
    sim_ent_cs: MlpParams
    sim_pred_scene: MlpParams
    sim_pred_cs: MlpParams

    def sim_pair(self, branch: str):
        if branch == "ent":
            return self.sim_ent_scene, self.sim_ent_cs
        return self.sim_pred_scene, self.sim_pred_cs


@dataclass
class BatchLayout:
    graph: CommonsenseGraph
    n_se: np.ndarray          # SE count per image
    cs_start: np.ndarray      # first commonsense node of each image copy
    se_start: np.ndarray
    sp_start: np.ndarray
    se_img: np.ndarray
    sp_img: np.ndarray
    n_total: int
    adjacency: dict           # edge type -> csr [n_total, n_total], rows = receivers

    @property
    def n_images(self) -> int:
        return len(self.n_se)

    @property
    def se_nodes(self) -> np.ndarray:
        base = self.graph.n_nodes * self.n_images
        return np.arange(base, base + len(self.se_img))

    @property
    def sp_nodes(self) -> np.ndarray:
        base = self.graph.n_nodes * self.n_images + len(self.se_img)
        return np.arange(base, base + len(self.sp_img))

    def family_nodes(self, family: str) -> np.ndarray:
        """Global indices ``[n_images, count]`` of one commonsense family in every copy."""
        local = np.arange(self.graph.counts[family]) + self.graph.offsets[family]
        return self.cs_start[:, None] + local[None, :]

    def image_slices(self, kind: str) -> list[slice]:
        counts = self.n_se if kind == "se" else self.n_se * (self.n_se - 1)
        ends = np.cumsum(counts)
        return [slice(int(e - c), int(e)) for c, e in zip(counts, ends)]


def build_layout(graph: CommonsenseGraph, n_per_image) -> BatchLayout:
    n_per_image = np.asarray(n_per_image, dtype=np.int64)
    b = len(n_per_image)
    nc = graph.n_nodes
    n_pairs = n_per_image * np.maximum(n_per_image - 1, 0)
    cs_start = np.arange(b, dtype=np.int64) * nc
    se_base = nc * b
    se_start = se_base + np.concatenate([[0], np.cumsum(n_per_image)[:-1]]).astype(np.int64)
    sp_base = se_base + int(n_per_image.sum())
    sp_start = sp_base + np.concatenate([[0], np.cumsum(n_pairs)[:-1]]).astype(np.int64)
    n_total = sp_base + int(n_pairs.sum())

    src = {t: [] for t in COMMONSENSE_EDGE_TYPES + SCENE_EDGE_TYPES}
    dst = {t: [] for t in src}
    for t in COMMONSENSE_EDGE_TYPES:
        s, d = graph.edges_of(t)
        if len(s):
            src[t].append((cs_start[:, None] + s[None, :]).ravel())
            dst[t].append((cs_start[:, None] + d[None, :]).ravel())
    for i, n in enumerate(n_per_image):
        if n < 2:
            continue
        for t, (s, d) in scene_edges(int(n)).items():
            # local SE ids < n, local SP ids >= n
            to_global = lambda v: np.where(v < n, se_start[i] + v, sp_start[i] + v - n)  # noqa: E731
            src[t].append(to_global(s))
            dst[t].append(to_global(d))
    adjacency = {}
    for t in src:
        if src[t]:
            s = np.concatenate(src[t])
            d = np.concatenate(dst[t])
            adjacency[t] = sp.csr_matrix((np.ones(len(s)), (d, s)), shape=(n_total, n_total))
    se_img = np.repeat(np.arange(b), n_per_image)
    sp_img = np.repeat(np.arange(b), n_pairs)
    return BatchLayout(graph, n_per_image, cs_start, se_start, sp_start, se_img, sp_img, n_total, adjacency)


@dataclass
class PropagationState:
    x: Var
    bridge_ent: Var
    bridge_pred: Var
    step: int
    layout: BatchLayout
    params: PropagationParams


def _bridge_terms(x: Var, scene_nodes, class_nodes, weights: Var, w_to_class, w_to_scene, n_total):
    """Messages along one bidirectional bridge family with shared weights."""
    if len(scene_nodes) == 0:
        return []
    xs = tape.gather(x, scene_nodes)                      # [S, d]
    xc = tape.gather(x, class_nodes)                      # [S, C, d]
    to_scene = tape.einsum("sc,scd->sd", weights, xc) @ w_to_scene
    per_edge = tape.einsum("sc,sd->scd", weights, xs @ w_to_class)
    s, c = class_nodes.shape
    to_class = tape.scatter_add(tape.reshape(per_edge, (s * c, -1)), class_nodes.ravel(), n_total)
    return [tape.scatter_add(to_scene, scene_nodes, n_total), to_class]


def aggregate_messages(state: PropagationState) -> Var:
    """Sum over incoming edges of ``weight * transform_type(source feature)``."""
    lay, p, x = state.layout, state.params, state.x
    terms = []
    for t, a in lay.adjacency.items():
        terms.append(tape.spmm(a, x @ p.transforms[t]))
    ce = lay.family_nodes("CE")[lay.se_img]
    terms += _bridge_terms(x, lay.se_nodes, ce, state.bridge_ent,
                           p.transforms["has_inst_ent"], p.transforms["class_to_ent"], lay.n_total)
    cp = lay.family_nodes("CP")[lay.sp_img]
    terms += _bridge_terms(x, lay.sp_nodes, cp, state.bridge_pred,
                           p.transforms["has_inst_pred"], p.transforms["class_to_pred"], lay.n_total)
    if not terms:
        return tape.Var(np.zeros_like(x.value))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def branch_similarities(state: PropagationState, branch: str) -> dict:
    """Similarity of every scene node of a branch to each class family of its image.

    Returns ``{family: Var[n_scene, count]}`` for the families present in the graph.
    """
    lay, x = state.layout, state.x
    fc_scene, fc_cs = state.params.sim_pair(branch)
    scene_nodes, img = (lay.se_nodes, lay.se_img) if branch == "ent" else (lay.sp_nodes, lay.sp_img)
    fams = [f for f in BRANCH_FAMILIES[branch] if lay.graph.counts[f] > 0]
    idx = np.concatenate([lay.family_nodes(f) for f in fams], axis=1)   # [B, K]
    b, k = idx.shape
    proj_scene = mlp_apply(fc_scene, tape.gather(x, scene_nodes))
    proj_cs = tape.reshape(mlp_apply(fc_cs, tape.gather(x, idx.ravel())), (b, k, -1))
    sims = tape.einsum("sd,skd->sk", proj_scene, tape.gather(proj_cs, img))
    out, start = {}, 0
    sel = np.arange(k)
    for f in fams:
        c = lay.graph.counts[f]
        out[f] = tape.matmul(sims, _selector(sel[start:start + c], k, sims.value.dtype))
        start += c
    return out


def _selector(cols, k, dtype) -> np.ndarray:
    m = np.zeros((k, len(cols)), dtype=dtype)
    m[cols, np.arange(len(cols))] = 1.0
    return m


def node_similarity(x_a, x_b, fc_sender: MlpParams, fc_receiver: MlpParams) -> float:
    """Inner product of the two projections; not symmetric in general."""
    a = mlp_forward(fc_sender, x_a)
    b = mlp_forward(fc_receiver, x_b)
    if a.shape != b.shape:
        raise ValueError("projected dimensions differ")
    return float(a @ b)


def propagate_step(state: PropagationState) -> PropagationState:
    m = aggregate_messages(state)
    x = gru_apply(state.params.gru, state.x, m)
    nxt = replace(state, x=x, step=state.step + 1)
    # bridge rows: softmax of similarities to all leaf class nodes of the image
    ent = branch_similarities(nxt, "ent")["CE"]
    pred = branch_similarities(nxt, "pred")["CP"]
    return replace(nxt, bridge_ent=tape.softmax_rows(ent), bridge_pred=tape.softmax_rows(pred))


def run_propagation(state: PropagationState, config: PropagationConfig) -> PropagationState:
    for _ in range(config.steps - state.step):
        state = propagate_step(state)
    return state
