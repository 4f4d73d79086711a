"""Factorized three-level inference and transition-matrix refinement.

Each scene node gets similarities to the level-1, level-2 and leaf class
nodes of its branch. Level-1 is a plain softmax, level-2 a softmax within each
level-1 group and leaves a softmax within each level-2 group; the joint over
leaves is the product along the path. Everything is done in log space on
:class:`~hikersgg.tape.Var` so the training losses can differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .hierarchy import ConfusionMatrix, Hierarchy
from .numerics import mlp_apply
from .tape import Var


def selector(parent_of: np.ndarray, n_parents: int, dtype=np.float64) -> np.ndarray:
    """``S[g, leaf] = 1`` when ``leaf`` sits under ``g``; ``logp @ S`` spreads parents to leaves."""
    s = np.zeros((n_parents, len(parent_of)), dtype=dtype)
    s[np.asarray(parent_of), np.arange(len(parent_of))] = 1.0
    return s


@dataclass
class LogChain:
    """Log-probabilities along the chain; ``l1``/``l2`` are None in flat mode."""

    l1: Var | None
    l2: Var | None
    leaf: Var
    joint: Var


def log_chain(sim_l1, sim_l2, sim_leaf, h: Hierarchy | None) -> LogChain:
    sim_leaf = tape.as_var(sim_leaf)
    if h is None:
        lj = tape.log_softmax(sim_leaf)
        return LogChain(None, None, lj, lj)
    if sim_leaf.shape[-1] != h.n_leaves:
        raise ValueError(f"{sim_leaf.shape[-1]} leaf scores for a {h.n_leaves}-leaf hierarchy")
    dt = sim_leaf.value.dtype
    l1 = tape.log_softmax(sim_l1)
    l2 = tape.group_log_softmax(sim_l2, h.l2_to_l1)
    leaf = tape.group_log_softmax(sim_leaf, h.leaf_to_l2)
    joint = (l1 @ selector(h.leaf_to_l1, h.n_l1, dt) + l2 @ selector(h.leaf_to_l2, h.n_l2, dt)) + leaf
    return LogChain(l1, l2, leaf, joint)


@dataclass
class HierarchicalDistribution:
    """Rows are scene nodes. ``l2_cond``/``leaf_cond`` are conditional within their group."""

    l1: np.ndarray | None
    l2_cond: np.ndarray | None
    leaf_cond: np.ndarray
    joint: np.ndarray
    hierarchy: Hierarchy | None = None

    @classmethod
    def from_chain(cls, c: LogChain, h: Hierarchy | None) -> "HierarchicalDistribution":
        ex = lambda v: None if v is None else np.exp(v.value)  # noqa: E731
        return cls(ex(c.l1), ex(c.l2), ex(c.leaf), ex(c.joint), h)

    def l2_marginal(self) -> np.ndarray:
        """P(l1) * P(l2 | l1) for every level-2 group."""
        h = self.hierarchy
        return self.l1[:, h.l2_to_l1] * self.l2_cond


def hierarchical_predict(sim_leaf, sim_l2=None, sim_l1=None, hierarchy: Hierarchy | None = None,
                         greedy: bool = False) -> HierarchicalDistribution:
    """Distribution from similarity scores (rows = scene nodes).

    With ``greedy`` the level-1 and level-2 choices are committed by argmax and
    the returned joint is the leaf conditional inside the chosen group.
    """
    sim_leaf = np.atleast_2d(np.asarray(sim_leaf, dtype=np.float64))
    if hierarchy is not None:
        sim_l1 = np.atleast_2d(np.asarray(sim_l1, dtype=np.float64))
        sim_l2 = np.atleast_2d(np.asarray(sim_l2, dtype=np.float64))
        if sim_l1.shape[-1] != hierarchy.n_l1 or sim_l2.shape[-1] != hierarchy.n_l2:
            raise ValueError("superclass score widths do not match the hierarchy")
    dist = HierarchicalDistribution.from_chain(log_chain(sim_l1, sim_l2, sim_leaf, hierarchy), hierarchy)
    return greedy_path(dist) if greedy else dist


def greedy_path(dist: HierarchicalDistribution) -> HierarchicalDistribution:
    h = dist.hierarchy
    if h is None:
        return dist
    g1 = predict_class(dist.l1)
    l2 = np.where(h.l2_to_l1[None, :] == g1[:, None], dist.l2_cond, -1.0)
    g2 = predict_class(l2)
    joint = np.where(h.leaf_to_l2[None, :] == g2[:, None], dist.leaf_cond, 0.0)
    return HierarchicalDistribution(dist.l1, dist.l2_cond, dist.leaf_cond, joint, h)


def predict_from_features(x, leaf_feats, l2_feats, l1_feats, hierarchy, fc_scene, fc_cs,
                          greedy: bool = False) -> HierarchicalDistribution:
    """Score scene features against class node features through the two projections."""
    proj = mlp_apply(fc_scene, np.atleast_2d(x)).value

    def sims(feats):
        return None if feats is None else proj @ mlp_apply(fc_cs, np.atleast_2d(feats)).value.T

    return hierarchical_predict(sims(leaf_feats), sims(l2_feats), sims(l1_feats), hierarchy, greedy)


def build_transition(r) -> np.ndarray:
    """Row-normalize ``R + I``."""
    r = np.asarray(r.matrix if isinstance(r, ConfusionMatrix) else r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(r < 0):
        raise ValueError("confusion matrix has negative entries")
    a = r + np.eye(len(r))
    return a / a.sum(axis=1, keepdims=True)


def check_row_stochastic(t, tol: float = 1e-9) -> None:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1.0) > tol):
        raise ValueError("matrix is not row-stochastic")


def refine(dist, t) -> np.ndarray:
    """Push a leaf distribution (or rows of them) through T: ``out[s] = sum_g dist[g] T[g, s]``."""
    dist = np.asarray(dist, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if dist.shape[-1] != t.shape[0] or t.shape[0] != t.shape[1]:
        raise ValueError(f"distribution width {dist.shape[-1]} does not match T {t.shape}")
    return dist @ t


def predict_class(dist) -> np.ndarray | int:
    """Argmax; ``np.argmax`` already returns the lowest index among ties."""
    d = np.asarray(dist)
    out = np.argmax(d, axis=-1)
    return int(out) if d.ndim == 1 else out
