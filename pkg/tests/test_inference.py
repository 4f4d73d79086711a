import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hikersgg.hierarchy import ConfusionMatrix, Hierarchy
from hikersgg.inference import (build_transition, check_row_stochastic, hierarchical_predict, predict_class,
                                refine)
from hikersgg.numerics import softmax

import suites


def test_degenerate_hierarchy_equals_flat():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        leaf = rng.normal(0, 5, (3, n))
        h = Hierarchy.flat("predicate", n)
        d = hierarchical_predict(leaf, rng.normal(size=(3, 1)), rng.normal(size=(3, 1)), h)
        flat = np.stack([softmax(r) for r in leaf])
        assert np.abs(d.joint - flat).max() < 1e-12
        assert np.abs(hierarchical_predict(leaf).joint - flat).max() < 1e-12


def test_symmetric_two_group_chain():
    h = Hierarchy("predicate", [0, 1], [0, 1])
    d = hierarchical_predict([3.0, -1.0], [0.0, 0.0], [2.0, 2.0], h)
    assert np.allclose(d.joint, [[0.5, 0.5]], atol=1e-15)


def test_joint_normalization_suite():
    r = suites.normalization_suite(n_states=300, n_bridge_runs=4)
    assert r["joint_err"] < 1e-9


@given(st.integers(0, 100_000))
def test_joint_is_product_of_conditionals(seed):
    rng = np.random.default_rng(seed)
    h = suites.random_hierarchy(rng)
    d = hierarchical_predict(rng.normal(0, 3, h.n_leaves), rng.normal(0, 3, h.n_l2), rng.normal(0, 3, h.n_l1), h)
    want = d.l1[0, h.leaf_to_l1] * d.l2_cond[0, h.leaf_to_l2] * d.leaf_cond[0]
    assert np.allclose(d.joint[0], want, atol=1e-12)
    # summing a level-2 group's leaves gives its chain prefix
    mass = np.bincount(h.leaf_to_l2, weights=d.joint[0], minlength=h.n_l2)
    assert np.allclose(mass, d.l2_marginal()[0], atol=1e-9)
    for g in range(h.n_l1):
        assert abs(d.l2_cond[0, h.l2_to_l1 == g].sum() - 1) < 1e-9
    for g in range(h.n_l2):
        assert abs(d.leaf_cond[0, h.leaf_to_l2 == g].sum() - 1) < 1e-9


def test_width_mismatch():
    h = Hierarchy("predicate", [0, 1], [0, 0])
    with pytest.raises(ValueError):
        hierarchical_predict([0.0, 0.0], [0.0], [0.0], h)
    with pytest.raises(ValueError):
        hierarchical_predict([0.0, 0.0, 0.0], [0.0, 0.0], [0.0], h)


def test_greedy_commits_to_best_path():
    # the level-1 winner splits its mass over two leaves, so the full joint prefers the other group
    h = Hierarchy("predicate", [0, 0, 1], [0, 1])
    leaf, l2, l1 = [0.0, 0.0, 0.0], [0.0, 0.0], [0.2, 0.0]
    full = hierarchical_predict(leaf, l2, l1, h)
    greedy = hierarchical_predict(leaf, l2, l1, h, greedy=True)
    assert predict_class(full.joint[0]) == 2
    assert np.allclose(greedy.joint[0], [0.5, 0.5, 0.0])
    assert predict_class(greedy.joint[0]) == 0


def test_build_transition_examples():
    assert np.array_equal(build_transition(np.zeros((4, 4))), np.eye(4))
    t = build_transition([[0.5, 0.5], [0, 1]])
    assert np.allclose(t, [[0.75, 0.25], [0, 1]], atol=1e-15)
    assert np.allclose(build_transition(ConfusionMatrix(["a", "b"], [[0.5, 0.5], [0, 1]])), t)
    with pytest.raises(ValueError):
        build_transition([[0.5, -0.1], [0, 1]])
    with pytest.raises(ValueError):
        build_transition([[0.5, 0.1]])


@given(st.integers(0, 100_000))
def test_transition_row_stochastic(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    t = build_transition(rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.5))
    assert np.abs(t.sum(axis=1) - 1).max() < 1e-9
    check_row_stochastic(t)


def test_refine_examples():
    t = np.array([[0.75, 0.25], [0, 1]])
    d = np.array([0.5, 0.5])
    assert np.array_equal(refine(d, np.eye(2)), d)
    assert np.array_equal(refine([1.0, 0.0], t), t[0])
    assert np.allclose(refine(d, t), [0.375, 0.625], atol=1e-15)
    assert predict_class(d) == 0 and predict_class(refine(d, t)) == 1
    with pytest.raises(ValueError):
        refine([1.0, 0.0, 0.0], t)


@given(st.integers(0, 100_000))
def test_refine_preserves_simplex(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    t = build_transition(rng.uniform(size=(n, n)))
    out = refine(rng.dirichlet(np.ones(n), size=3), t)
    assert np.all(out >= 0) and np.abs(out.sum(axis=1) - 1).max() < 1e-12


def test_predict_class():
    assert predict_class([0.1, 0.7, 0.2]) == 1
    assert predict_class(np.full(5, 0.2)) == 0
    assert predict_class([[0.5, 0.5], [0.2, 0.8]]).tolist() == [0, 1]


def test_check_row_stochastic_rejects():
    with pytest.raises(ValueError):
        check_row_stochastic([[0.5, 0.6]])
    with pytest.raises(ValueError):
        check_row_stochastic([[1.5, -0.5]])
