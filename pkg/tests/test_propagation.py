import math

import numpy as np
import pytest

from hikersgg import tape
from hikersgg.graph import RelationEdge, build_structure
from hikersgg.model import ModelConfig, forward, init_params, propagation_params
from hikersgg.numerics import MlpParams
from hikersgg.propagation import (PropagationConfig, PropagationState, aggregate_messages, build_layout,
                                  node_similarity, propagate_step, run_propagation)

import oracles

D = 2


def _params(zero=True, **set_):
    p = init_params(ModelConfig(dim=D, feat_dim=D, emb_dim=D, seed=3))
    if zero:
        p = {k: np.zeros_like(v) for k, v in p.items()}
    p.update(set_)
    return propagation_params(p)


def _state(ents, preds, edges, n_se, x, bridge_ent=None, params=None):
    g = build_structure(ents, preds, None, None, edges)
    lay = build_layout(g, [n_se])
    n_sp = n_se * (n_se - 1)
    be = np.full((n_se, len(ents)), 1 / len(ents)) if bridge_ent is None else np.asarray(bridge_ent, float)
    bp = np.full((n_sp, len(preds)), 1 / max(len(preds), 1))
    return PropagationState(tape.Var(np.asarray(x, float)), tape.Var(be), tape.Var(bp), 0, lay,
                            params or _params())


def test_isolated_node_zero_message():
    st = _state(["a", "b"], ["p"], [], 1, np.ones((4, D)), bridge_ent=[[1.0, 0.0]],
                params=_params(**{"transform.class_to_ent": np.eye(D)}))
    m = aggregate_messages(st).value
    assert not m[1].any()          # CE "b" has no incoming edge and zero bridge weight
    assert not m[2].any()          # CP node


def test_bridge_message_weight_half():
    # nodes: CE a, CE b, CP p, SE 0
    x = np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    st = _state(["a", "b"], ["p"], [], 1, x, bridge_ent=[[0.5, 0.5]],
                params=_params(**{"transform.class_to_ent": np.eye(D)}))
    assert aggregate_messages(st).value[3].tolist() == [1.0, 0.0]


def test_messages_additive():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, D))
    w = rng.normal(size=(D, D))
    prm = _params(**{"transform.rel_ce_ce": w})
    both = [RelationEdge("CE", 0, "CE", 2), RelationEdge("CE", 1, "CE", 2)]
    ents = ["a", "b", "c"]
    m_both = aggregate_messages(_state(ents, [], both, 1, x, params=prm)).value[2]
    m0 = aggregate_messages(_state(ents, [], both[:1], 1, x, params=prm)).value[2]
    m1 = aggregate_messages(_state(ents, [], both[1:], 1, x, params=prm)).value[2]
    assert np.allclose(m_both, m0 + m1, atol=1e-15)
    assert np.allclose(m0, x[0] @ w)


def test_zero_params_step():
    st = _state(["a", "b", "c"], ["p", "q"], [RelationEdge("CE", 0, "CP", 1)], 2, np.zeros((9, D)),
                bridge_ent=[[1, 0, 0], [0.2, 0.3, 0.5]])
    nxt = propagate_step(st)
    assert not nxt.x.value.any()
    assert np.allclose(nxt.bridge_ent.value, 1 / 3) and np.allclose(nxt.bridge_pred.value, 0.5)
    assert nxt.step == 1


def test_zero_params_contract_features():
    x = np.random.default_rng(1).normal(size=(9, D)) * 3
    st = _state(["a", "b", "c"], ["p", "q"], [], 2, x)
    out = run_propagation(st, PropagationConfig(steps=3, dim=D))
    assert np.allclose(out.x.value, x / 8)
    assert np.all(np.abs(out.x.value) <= np.maximum(np.abs(x), 1))


def test_zero_steps_unchanged():
    st = _state(["a"], ["p"], [], 2, np.ones((4, D)))
    assert run_propagation(st, PropagationConfig(steps=0, dim=D)) is st


def test_one_step_equals_propagate_step():
    m = oracles.toy_model(steps=1)
    st = forward(m, [oracles.toy_bundle()]).state
    x0 = st.x.value
    # rebuild the initial state by running zero steps
    m0 = oracles.toy_model(steps=0)
    s0 = forward(m0, [oracles.toy_bundle()]).state
    one = propagate_step(s0)
    assert np.array_equal(one.x.value, x0)
    assert np.array_equal(one.bridge_pred.value, st.bridge_pred.value)


def test_propagation_deterministic():
    a = forward(oracles.toy_model(steps=3), [oracles.toy_bundle()]).state
    b = forward(oracles.toy_model(steps=3), [oracles.toy_bundle()]).state
    assert a.x.value.tobytes() == b.x.value.tobytes()
    assert a.bridge_ent.value.tobytes() == b.bridge_ent.value.tobytes()


def test_bridge_rows_stochastic_after_every_step():
    m = oracles.toy_model(mode="sgcls", steps=0)
    st = forward(m, [oracles.toy_bundle(n=4, triplets=((0, 1, 1),))]).state
    for _ in range(3):
        st = propagate_step(st)
        for b in (st.bridge_ent.value, st.bridge_pred.value):
            assert np.all(b >= 0)
            assert np.abs(b.sum(axis=1) - 1).max() < 1e-6


def test_images_do_not_interact():
    m = oracles.toy_model(steps=2)
    b1, b2 = oracles.toy_bundle(seed=1), oracles.toy_bundle(seed=2, n=2)
    joint = forward(m, [b1, b2]).pred.joint.value
    alone = forward(m, [b1]).pred.joint.value
    assert np.allclose(joint[:len(alone)], alone, atol=1e-13)


def test_bridge_softmax_example():
    row = tape.softmax_rows(tape.Var(np.array([[math.log(3), 0.0, 0.0]]))).value
    assert np.allclose(row, [[0.6, 0.2, 0.2]], atol=1e-15)


def _identity_mlp(d):
    e, z = np.eye(d), np.zeros(d)
    return MlpParams(e, z, e, z, e, z)


def test_node_similarity():
    assert node_similarity([1.0, 1.0], [1.0, 1.0], _identity_mlp(2), _identity_mlp(2)) == 2.0
    assert node_similarity([1.0, 1.0], [3.0, 1.0], MlpParams.zeros((2, 2, 2, 2)), _identity_mlp(2)) == 0.0


def test_node_similarity_linear_scaling():
    # identity projections are linear on the positive orthant
    a, b = np.array([1.0, 2.0]), np.array([0.5, 3.0])
    base = node_similarity(a, b, _identity_mlp(2), _identity_mlp(2))
    for c in (0.5, 2.0, 7.0):
        assert node_similarity(c * a, b, _identity_mlp(2), _identity_mlp(2)) == pytest.approx(c * base)


def test_node_similarity_not_symmetric():
    rng = np.random.default_rng(2)
    fa = MlpParams(*(rng.normal(size=s) for s in ((2, 3), 3, (3, 3), 3, (3, 2), 2)))
    fb = MlpParams(*(rng.normal(size=s) for s in ((2, 3), 3, (3, 3), 3, (3, 2), 2)))
    x, y = rng.normal(size=2), rng.normal(size=2)
    assert node_similarity(x, y, fa, fb) != pytest.approx(node_similarity(y, x, fa, fb))


def test_node_similarity_dimension_mismatch():
    with pytest.raises(ValueError):
        node_similarity([1.0, 1.0, 1.0], [1.0, 1.0], _identity_mlp(2), _identity_mlp(2))


def test_config_validation():
    with pytest.raises(ValueError):
        PropagationConfig(steps=-1)
    assert PropagationConfig().steps == 3
