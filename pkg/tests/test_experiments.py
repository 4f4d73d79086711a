import pytest

from hikersgg.evaluation import MetricsReport
from hikersgg.experiments import (ABLATION_ARMS, FLAT, FULL, build_model, comparison_rows, format_table,
                                  hierarchies_for, robustness_summary, run_ablation, run_alpha_sweep,
                                  run_end_to_end)
from hikersgg.synth import SyntheticSpec, generate
from hikersgg.training import TrainConfig

TINY = SyntheticSpec(n_images=6, n_test=4, n_entities=6, n_predicates=4, ent_groups=(3, 2), pred_groups=(2, 1),
                     dim=8, emb_dim=8)


def test_arm_table():
    assert len(ABLATION_ARMS) == 7 and len({a.name for a in ABLATION_ARMS}) == 7
    assert FULL.ph == FULL.eh == "D" and FULL.ar
    assert FLAT.ph is None and FLAT.eh is None and not FLAT.ar
    assert FLAT.cli_flags() == ["--hierarchy-source", "discovered", "--no-ph", "--no-eh", "--no-ar"]
    assert FULL.cli_flags() == ["--hierarchy-source", "discovered"]


def test_hierarchies_per_arm():
    data = generate(TINY)
    for arm in ABLATION_ARMS:
        eh, ph = hierarchies_for(data, arm)
        assert (eh is None) == (arm.eh is None) and (ph is None) == (arm.ph is None)
        if arm.ph == "M":
            assert ph.n_l2 == ph.n_l1 == TINY.pred_groups[1]
        if arm.ph == "D":
            assert (ph.n_l2, ph.n_l1) == TINY.pred_groups
    m = build_model(data, FLAT)
    assert m.active_pred_hierarchy is None


def test_end_to_end_smoke():
    r = run_end_to_end(0, TINY, TrainConfig(epochs=2, optimizer="adam", lr=3e-3, batch_size=4))
    assert len(r["report"].epochs) == 2
    assert 0 <= r["test_accuracy"] <= 1 and r["loss_first"] > 0


def test_ablation_and_sweep_structure():
    reps = run_ablation(0, epochs=1, spec=TINY)
    assert list(reps) == [a.name for a in ABLATION_ARMS]
    keys = None
    for rep in reps.values():
        assert isinstance(rep, MetricsReport)
        assert keys is None or rep.to_json().keys() == keys
        keys = rep.to_json().keys()
    sweep = run_alpha_sweep((0.5, 0.9), seed=0, epochs=1, spec=TINY)
    rows = comparison_rows(sweep)
    assert [r[0] for r in rows] == ["config", "alpha=0.5", "alpha=0.9"]
    assert len(rows[0]) == 4 and all(" / " in c for c in rows[1][1:])
    assert format_table(rows).count("\n") == 3


def _run(seed, full, flat, hops=(50.0, 40.0, 30.0)):
    def model(deg):
        h = dict(zip((1, 2, 3), hops))
        return {"clean": {"hops": h}, "sigma=1.0": {"hops": h, "degradation": deg}}
    return {"seed": seed, "models": {FULL.name: model(full), FLAT.name: model(flat)}}


def test_robustness_summary_counts():
    runs = [_run(0, 10.0, 10.0), _run(1, 13.0, 10.0), _run(2, 11.9, 10.0),
            _run(3, 5.0, 10.0, hops=(40.0, 45.0, 30.0))]
    s = robustness_summary(runs)
    assert s["degradation_seeds"] == 3           # seed 1 is worse by 3 points
    assert s["hop_ordering_seeds"] == 3          # seed 3 breaks the ordering
    assert s["mean_deg_full"] == pytest.approx((10 + 13 + 11.9 + 5) / 4)
