"""Acceptance criteria 1-8 at their stated tolerances.

Each test records one PASS/FAIL line; ``conftest.py`` prints them all in the
terminal summary. Run just these with ``pytest tests/test_acceptance.py -s``.
"""

import time

import numpy as np
import pytest

from hikersgg.evaluation import MetricsReport
from hikersgg.experiments import (ABLATION_ARMS, comparison_rows, format_table, robustness_seed, robustness_summary,
                                  run_ablation, run_alpha_sweep, run_end_to_end)
from hikersgg.inference import build_transition

import suites

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


def test_criterion_1_normalization():
    t0 = time.perf_counter()
    r = suites.normalization_suite(n_states=1000)
    dt = time.perf_counter() - t0
    ok = r["joint_err"] < 1e-9 and r["bridge_err"] < 1e-6 and r["transition_err"] < 1e-9 and dt < 10
    assert record(1, ok, f"joint {r['joint_err']:.1e}, bridge {r['bridge_err']:.1e}, "
                         f"transition {r['transition_err']:.1e}, {dt:.1f}s")


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    kernels = suites.kernel_gradient_suite(points=100)
    composed = suites.composed_gradient_suite(points=100)
    dt = time.perf_counter() - t0
    worst = max(max(kernels.values()), composed["max_rel_error"])
    ok = worst < 1e-4 and dt < 60
    assert record(2, ok, f"max rel err {worst:.1e} ({len(kernels)} kernels + composed loss, "
                         f"100 points each), {dt:.1f}s")


def test_criterion_3_oracles():
    t0 = time.perf_counter()
    agg = suites.agglomeration_oracle_suite(50)
    match = suites.matcher_oracle_suite(20)
    ident = all(np.array_equal(build_transition(np.zeros((n, n))), np.eye(n)) for n in range(1, 60))
    dt = time.perf_counter() - t0
    ok = agg == 0 and match == 0 and ident and dt < 30
    assert record(3, ok, f"agglomeration mismatches {agg}, matcher mismatches {match}, T(0) == I {ident}, "
                         f"{dt:.1f}s")


def test_criterion_4_end_to_end():
    r = run_end_to_end(seed=0)
    ok = r["loss_drop"] >= 0.5 and r["test_accuracy"] >= 0.90 and r["wall_time"] < 300
    assert record(4, ok, f"loss {r['loss_first']:.3f} -> {r['loss_last']:.3f} ({100 * r['loss_drop']:.1f}% drop), "
                         f"leaf accuracy {100 * r['test_accuracy']:.1f}%, {r['wall_time']:.0f}s")


def test_criterion_5_robustness_trend():
    t0 = time.perf_counter()
    runs = [robustness_seed(s) for s in range(5)]
    dt = time.perf_counter() - t0
    s = robustness_summary(runs, sigma=1.0, margin=2.0)
    ok = s["hop_ordering_seeds"] >= 4 and s["degradation_seeds"] >= 4 and dt < 900
    degs = ", ".join(f"{r['deg_full']:.1f}/{r['deg_flat']:.1f}" for r in s["rows"])
    assert record(5, ok, f"hop ordering {s['hop_ordering_seeds']}/5, degradation {s['degradation_seeds']}/5 "
                         f"(full/flat % at sigma 1.0: {degs}), {dt:.0f}s")


def _same_structure(reports):
    keys = [sorted(r.to_json()) for r in reports.values()]
    metrics = [sorted(r.mean_recall["C"]) for r in reports.values()]
    return all(isinstance(r, MetricsReport) for r in reports.values()) and len({tuple(k) for k in keys}) == 1 \
        and len({tuple(m) for m in metrics}) == 1


def test_criterion_6_ablation_harness():
    reps = run_ablation(seed=0, epochs=3)
    rows = comparison_rows(reps)
    print(format_table(rows))
    ok = list(reps) == [a.name for a in ABLATION_ARMS] and _same_structure(reps) and len(rows) == 8
    assert record(6, ok, f"{len(reps)} configurations ran, reports comparable {_same_structure(reps)}")


def test_criterion_7_alpha_sweep():
    alphas = (0.5, 0.8, 0.9, 0.95, 0.99)
    reps = run_alpha_sweep(alphas, seed=0, epochs=3)
    rows = comparison_rows(reps)
    table = format_table(rows)
    print(table)
    ok = [r[0] for r in rows[1:]] == [f"alpha={a}" for a in alphas] and _same_structure(reps)
    assert record(7, ok, f"{len(reps)} alpha values, table of {len(rows) - 1} rows")


def test_criterion_8_corruption(tmp_path):
    t0 = time.perf_counter()
    r = suites.corruption_suite(tmp_path)
    dt = time.perf_counter() - t0
    ok = r["deterministic"] and not r["monotone_violations"] and r["goldens_checked"] == 13 \
        and not r["golden_failures"] and dt < 30
    assert record(8, ok, f"deterministic {r['deterministic']} over {r['outputs']} outputs, monotone violations "
                         f"{len(r['monotone_violations'])}, goldens {r['goldens_checked']} checked / "
                         f"{len(r['golden_failures'])} failed, {dt:.1f}s")


@pytest.fixture(scope="module", autouse=True)
def _reset():
    RESULTS.clear()
    yield
