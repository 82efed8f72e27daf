import json
import math
from pathlib import Path

import numpy as np
import pytest

from tugbot.core import SimConfig, make_rng
from tugbot.harness import (
    HarnessError,
    aggregate_curves,
    canonical_json,
    compute_comparison_metrics,
    compute_estimator_metrics,
    compute_tolerance_metrics,
    emit_report,
    recompute_report,
    run_detector_comparison,
    run_estimator_eval,
    run_force_tolerance,
    sample_tolerance_push,
    write_curves,
    _estimator_eval_pass,
)

CKPT = "/root/pkg/runs/calib/ckpt_final.tbck"
needs_ckpt = pytest.mark.skipif(not Path(CKPT).is_file(),
                                reason="calibration checkpoint not trained yet")


def test_newton_conversion():
    # F = 25 N for 0.25 s at 12 kg -> dv = 0.5208 m/s
    assert 25.0 * 0.25 / 12.0 == pytest.approx(0.5208, abs=1e-4)
    rng = make_rng(0, "push")
    for _ in range(200):
        spec = sample_tolerance_push(rng, 12.0)
        assert 25.0 <= spec["force_n"] <= 100.0
        assert 0.25 <= spec["duration"] <= 0.5
        assert spec["dv"] == pytest.approx(spec["force_n"] * spec["duration"] / 12.0)
        assert 0.5 <= spec["start_t"] <= 4.5 - spec["duration"]


def test_drift_euclidean_example():
    recs = [{"trial": 0, "controller": "FEEDFORWARD", "fell": False,
             "drift": math.hypot(2.3 - 2.5, 0.4), "final": [2.3, 0.4]}]
    rep = compute_tolerance_metrics(recs)
    assert rep["drift_mean"] == pytest.approx(0.4472, abs=1e-4)


def test_accuracy_ratio_example():
    recs = []
    for i in range(1000):
        recs.append({"variant": "FULL_STATE", "magnitude": 0.5, "fell": False,
                     "correct": i < 734, "fp": 0,
                     "queries": ["NONE"] * 6})
    rep = compute_estimator_metrics(recs)
    assert rep["accuracy"] == pytest.approx(0.734)


def test_fpr_constructed_trial():
    # queries [NONE, LEFT, NONE, LEFT, NONE, NONE], truth LEFT:
    # correct trial, one extra prediction -> 1/6 per-trial contribution
    recs = [{"variant": "FULL_STATE", "magnitude": 0.5, "fell": False,
             "correct": True, "fp": 1,
             "queries": ["NONE", "LEFT", "NONE", "LEFT", "NONE", "NONE"]}]
    rep = compute_estimator_metrics(recs)
    assert rep["false_positive_rate"] == pytest.approx(1 / 6, abs=1e-4)
    assert rep["accuracy"] == 1.0


def test_empty_trial_set_errors(tmp_path):
    with pytest.raises(HarnessError, match="empty"):
        compute_tolerance_metrics([])
    with pytest.raises(HarnessError, match="empty"):
        emit_report({"protocol": "x"}, [], tmp_path)


def test_magnitude_must_be_positive():
    with pytest.raises(HarnessError, match="positive"):
        run_estimator_eval(CKPT, 0.0, trials=1)


def test_unknown_controller():
    with pytest.raises(HarnessError, match="unknown controller"):
        run_force_tolerance(None, "MPC", trials=1)


def test_feedforward_positive_drift_under_pushes():
    report, records = run_force_tolerance(None, "FEEDFORWARD", trials=24, seed=3)
    assert report["drift_mean"] > 0.0
    assert all(r["drift"] > 0.0 for r in records)


def test_force_tolerance_deterministic():
    rep1, recs1 = run_force_tolerance(None, "FEEDFORWARD", trials=10, seed=5)
    rep2, recs2 = run_force_tolerance(None, "FEEDFORWARD", trials=10, seed=5)
    assert canonical_json(recs1) == canonical_json(recs2)
    assert rep1["drift_mean"] == rep2["drift_mean"]


def test_report_roundtrip_bytes(tmp_path):
    report, records = run_force_tolerance(None, "FEEDFORWARD", trials=12, seed=1)
    emit_report(report, records, tmp_path)
    assert recompute_report(tmp_path)
    # corrupting a trial breaks the byte equality
    trials = (tmp_path / "trials.jsonl").read_text().splitlines()
    rec0 = json.loads(trials[0])
    rec0["drift"] += 1.0
    trials[0] = json.dumps(rec0, sort_keys=True, separators=(",", ":"))
    (tmp_path / "trials.jsonl").write_text("\n".join(trials) + "\n")
    assert not recompute_report(tmp_path)


@needs_ckpt
def test_estimator_eval_structure():
    both = _estimator_eval_pass(CKPT, 0.75, 12, 11, None)
    for variant in ("FULL_STATE", "ONLY_VEL"):
        rep, recs = both[variant]
        assert len(recs) == 12
        for r in recs:
            assert len(r["queries"]) == 6  # six queries per 150-step trial
        assert 0.0 <= rep["accuracy"] <= 1.0
        assert 0.0 <= rep["false_positive_rate"] <= 1.0
    # paired trials: identical pushes for both variants
    f = both["FULL_STATE"][1]
    o = both["ONLY_VEL"][1]
    for rf, ro in zip(f, o):
        assert rf["push"] == ro["push"]


@needs_ckpt
def test_estimator_eval_single_variant_call():
    rep, recs = run_estimator_eval(CKPT, 0.75, trials=8, seed=2, baseline="ONLY_VEL")
    assert rep["variant"] == "ONLY_VEL"
    assert len(recs) == 8


@needs_ckpt
def test_detector_comparison_structure(tmp_path):
    report, records = run_detector_comparison(CKPT, trials=4, seed=9)
    assert report["trials"] == 4
    for side in ("force", "accel"):
        assert 0.0 <= report[side]["accuracy"] <= 1.0
        assert report[side]["false_positive_rate"] >= 0.0
    emit_report(report, records, tmp_path)
    assert recompute_report(tmp_path)


@needs_ckpt
def test_learned_controller_checkpoint_mismatch():
    with pytest.raises(HarnessError, match="no-est"):
        run_force_tolerance(CKPT, "LEARNED_NO_EST", trials=1, seed=0)


def test_curves_rows(tmp_path):
    reports = []
    for seed in (0, 1):
        for mag in (0.25, 0.5):
            reports.append({
                "magnitude": mag, "variant": "FULL_STATE",
                "accuracy": 0.8 + 0.1 * seed, "false_positive_rate": 0.01,
                "metadata": {"seed": seed},
            })
    rows = aggregate_curves(reports)
    means = [r for r in rows if r["seed"] == "mean"]
    stds = [r for r in rows if r["seed"] == "std"]
    assert len(means) == 2 and len(stds) == 2
    assert means[0]["accuracy"] == pytest.approx(0.85)
    path = tmp_path / "curves.tsv"
    write_curves(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["magnitude", "variant", "seed", "accuracy",
                                    "false_positive_rate"]
    assert len(lines) == len(rows) + 1
