#!/usr/bin/env python3
"""Produce the evaluation artifacts the acceptance suite consumes.

Expects finished training runs under runs/ (five LEARNED_EST seeds plus one
no-est seed; see README). Writes:
    runs/eval/tracking_s<k>.json
    runs/eval/est_s<k>_mag<mmm>/<variant>/{report.json,trials.jsonl}
    runs/eval/ftol_<controller>/{report.json,trials.jsonl}
    runs/eval/detcmp/{report.json,trials.jsonl}
    runs/eval/curves.tsv
"""

import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tugbot import harness

RUNS = Path(__file__).resolve().parent.parent / "runs"
EVAL = RUNS / "eval"
SEEDS = [0, 1, 2, 3, 4]
MAGS = [0.25, 0.5, 0.75]


def main():
    EVAL.mkdir(parents=True, exist_ok=True)
    est_reports = []
    for k in SEEDS:
        ckpt = RUNS / f"est_s{k}" / "ckpt_final.tbck"
        if not ckpt.is_file():
            print(f"missing {ckpt}; train first", file=sys.stderr)
            return 1
        t0 = time.time()
        track = harness.eval_tracking(ckpt, seed=1000 + k)
        (EVAL / f"tracking_s{k}.json").write_text(harness.canonical_json(track))
        print(f"seed {k}: tracking err {track['tracking_err_mean']:.4f} "
              f"vel mse {track['vel_est_mse']:.5f} ({time.time()-t0:.0f}s)", flush=True)
        for mag in MAGS:
            t0 = time.time()
            both = harness._estimator_eval_pass(ckpt, mag, 1000, seed=100 + k, sim_cfg=None)
            tag = f"est_s{k}_mag{int(mag*100):03d}"
            for variant, (report, records) in both.items():
                harness.emit_report(report, records, EVAL / tag / variant.lower())
                est_reports.append(report)
            fs = both["FULL_STATE"][0]
            ov = both["ONLY_VEL"][0]
            print(f"  mag {mag}: FULL {fs['accuracy']:.3f}/{fs['false_positive_rate']:.4f} "
                  f"ONLY {ov['accuracy']:.3f}/{ov['false_positive_rate']:.4f} "
                  f"fell {fs['fell_count']} ({time.time()-t0:.0f}s)", flush=True)
    harness.write_curves(harness.aggregate_curves(est_reports), EVAL / "curves.tsv")

    ckpt0 = RUNS / "est_s0" / "ckpt_final.tbck"
    noest = RUNS / "noest_s0" / "ckpt_final.tbck"
    for controller, ckpt in (("FEEDFORWARD", None), ("LEARNED_NO_EST", noest),
                             ("LEARNED_EST", ckpt0)):
        t0 = time.time()
        report, records = harness.run_force_tolerance(
            ckpt and str(ckpt), controller, trials=1000, seed=0)
        harness.emit_report(report, records, EVAL / f"ftol_{controller.lower()}")
        print(f"{controller}: fell {report['proportion_fell']:.4f} "
              f"drift {report['drift_mean']:.4f}±{report['drift_std']:.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)

    t0 = time.time()
    report, records = harness.run_detector_comparison(str(ckpt0), trials=40, seed=0)
    harness.emit_report(report, records, EVAL / "detcmp")
    print(f"detector comparison: force {report['force']} accel {report['accel']} "
          f"({time.time()-t0:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
