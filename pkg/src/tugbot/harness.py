"""Scripted experiments: force tolerance, estimator evaluation, and the
force-estimator vs accelerometer detector comparison, with machine-readable
reports, raw per-trial logs, and plot-ready curve series.

All trials are deterministic in (checkpoint, seed). Trial randomness comes
from named streams keyed by trial id, so the three controllers (and both
estimator variants) face identical pushes, damping draws, and sensor noise:
every comparison is paired. Newton-specified forces convert to velocity
impulses via dv = F * duration / mass.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .controller import HISTORY_LEN, LocomotionController
from .core import CommandVelocity, SimConfig, make_rng, with_overrides
from .nnet import load_checkpoint
from .plant import OBS_DIM, Plant, PushEvent, PushRegime
from .training import ONLY_VEL_IN_DIM
from .tugdetect import (
    ACCEL_DETECTOR_PARAMS,
    FORCE_DETECTOR_PARAMS,
    ForceSignal,
    TugDetector,
    TugDirection,
)

CONTROLLERS = ("FEEDFORWARD", "LEARNED_NO_EST", "LEARNED_EST")
FPR_NOTE = "global: false positives / (queries per trial x trials)"


class HarnessError(Exception):
    pass


def load_policy_nets(ckpt_path):
    nets, meta, _ = load_checkpoint(ckpt_path)
    if "policy_trunk" not in nets:
        raise HarnessError(f"{ckpt_path}: not a policy checkpoint")
    return nets, meta


class _TrialBatch:
    """Lockstep batch of independent trials sharing one policy."""

    def __init__(self, sim_cfg: SimConfig, nets: dict | None, n: int,
                 use_force_est: bool):
        self.cfg = sim_cfg
        self.n = n
        self.plants = [Plant(sim_cfg, i) for i in range(n)]
        self.feedforward = nets is None
        if self.feedforward:
            self.trunk = None
            self.controller = None
        else:
            self.trunk = nets["policy_trunk"]
            force = nets.get("force_est") if use_force_est else None
            self.controller = LocomotionController(nets.get("vel_est"), force, n)
        self.obs = np.zeros((n, OBS_DIM))
        self.active = np.ones(n, dtype=bool)

    def reset(self, commands, pushes_per_trial):
        raw = np.stack([
            p.reset(command=commands[i], pushes=pushes_per_trial[i])
            for i, p in enumerate(self.plants)
        ])
        if not self.feedforward:
            self.controller.reset_all()
            self.obs = self.controller.fill(raw)
        else:
            self.obs = raw
        self.active[:] = True

    def step(self):
        """Advance every active trial one policy step; returns results
        indexed by trial (None for inactive trials)."""
        idx = np.flatnonzero(self.active)
        if idx.size == 0:
            return [None] * self.n
        if self.feedforward:
            acts = np.stack([self.plants[i].state.command.as_array() for i in idx])
        else:
            acts = self.trunk.forward(self.obs[idx])
        out = [None] * self.n
        raw = np.zeros((idx.size, OBS_DIM))
        for k, i in enumerate(idx):
            res = self.plants[i].step(acts[k])
            out[i] = res
            raw[k] = res.obs
            if res.terminated or res.truncated:
                self.active[i] = False
        if not self.feedforward:
            filled = self.controller.fill(raw, rows=idx)
            self.obs[idx] = filled
            for k, i in enumerate(idx):
                out[i].obs = filled[k]
        return out


# -- force tolerance (walk forward at 0.5 m/s under one random push) -------


def sample_tolerance_push(rng: np.random.Generator, mass_kg: float) -> dict:
    force_n = float(rng.uniform(25.0, 100.0))
    duration = float(rng.uniform(0.25, 0.5))
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    dv = force_n * duration / mass_kg
    start_t = float(rng.uniform(0.5, 4.5 - duration))
    return {
        "force_n": force_n, "duration": duration, "angle": angle,
        "dv": dv, "fx": dv * math.cos(angle), "fy": dv * math.sin(angle),
        "start_t": start_t,
    }


def run_force_tolerance(ckpt_path, controller: str, trials: int = 1000,
                        seed: int = 0, sim_cfg: SimConfig | None = None,
                        chunk: int = 250):
    """Per trial: forward command 0.5 m/s for 5 s, one push in a uniform
    random direction, strength 25-100 N, duration 0.25-0.5 s. Metrics:
    proportion fell, and drift of the final position from the nominal
    endpoint 2.5 m straight ahead."""
    if controller not in CONTROLLERS:
        raise HarnessError(f"unknown controller {controller!r}")
    base = sim_cfg or SimConfig()
    cfg = with_overrides(base, seed=seed, episode_max_s=5.2)
    nets = None
    meta = {}
    if controller != "FEEDFORWARD":
        if ckpt_path is None:
            raise HarnessError(f"{controller} requires a checkpoint")
        nets, meta = load_policy_nets(ckpt_path)
        if controller == "LEARNED_EST" and "force_est" not in nets:
            raise HarnessError("LEARNED_EST requires a checkpoint with a force estimator")
        if controller == "LEARNED_NO_EST" and "force_est" in nets:
            raise HarnessError("LEARNED_NO_EST expects a no-est checkpoint")
    n_steps = 250
    command = CommandVelocity(0.5, 0.0, 0.0)
    records = []
    for lo in range(0, trials, chunk):
        hi = min(lo + chunk, trials)
        batch = _TrialBatch(cfg, nets, hi - lo, use_force_est=(controller == "LEARNED_EST"))
        pushes = []
        specs = []
        for trial in range(lo, hi):
            spec = sample_tolerance_push(make_rng(seed, "ftol", trial), cfg.mass_kg)
            specs.append(spec)
            pushes.append([PushEvent(spec["fx"], spec["fy"], spec["start_t"],
                                     spec["duration"], PushRegime.DIRECTIONAL_LARGE)])
        batch.reset([command] * (hi - lo), pushes)
        fell = np.zeros(hi - lo, dtype=bool)
        final = np.zeros((hi - lo, 2))
        for i, p in enumerate(batch.plants):
            final[i] = (p.state.pose.x, p.state.pose.y)
        for _ in range(n_steps):
            results = batch.step()
            for i, res in enumerate(results):
                if res is None:
                    continue
                final[i] = (batch.plants[i].state.pose.x, batch.plants[i].state.pose.y)
                if res.terminated:
                    fell[i] = True
            if not batch.active.any():
                break
        for i, trial in enumerate(range(lo, hi)):
            drift = math.hypot(final[i, 0] - 2.5, final[i, 1] - 0.0)
            records.append({
                "trial": trial, "controller": controller, "push": specs[i],
                "fell": bool(fell[i]), "drift": drift,
                "final": [float(final[i, 0]), float(final[i, 1])],
            })
    report = compute_tolerance_metrics(records)
    report["metadata"] = {
        "protocol": "force_tolerance", "controller": controller, "trials": trials,
        "seed": seed, "config_hash": cfg.config_hash,
        "ckpt_iteration": meta.get("iteration"), "command": [0.5, 0.0, 0.0],
        "duration_s": 5.0, "force_range_n": [25.0, 100.0],
        "push_duration_range_s": [0.25, 0.5], "mass_kg": cfg.mass_kg,
    }
    return report, records


def compute_tolerance_metrics(records) -> dict:
    if not records:
        raise HarnessError("empty trial set")
    fell = np.array([r["fell"] for r in records])
    drift = np.array([r["drift"] for r in records])
    return {
        "protocol": "force_tolerance",
        "controller": records[0]["controller"],
        "trials": len(records),
        "proportion_fell": float(fell.mean()),
        "drift_mean": float(drift.mean()),
        "drift_std": float(drift.std()),
    }


# -- estimator evaluation (LEFT/RIGHT/NONE accuracy vs push magnitude) ------


def run_estimator_eval(ckpt_path, fy_mag: float, trials: int = 1000,
                       seed: int = 0, baseline: str = "FULL_STATE",
                       sim_cfg: SimConfig | None = None, chunk: int = 500):
    """150-step trials at 0.5 m/s forward; one push per trial with the
    x-impulse drawn from [-50, 50] N (Newton-converted) and the y-component
    at the given magnitude with random sign. The detector is queried every
    25 steps (six queries per trial)."""
    if fy_mag <= 0:
        raise HarnessError("push magnitude must be positive")
    if baseline not in ("FULL_STATE", "ONLY_VEL"):
        raise HarnessError(f"unknown baseline {baseline!r}")
    both = _estimator_eval_pass(ckpt_path, fy_mag, trials, seed, sim_cfg, chunk)
    return both[baseline]


def _estimator_eval_pass(ckpt_path, fy_mag, trials, seed, sim_cfg, chunk=500):
    base = sim_cfg or SimConfig()
    cfg = with_overrides(base, seed=seed, episode_max_s=3.2)
    nets, meta = load_policy_nets(ckpt_path)
    if "force_est" not in nets:
        raise HarnessError("estimator eval requires a force-estimator checkpoint")
    only_vel = nets.get("only_vel_est")
    n_steps = 150
    command = CommandVelocity(0.5, 0.0, 0.0)
    records = {"FULL_STATE": [], "ONLY_VEL": []}
    for lo in range(0, trials, chunk):
        hi = min(lo + chunk, trials)
        m = hi - lo
        batch = _TrialBatch(cfg, nets, m, use_force_est=True)
        pushes, specs = [], []
        for trial in range(lo, hi):
            rng = make_rng(seed, "esteval", trial)
            fx_n = float(rng.uniform(-50.0, 50.0))
            duration = float(rng.uniform(0.24, 0.48))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            start_t = float(rng.uniform(0.6, 2.4))
            dvx = fx_n * duration / cfg.mass_kg
            spec = {"fx_n": fx_n, "dvx": dvx, "fy": sign * fy_mag,
                    "duration": duration, "start_t": start_t}
            specs.append(spec)
            pushes.append([PushEvent(dvx, spec["fy"], start_t, duration,
                                     PushRegime.DIRECTIONAL_LARGE)])
        batch.reset([command] * m, pushes)
        sigs_full = [ForceSignal() for _ in range(m)]
        sigs_ov = [ForceSignal() for _ in range(m)]
        det_full = [TugDetector(FORCE_DETECTOR_PARAMS) for _ in range(m)]
        det_ov = [TugDetector(FORCE_DETECTOR_PARAMS) for _ in range(m)]
        queries_full = [[] for _ in range(m)]
        queries_ov = [[] for _ in range(m)]
        fell = np.zeros(m, dtype=bool)
        ov_hist = np.zeros((m, HISTORY_LEN, ONLY_VEL_IN_DIM))
        for step in range(1, n_steps + 1):
            results = batch.step()
            act_idx = [i for i, r in enumerate(results) if r is not None]
            if act_idx:
                ov_hist[act_idx, :-1] = ov_hist[act_idx, 1:]
                for i in act_idx:
                    res = results[i]
                    ov_hist[i, -1, :3] = res.obs[0:3]
                    ov_hist[i, -1, 3:] = res.priv_v
                if only_vel is not None:
                    preds = only_vel.forward(ov_hist[act_idx].transpose(0, 2, 1))
                for k, i in enumerate(act_idx):
                    res = results[i]
                    t = batch.plants[i].state.t
                    sigs_full[i].append(t, res.obs[15:18])
                    if only_vel is not None:
                        sigs_ov[i].append(t, preds[k])
                    if res.terminated:
                        fell[i] = True
            if step % 25 == 0:
                for i in range(m):
                    queries_full[i].append(det_full[i].classify(sigs_full[i]).direction.value)
                    if only_vel is not None:
                        queries_ov[i].append(det_ov[i].classify(sigs_ov[i]).direction.value)
        for i, trial in enumerate(range(lo, hi)):
            truth = "LEFT" if specs[i]["fy"] > 0 else "RIGHT"
            for variant, queries in (("FULL_STATE", queries_full[i]),
                                     ("ONLY_VEL", queries_ov[i])):
                if variant == "ONLY_VEL" and only_vel is None:
                    continue
                n_pred = sum(1 for q in queries if q != "NONE")
                correct = truth in queries
                fp = n_pred - (1 if correct else 0)
                records[variant].append({
                    "trial": trial, "variant": variant, "magnitude": fy_mag,
                    "push": specs[i], "truth": truth, "queries": queries,
                    "correct": bool(correct), "fp": int(fp), "fell": bool(fell[i]),
                })
    out = {}
    for variant in ("FULL_STATE", "ONLY_VEL"):
        if not records[variant]:
            continue
        report = compute_estimator_metrics(records[variant])
        report["metadata"] = {
            "protocol": "estimator_eval", "variant": variant, "trials": trials,
            "magnitude": fy_mag, "seed": seed, "config_hash": cfg.config_hash,
            "ckpt_iteration": meta.get("iteration"),
            "queries_per_trial": 6, "fpr_denominator": FPR_NOTE,
            "x_force_range_n": [-50.0, 50.0],
        }
        out[variant] = (report, records[variant])
    return out


def compute_estimator_metrics(records) -> dict:
    """Accuracy and global FPR over completed trials; trials where the
    robot fell are excluded from the denominators (the hardware protocol
    likewise dropped fallen trials) and reported as fell_count."""
    if not records:
        raise HarnessError("empty trial set")
    done = [r for r in records if not r["fell"]]
    fell_count = len(records) - len(done)
    if not done:
        raise HarnessError("all trials fell; no completed trials to score")
    correct = np.array([r["correct"] for r in done])
    fp = np.array([r["fp"] for r in done])
    q = len(records[0]["queries"])
    return {
        "protocol": "estimator_eval",
        "variant": records[0]["variant"],
        "magnitude": records[0]["magnitude"],
        "trials": len(records),
        "completed_trials": len(done),
        "fell_count": fell_count,
        "accuracy": float(correct.mean()),
        "false_positive_rate": float(fp.sum() / (q * len(done))),
    }


# -- detector comparison (estimated force vs raw accelerometer) -------------


def run_detector_comparison(ckpt_path, trials: int = 40, seed: int = 0,
                            sim_cfg: SimConfig | None = None):
    """10 s trials at 0.5 m/s forward: one LEFT tug in the first half, one
    RIGHT tug in the second, with ±30% magnitude/duration jitter standing in
    for human variability. Both pipelines classify the same rollouts."""
    base = sim_cfg or SimConfig()
    cfg = with_overrides(base, seed=seed, episode_max_s=10.4)
    nets, meta = load_policy_nets(ckpt_path)
    if "force_est" not in nets:
        raise HarnessError("detector comparison requires a force-estimator checkpoint")
    n_steps = 500
    half_t = 5.0
    command = CommandVelocity(0.5, 0.0, 0.0)
    batch = _TrialBatch(cfg, nets, trials, use_force_est=True)
    pushes, specs = [], []
    for trial in range(trials):
        rng = make_rng(seed, "detcmp", trial)
        mag_l = 0.5 * (1.0 + rng.uniform(-0.3, 0.3))
        dur_l = 0.3 * (1.0 + rng.uniform(-0.3, 0.3))
        t_l = float(rng.uniform(2.0, 4.0))
        mag_r = 0.5 * (1.0 + rng.uniform(-0.3, 0.3))
        dur_r = 0.3 * (1.0 + rng.uniform(-0.3, 0.3))
        t_r = float(rng.uniform(6.0, 8.5))
        specs.append({"left": {"mag": mag_l, "duration": dur_l, "start_t": t_l},
                      "right": {"mag": mag_r, "duration": dur_r, "start_t": t_r}})
        pushes.append([
            PushEvent(0.0, mag_l, t_l, dur_l, PushRegime.DIRECTIONAL_LARGE),
            PushEvent(0.0, -mag_r, t_r, dur_r, PushRegime.DIRECTIONAL_LARGE),
        ])
    batch.reset([command] * trials, pushes)
    sigs_f = [ForceSignal(capacity=512) for _ in range(trials)]
    sigs_a = [ForceSignal(capacity=512) for _ in range(trials)]
    det_f = [TugDetector(FORCE_DETECTOR_PARAMS) for _ in range(trials)]
    det_a = [TugDetector(ACCEL_DETECTOR_PARAMS) for _ in range(trials)]
    q_f = [[] for _ in range(trials)]
    q_a = [[] for _ in range(trials)]
    for step in range(1, n_steps + 1):
        results = batch.step()
        for i, res in enumerate(results):
            if res is None:
                continue
            t = batch.plants[i].state.t
            sigs_f[i].append(t, res.obs[15:18])
            sigs_a[i].append(t, res.obs[3:6])
        if step % 25 == 0:
            t_now = step * cfg.dt_policy
            for i in range(trials):
                q_f[i].append((t_now, det_f[i].classify(sigs_f[i]).direction.value))
                q_a[i].append((t_now, det_a[i].classify(sigs_a[i]).direction.value))
    records = []
    for i in range(trials):
        rec = {"trial": i, "pushes": specs[i], "queries": len(q_f[i])}
        for which, q in (("force", q_f[i]), ("accel", q_a[i])):
            left_ok = any(d == "LEFT" and t <= half_t for t, d in q)
            right_ok = any(d == "RIGHT" and t > half_t for t, d in q)
            fp = 0
            seen_left = seen_right = False
            for t, d in q:
                if d == "NONE":
                    continue
                if d == "LEFT" and t <= half_t and not seen_left:
                    seen_left = True
                elif d == "RIGHT" and t > half_t and not seen_right:
                    seen_right = True
                else:
                    fp += 1
            rec[which] = {"correct": bool(left_ok and right_ok), "fp": fp,
                          "predictions": [[t, d] for t, d in q if d != "NONE"]}
        records.append(rec)
    report = compute_comparison_metrics(records)
    report["metadata"] = {
        "protocol": "detector_comparison", "trials": trials, "seed": seed,
        "config_hash": cfg.config_hash, "ckpt_iteration": meta.get("iteration"),
        "jitter": 0.3, "tug_magnitude": 0.5, "tug_duration": 0.3,
        "fpr_denominator": "per-trial fraction, averaged over trials",
    }
    return report, records


def compute_comparison_metrics(records) -> dict:
    if not records:
        raise HarnessError("empty trial set")
    out = {"protocol": "detector_comparison", "trials": len(records)}
    for which in ("force", "accel"):
        acc = np.mean([r[which]["correct"] for r in records])
        fpr = np.mean([r[which]["fp"] / r["queries"] for r in records])
        out[which] = {"accuracy": float(acc), "false_positive_rate": float(fpr)}
    return out


# -- post-training evaluation (tracking + velocity-estimator quality) --------


def eval_tracking(ckpt_path, seed: int = 1000, n_envs: int = 64,
                  rounds: int = 3, steps: int = 300, warmup: int = 50,
                  sim_cfg: SimConfig | None = None) -> dict:
    """Disturbance-free command tracking with deterministic (mean) actions;
    commands sampled uniformly per episode. Returns the mean planar
    tracking error and the frozen velocity-estimator MSE."""
    base = sim_cfg or SimConfig()
    cfg = with_overrides(base, seed=seed)
    nets, meta = load_policy_nets(ckpt_path)
    use_force = "force_est" in nets
    batch = _TrialBatch(cfg, nets, n_envs, use_force_est=use_force)
    errs = []
    v_sq = []
    for rnd in range(rounds):
        batch.reset([None] * n_envs, [[] for _ in range(n_envs)])
        # reset() with command=None samples a fresh uniform command
        for step in range(1, steps + 1):
            results = batch.step()
            for i, res in enumerate(results):
                if res is None:
                    continue
                if step > warmup:
                    c = batch.plants[i].state.command
                    u = batch.plants[i].state.u
                    errs.append(math.hypot(c.cx - u[0], c.cy - u[1]))
                    if nets.get("vel_est") is not None:
                        pred = res.obs[12:15]
                        v_sq.append(float(((pred - res.priv_v) ** 2).mean()))
    return {
        "protocol": "tracking_eval",
        "tracking_err_mean": float(np.mean(errs)),
        "tracking_err_p95": float(np.percentile(errs, 95)),
        "vel_est_mse": float(np.mean(v_sq)) if v_sq else None,
        "n_envs": n_envs, "rounds": rounds, "steps": steps, "warmup": warmup,
        "seed": seed, "config_hash": cfg.config_hash,
        "ckpt_iteration": meta.get("iteration"),
    }


# -- report files ---------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def emit_report(report: dict, records: list, out_dir: str | Path) -> dict:
    """Write report.json + trials.jsonl; returns the file map.

    Raises on an empty trial set. report.json is canonical (sorted keys),
    so recomputing metrics from trials.jsonl reproduces it byte-exactly.
    """
    if not records:
        raise HarnessError("empty trial set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    trials_path = out_dir / "trials.jsonl"
    report_path.write_text(canonical_json(report))
    with open(trials_path, "w") as f:
        for r in records:
            f.write(canonical_json(r).rstrip("\n") + "\n")
    return {"report": report_path, "trials": trials_path}


def recompute_report(out_dir: str | Path) -> bool:
    """Re-derive the metrics from the raw trial log and compare with the
    stored report byte-for-byte (metadata passes through unchanged)."""
    out_dir = Path(out_dir)
    stored_text = (out_dir / "report.json").read_text()
    stored = json.loads(stored_text)
    records = [json.loads(l) for l in (out_dir / "trials.jsonl").read_text().splitlines()]
    proto = stored["protocol"]
    if proto == "force_tolerance":
        fresh = compute_tolerance_metrics(records)
    elif proto == "estimator_eval":
        fresh = compute_estimator_metrics(records)
    elif proto == "detector_comparison":
        fresh = compute_comparison_metrics(records)
    else:
        raise HarnessError(f"unknown protocol {proto!r}")
    fresh["metadata"] = stored.get("metadata")
    return canonical_json(fresh) == stored_text


def write_curves(rows: list[dict], path: str | Path):
    """Plot-ready delimited series (force magnitude vs accuracy/FPR)."""
    path = Path(path)
    cols = ["magnitude", "variant", "seed", "accuracy", "false_positive_rate"]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def aggregate_curves(reports: list[dict]) -> list[dict]:
    """Per-seed rows plus mean/std aggregate rows per (magnitude, variant)."""
    rows = []
    groups: dict = {}
    for rep in reports:
        md = rep["metadata"]
        row = {
            "magnitude": rep["magnitude"], "variant": rep["variant"],
            "seed": md["seed"], "accuracy": rep["accuracy"],
            "false_positive_rate": rep["false_positive_rate"],
        }
        rows.append(row)
        groups.setdefault((rep["magnitude"], rep["variant"]), []).append(row)
    for (mag, variant), rs in sorted(groups.items()):
        acc = np.array([r["accuracy"] for r in rs])
        fpr = np.array([r["false_positive_rate"] for r in rs])
        rows.append({"magnitude": mag, "variant": variant, "seed": "mean",
                     "accuracy": float(acc.mean()),
                     "false_positive_rate": float(fpr.mean())})
        rows.append({"magnitude": mag, "variant": variant, "seed": "std",
                     "accuracy": float(acc.std()),
                     "false_positive_rate": float(fpr.std())})
    return rows
