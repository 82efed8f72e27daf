"""Command-line interface.

Subcommands: train, eval force-tolerance, eval estimator,
eval detector-comparison, eval tracking, serve, replay.
Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
Units: velocities m/s (yaw rad/s), forces N, durations s, magnitudes in
velocity-impulse units (m/s).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import ConfigError, SimConfig, load_config, with_overrides
from .service import DEFAULT_PORT

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _sim_cfg(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    if getattr(args, "seed", None) is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tugbot",
        description="Tug-guided planar robot: training, evaluation, live sessions.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="co-train policy and estimators")
    tr.add_argument("--config", help="sim config file (key = value lines)")
    tr.add_argument("--seed", type=int, help="root seed (overrides config)")
    tr.add_argument("--out", required=True, help="run directory for checkpoints/metrics")
    tr.add_argument("--envs", type=int, default=256, help="parallel environments")
    tr.add_argument("--iterations", type=int, default=2000, help="training iterations")
    tr.add_argument("--no-force-est", action="store_true",
                    help="train the 'Learned No Est' variant (force estimator disabled)")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--progress", action="store_true", help="print progress lines")

    ev = sub.add_parser("eval", help="run a scripted experiment")
    evsub = ev.add_subparsers(dest="protocol", required=True)

    ft = evsub.add_parser("force-tolerance", help="pushes at 25-100 N while walking")
    ft.add_argument("--ckpt", help="checkpoint (not needed for feedforward)")
    ft.add_argument("--controller", default="learned-est",
                    choices=["feedforward", "learned-no-est", "learned-est"])
    ft.add_argument("--trials", type=int, default=1000)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--config", help="sim config file")
    ft.add_argument("--out", required=True, help="report directory")

    es = evsub.add_parser("estimator", help="LEFT/RIGHT/NONE detection accuracy")
    es.add_argument("--ckpt", required=True)
    es.add_argument("--force-mag", type=float, required=True,
                    help="lateral push magnitude, velocity-impulse m/s")
    es.add_argument("--trials", type=int, default=1000)
    es.add_argument("--seed", type=int, default=0)
    es.add_argument("--baseline", default="FULL_STATE",
                    choices=["FULL_STATE", "ONLY_VEL", "BOTH"])
    es.add_argument("--config")
    es.add_argument("--out", required=True)

    dc = evsub.add_parser("detector-comparison",
                          help="estimated force vs raw accelerometer pipelines")
    dc.add_argument("--ckpt", required=True)
    dc.add_argument("--trials", type=int, default=40)
    dc.add_argument("--seed", type=int, default=0)
    dc.add_argument("--config")
    dc.add_argument("--out", required=True)

    tk = evsub.add_parser("tracking", help="disturbance-free command tracking")
    tk.add_argument("--ckpt", required=True)
    tk.add_argument("--seed", type=int, default=1000)
    tk.add_argument("--config")
    tk.add_argument("--out", required=True)

    sv = sub.add_parser("serve", help="run a live interactive session")
    sv.add_argument("--ckpt", required=True)
    sv.add_argument("--map", required=True, help="map file (see nav docs)")
    sv.add_argument("--port", type=int, default=DEFAULT_PORT,
                    help="WebSocket port (env TUGBOT_PORT)")
    sv.add_argument("--time-scale", type=float, default=1.0,
                    help="sim speed multiple; <= 0 runs unpaced")
    sv.add_argument("--seed", type=int)
    sv.add_argument("--config")
    sv.add_argument("--log", help="session log path (JSONL)")
    sv.add_argument("--max-sim-s", type=float, help="stop after this much sim time")

    rp = sub.add_parser("replay", help="replay a recorded session log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--port", type=int, default=DEFAULT_PORT)
    rp.add_argument("--time-scale", type=float, default=1.0)
    return p


def _cmd_train(args) -> int:
    from .training import TrainConfig, Trainer

    if args.envs < 1:
        print("train: --envs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _sim_cfg(args)
    tcfg = TrainConfig(n_envs=args.envs, total_iterations=args.iterations,
                       use_force_est=not args.no_force_est,
                       train_only_vel=not args.no_force_est)
    out = Path(args.out)
    trainer = Trainer(cfg, tcfg, out, resume_from=args.resume)
    trainer.run(args.iterations, progress=args.progress)
    final = out / "ckpt_final.tbck"
    trainer.save(final)
    print(f"checkpoint: {final}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import harness

    out = Path(args.out)
    if args.protocol == "force-tolerance":
        controller = args.controller.replace("-", "_").upper()
        cfg = _sim_cfg(args) if args.config else None
        report, records = harness.run_force_tolerance(
            args.ckpt, controller, trials=args.trials, seed=args.seed, sim_cfg=cfg)
        harness.emit_report(report, records, out)
    elif args.protocol == "estimator":
        cfg = _sim_cfg(args) if args.config else None
        variants = ["FULL_STATE", "ONLY_VEL"] if args.baseline == "BOTH" \
            else [args.baseline]
        both = harness._estimator_eval_pass(
            args.ckpt, args.force_mag, args.trials, args.seed, cfg)
        for variant in variants:
            if variant not in both:
                print(f"estimator: {variant} head missing in checkpoint",
                      file=sys.stderr)
                return EXIT_CONFIG
            report, records = both[variant]
            harness.emit_report(report, records, out / variant.lower())
            print(json.dumps({k: report[k] for k in
                              ("variant", "magnitude", "accuracy",
                               "false_positive_rate")}))
    elif args.protocol == "detector-comparison":
        cfg = _sim_cfg(args) if args.config else None
        report, records = harness.run_detector_comparison(
            args.ckpt, trials=args.trials, seed=args.seed, sim_cfg=cfg)
        harness.emit_report(report, records, out)
        print(json.dumps({"force": report["force"], "accel": report["accel"]}))
    elif args.protocol == "tracking":
        cfg = _sim_cfg(args) if args.config else None
        report = harness.eval_tracking(args.ckpt, seed=args.seed, sim_cfg=cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tracking.json").write_text(harness.canonical_json(report))
        print(json.dumps({k: report[k] for k in
                          ("tracking_err_mean", "vel_est_mse")}))
    else:  # pragma: no cover
        return EXIT_CONFIG
    if args.protocol == "force-tolerance":
        print(json.dumps({k: report[k] for k in
                          ("controller", "proportion_fell", "drift_mean")}))
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .service import run_session

    cfg = _sim_cfg(args) if args.config else None
    run_session(args.ckpt, args.map, port=args.port, time_scale=args.time_scale,
                seed=args.seed, sim_cfg=cfg, log_path=args.log,
                max_sim_s=args.max_sim_s)
    return EXIT_OK


def _cmd_replay(args) -> int:
    from .service import run_replay

    if not Path(args.log).is_file():
        print(f"replay: log not found: {args.log}", file=sys.stderr)
        return EXIT_CONFIG
    run_replay(args.log, port=args.port, time_scale=args.time_scale)
    return EXIT_OK


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "replay":
            return _cmd_replay(args)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # runtime failures map to exit 3
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
