"""Live interactive session host: steps plant + trained controller +
tug detector + navigation in (scaled) real time, accepts operator tugs,
streams state over a WebSocket, and records/replays sessions.

Wire protocol (version 1): JSON text frames, one envelope per frame:
    {"v": 1, "type": <type>, "seq": <int>, "payload": {...}}
Server -> client types:
    session_info   once on connect: map geometry (grid rows, resolution,
                   origin, waypoints, decision points), config hash,
                   start pose, goal
    state_snapshot 5 Hz: sim_t, pose, u, goal, mode, decision_zone,
                   plan {velocity, poses, stop}, last_tug
    signal_frame   10 Hz, batched: samples [[t, f_hat_y, accel_y], ...]
    event          immediate: kind in {tug_detected, decision_made,
                   approaching_decision, goal_reached, fell}
    warning        reply to malformed/unknown input
Client -> server types:
    tug_input      {"direction": "LEFT"|"RIGHT"}
    control        {"action": "pause"|"resume"|"reset"|"set_speed_scale",
                   "value": <float, for set_speed_scale>}
Sequence numbers increase per connection; events are never dropped,
signal frames are dropped oldest-first under backpressure, and a slow or
dead client never blocks the simulation loop.

Operator tugs are applied as DIRECTIONAL_LARGE pushes (0.5 m/s for 0.3 s),
so they travel the estimation -> peak-detection path exactly like
scheduled training pushes rather than bypassing it.

The session log is line-delimited JSON: {"dir": "out"|"in"|"sim",
"t_wall": ..., "sim_t": ..., "msg"|"record": ...}. Replay re-emits the
recorded outbound stream with original (or scaled) timing, read-only.
"""

from __future__ import annotations

import asyncio
import collections
import json
import os
import time
from pathlib import Path


from .controller import LocomotionController
from .core import CommandVelocity, SimConfig, with_overrides
from .nav import NavSession, load_map
from .nnet import load_checkpoint
from .plant import Plant, PushEvent, PushRegime, step_record
from .tugdetect import (
    ACCEL_DETECTOR_PARAMS,
    FORCE_DETECTOR_PARAMS,
    ForceSignal,
    TugDetector,
    TugDirection,
)

WIRE_VERSION = 1
DEFAULT_PORT = int(os.environ.get("TUGBOT_PORT", "8765"))
SNAPSHOT_EVERY = 10   # policy steps -> 5 Hz
SIGNAL_EVERY = 5      # policy steps -> 10 Hz frames carrying 5 samples
CLASSIFY_EVERY = 25   # policy steps -> 2 Hz
TUG_PUSH_SPEED = 0.5
TUG_PUSH_DURATION = 0.3


class ServiceError(Exception):
    pass


def envelope(msg_type: str, seq: int, payload: dict) -> dict:
    return {"v": WIRE_VERSION, "type": msg_type, "seq": seq, "payload": payload}


class _Client:
    """Per-connection outbound buffers: events/snapshots are never dropped,
    signal frames drop oldest under backpressure."""

    def __init__(self, maxsignal: int = 16):
        self.reliable: collections.deque = collections.deque()
        self.signals: collections.deque = collections.deque(maxlen=maxsignal)
        self.kick = asyncio.Event()

    def put(self, msg: dict):
        if msg["type"] == "signal_frame":
            self.signals.append(msg)
        else:
            self.reliable.append(msg)
        self.kick.set()


class Session:
    """One simulation session; single writer, many watchers."""

    def __init__(self, ckpt_path, map_path, sim_cfg: SimConfig | None = None,
                 time_scale: float = 1.0, seed: int | None = None,
                 log_path: str | Path | None = None, max_sim_s: float | None = None):
        base = sim_cfg or SimConfig()
        if seed is not None:
            base = with_overrides(base, seed=seed)
        self.cfg = with_overrides(base, episode_max_s=float(max_sim_s or 3600.0))
        nets, meta, _ = load_checkpoint(ckpt_path, self.cfg.config_hash)
        self.trunk = nets["policy_trunk"]
        self.controller = LocomotionController(
            nets.get("vel_est"), nets.get("force_est"), 1)
        self.map = load_map(map_path)
        self.nav = NavSession(self.map)
        self.time_scale = time_scale
        self.max_sim_s = max_sim_s
        self.plant = Plant(self.cfg, 0)
        self.force_sig = ForceSignal(capacity=512)
        self.accel_sig = ForceSignal(capacity=512)
        self.detector = TugDetector(FORCE_DETECTOR_PARAMS)
        self.accel_detector = TugDetector(ACCEL_DETECTOR_PARAMS)
        self.mode = "RUNNING"
        self.seq = 0
        self.steps = 0
        self.clients: set[_Client] = set()
        self.inputs: asyncio.Queue = asyncio.Queue()
        self.last_tug: dict | None = None
        self._pending_tug = TugDirection.NONE
        self._log = open(log_path, "w") if log_path else None
        self._t0_wall = time.monotonic()
        self._sig_acc: list[list[float]] = []
        self._start_pose = self.map.start or (0.5, 0.5, 0.0)
        self._reset_plant()

    # -- sim ------------------------------------------------------------

    def _reset_plant(self):
        raw = self.plant.reset(command=CommandVelocity(0, 0, 0), pushes=[])
        s = self.plant.state
        s.pose.x, s.pose.y, s.pose.theta = self._start_pose
        self.controller.reset_all()
        self.obs = self.controller.fill(raw[None, :].copy())
        self.force_sig = ForceSignal(capacity=512)
        self.accel_sig = ForceSignal(capacity=512)
        self.detector.reset()
        self.accel_detector.reset()
        self.nav = NavSession(self.map)
        self.mode = "RUNNING"
        self.last_tug = None
        self._pending_tug = TugDirection.NONE
        self._sig_acc = []

    def _log_line(self, direction: str, obj: dict, key: str = "msg"):
        if self._log is None:
            return
        rec = {"dir": direction, "t_wall": time.monotonic() - self._t0_wall,
               "sim_t": self.plant.t, key: obj}
        self._log.write(json.dumps(rec, sort_keys=True) + "\n")

    def broadcast(self, msg_type: str, payload: dict):
        self.seq += 1
        msg = envelope(msg_type, self.seq, payload)
        self._log_line("out", msg)
        for c in self.clients:
            c.put(msg)

    def emit_event(self, kind: str, detail: dict):
        self.broadcast("event", {"kind": kind, **detail, "sim_t": self.plant.t})

    def session_info_payload(self) -> dict:
        rows = ["".join("#" if v else "." for v in row) for row in self.map.grid]
        return {
            "wire_version": WIRE_VERSION,
            "config_hash": self.cfg.config_hash,
            "obs_version": "v1",
            "map": {
                "resolution": self.map.resolution,
                "origin": list(self.map.origin),
                "rows": rows,
                "waypoints": {n: [w.x, w.y] for n, w in self.map.waypoints.items()},
                "decision_points": [
                    {"name": d.name, "x": d.x, "y": d.y, "radius": d.radius}
                    for d in self.map.decision_points
                ],
            },
            "start": list(self._start_pose),
            "goal": self.nav.goal,
        }

    def apply_input(self, msg: dict):
        mtype = msg.get("type")
        payload = msg.get("payload", {})
        if mtype == "tug_input":
            direction = payload.get("direction")
            if direction not in ("LEFT", "RIGHT"):
                self.broadcast("warning", {"reason": f"bad tug direction {direction!r}"})
                return
            sign = 1.0 if direction == "LEFT" else -1.0
            push = PushEvent(0.0, sign * TUG_PUSH_SPEED, self.plant.t,
                             TUG_PUSH_DURATION, PushRegime.DIRECTIONAL_LARGE)
            self.plant.inject_push(push)
            self._log_line("sim", {"kind": "push_applied", "push": push.as_dict(),
                                   "source": "operator"}, key="record")
        elif mtype == "control":
            action = payload.get("action")
            if action == "pause":
                self.mode = "PAUSED"
            elif action == "resume":
                if self.mode in ("PAUSED", "GOAL_REACHED"):
                    self.mode = "RUNNING"
            elif action == "reset":
                self._reset_plant()
            elif action == "set_speed_scale":
                try:
                    self.time_scale = max(0.0, float(payload.get("value", 1.0)))
                except (TypeError, ValueError):
                    self.broadcast("warning", {"reason": "bad speed scale"})
            else:
                self.broadcast("warning", {"reason": f"unknown control {action!r}"})
        else:
            self.broadcast("warning", {"reason": f"unknown message type {mtype!r}"})

    def step_once(self):
        """One policy-rate tick of nav -> controller -> plant -> detection."""
        if self.mode in ("PAUSED", "FELL"):
            return
        plant = self.plant
        pose = (plant.state.pose.x, plant.state.pose.y, plant.state.pose.theta)
        u = tuple(plant.state.u)
        tug = self._pending_tug
        self._pending_tug = TugDirection.NONE
        cmd, plan, nav_events = self.nav.tick(pose, u, tug)
        for e in nav_events:
            kind = e.pop("kind")
            if kind == "goal_reached":
                self.mode = "GOAL_REACHED"
            if kind != "tug_ignored":
                self.emit_event(kind, e)
            else:
                self._log_line("sim", {"kind": "tug_ignored", **e}, key="record")
        plant.state.command = cmd

        action = self.trunk.forward(self.obs)[0]
        res = plant.step(action)
        self.obs = self.controller.fill(res.obs[None, :].copy())
        self.steps += 1
        t = plant.t
        fhat = self.obs[0, 15:18]
        accel = self.obs[0, 3:6]
        self.force_sig.append(t, fhat)
        self.accel_sig.append(t, accel)
        self._sig_acc.append([round(t, 4), float(fhat[1]), float(accel[1])])
        self._log_line("sim", step_record(plant, action, res), key="record")

        if res.terminated:
            self.mode = "FELL"
            self.emit_event("fell", {})
        if res.truncated:
            self.mode = "PAUSED"

        if self.steps % CLASSIFY_EVERY == 0:
            ev = self.detector.classify(self.force_sig)
            self.accel_detector.classify(self.accel_sig)  # kept warm for UI parity
            if ev.direction is not TugDirection.NONE:
                self._pending_tug = ev.direction
                self.last_tug = {"direction": ev.direction.value,
                                 "peak_t": ev.peak_t, "peak_value": ev.peak_value}
                self.emit_event("tug_detected", self.last_tug)

        if self.steps % SIGNAL_EVERY == 0:
            self.broadcast("signal_frame", {"samples": self._sig_acc})
            self._sig_acc = []
        if self.steps % SNAPSHOT_EVERY == 0:
            self.broadcast("state_snapshot", self.snapshot_payload(plan))

    def snapshot_payload(self, plan=None) -> dict:
        plant = self.plant
        plan = plan if plan is not None else self.nav.last_plan
        dp = self.map.decision_at(plant.state.pose.x, plant.state.pose.y)
        return {
            "sim_t": round(plant.t, 4),
            "pose": [plant.state.pose.x, plant.state.pose.y, plant.state.pose.theta],
            "u": [float(v) for v in plant.state.u],
            "goal": self.nav.goal,
            "mode": self.mode,
            "decision_zone": dp.name if dp else None,
            "plan": None if plan is None else {
                "velocity": [float(v) for v in plan.velocity],
                "poses": [[round(p[0], 3), round(p[1], 3)] for p in plan.poses[::3]],
                "stop": plan.stop,
            },
            "last_tug": self.last_tug,
        }

    async def run(self):
        """Paced stepping; time_scale <= 0 runs unpaced (tests)."""
        dt = self.cfg.dt_policy
        next_t = time.monotonic()
        while True:
            while not self.inputs.empty():
                msg = self.inputs.get_nowait()
                self.apply_input(msg)
            self.step_once()
            if self.max_sim_s is not None and self.plant.t >= self.max_sim_s:
                self.broadcast("event", {"kind": "session_end", "sim_t": self.plant.t})
                break
            if self.time_scale > 0:
                next_t += dt / self.time_scale
                delay = next_t - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    # behind schedule: drop the deficit but keep yielding so
                    # client handlers are never starved
                    next_t = time.monotonic()
                    await asyncio.sleep(0)
            elif self.steps % 50 == 0:
                await asyncio.sleep(0)
        self.close()

    def close(self):
        if self._log:
            self._log.flush()
            self._log.close()
            self._log = None


async def _client_sender(ws, client: _Client):
    while True:
        await client.kick.wait()
        client.kick.clear()
        while client.reliable or client.signals:
            msg = client.reliable.popleft() if client.reliable else client.signals.popleft()
            await ws.send(json.dumps(msg, sort_keys=True))


async def serve_session(session: Session, host: str = "127.0.0.1",
                        port: int = DEFAULT_PORT):
    """Run the session and a WebSocket fanout until the session ends."""
    import websockets

    async def handler(ws):
        client = _Client()
        session.clients.add(client)
        try:
            await ws.send(json.dumps(
                envelope("session_info", 0, session.session_info_payload()),
                sort_keys=True))
            sender = asyncio.create_task(_client_sender(ws, client))
            try:
                async for raw in ws:
                    try:
                        msg = json.loads(raw)
                        if not isinstance(msg, dict) or "type" not in msg:
                            raise ValueError("not an envelope")
                    except (json.JSONDecodeError, ValueError) as exc:
                        client.put(envelope("warning", 0, {"reason": str(exc)}))
                        continue
                    session._log_line("in", msg)
                    await session.inputs.put(msg)
            finally:
                sender.cancel()
        finally:
            session.clients.discard(client)

    async with websockets.serve(handler, host, port):
        await session.run()


def run_session(ckpt_path, map_path, port: int = DEFAULT_PORT,
                time_scale: float = 1.0, seed: int | None = None,
                sim_cfg: SimConfig | None = None, log_path=None,
                max_sim_s: float | None = None, host: str = "127.0.0.1"):
    """Blocking entry point used by the CLI `serve` subcommand."""
    session = Session(ckpt_path, map_path, sim_cfg=sim_cfg, time_scale=time_scale,
                      seed=seed, log_path=log_path, max_sim_s=max_sim_s)
    asyncio.run(serve_session(session, host, port))


# -- record / replay --------------------------------------------------------


def read_session_log(log_path):
    """Parse a session log; skips corrupt lines. Returns (records, n_corrupt)."""
    records = []
    corrupt = 0
    for line in Path(log_path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if "dir" not in rec:
                raise ValueError("missing dir")
            records.append(rec)
        except (json.JSONDecodeError, ValueError):
            corrupt += 1
    return records, corrupt


def replay_messages(log_path, speed: float = 1.0):
    """Yield (delay_s, envelope) for the recorded outbound stream with
    original timing scaled by `speed`. Read-only."""
    records, corrupt = read_session_log(log_path)
    out = [r for r in records if r["dir"] == "out"]
    prev = None
    for rec in out:
        delay = 0.0 if prev is None else max(0.0, (rec["t_wall"] - prev) / speed)
        prev = rec["t_wall"]
        yield delay, rec["msg"]
    return


async def serve_replay(log_path, host: str = "127.0.0.1",
                       port: int = DEFAULT_PORT, speed: float = 1.0):
    """Replay a recorded session to connecting clients."""
    import websockets

    records, corrupt = read_session_log(log_path)
    if corrupt:
        print(f"replay: skipped {corrupt} corrupt line(s)")
    out = [r for r in records if r["dir"] == "out"]

    async def handler(ws):
        prev = None
        for rec in out:
            if prev is not None:
                await asyncio.sleep(max(0.0, (rec["t_wall"] - prev) / speed))
            prev = rec["t_wall"]
            await ws.send(json.dumps(rec["msg"], sort_keys=True))

    async with websockets.serve(handler, host, port):
        await asyncio.Future()


def run_replay(log_path, port: int = DEFAULT_PORT, time_scale: float = 1.0,
               host: str = "127.0.0.1"):
    try:
        asyncio.run(serve_replay(log_path, host, port, speed=time_scale))
    except KeyboardInterrupt:
        pass
