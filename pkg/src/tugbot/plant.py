"""Planar rigid-body robot plant with PD actuation, pushes, and rewards.

The robot is a planar (x, y, yaw) rigid body. Actions are target body
velocities in [-1, 1] per axis, converted to a wrench by the same PD form a
joint-space controller would use: w = kp * (a * v_limit - u) - kd * udot,
saturated at the peak actuator limits. The dynamics integrate
M * udot = w - damping * u + noise semi-implicitly at physics_hz, with
policy_hz observations and rewards. The effort penalty prices the wrench
up to the continuous rating (rated_wrench_n / rated_torque_nm); peak
transients above the rating cost the same as the rating.

Pushes are spontaneous base-velocity updates: while a push window is
active, (vx, vy) is overwritten with the push vector at every substep
(or added once at window start in the optional additive mode). Two regimes
exist: BACKWARD_SMALL leash drag (frequent, never labeled) and
DIRECTIONAL_LARGE tugs (infrequent, any direction, the only labeled
regime; DIRECTIONAL_LARGE wins during overlap).

Acceleration channel: udot is defined by the dynamics equation; a push
overwrite rewrites u only, never udot. The accelerometer observation is
the (noisy) dynamics acceleration, so held-velocity pushes appear through
the controller's counter-reaction rather than as one-sample jumps.

Observation layout (version v1, fixed order, 18 values):
    [0:3]   c          commanded velocity (cx, cy, cw)
    [3:6]   vdot_meas  noisy accelerometer (ax, ay, alpha)
    [6:9]   prop_v     noisy proprioceptive body velocity (vx, vy, w)
    [9:12]  a_prev     previous action
    [12:15] v_hat      velocity-estimator output (zeros when disabled)
    [15:18] F_hat      force-estimator output (zeros when disabled)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CommandVelocity,
    ContractViolation,
    Pose2,
    SimConfig,
    make_rng,
    sample_command,
    wrap_angle,
)

OBS_VERSION = "v1"
OBS_DIM = 18
OBS_C = slice(0, 3)
OBS_VDOT = slice(3, 6)
OBS_PROP = slice(6, 9)
OBS_APREV = slice(9, 12)
OBS_VHAT = slice(12, 15)
OBS_FHAT = slice(15, 18)
# estimator input views
OBS_VEL_EST_IN = slice(0, 12)    # everything except v_hat / F_hat
OBS_FORCE_EST_IN = slice(0, 15)  # everything except F_hat
VEL_EST_IN_DIM = 12
FORCE_EST_IN_DIM = 15

REWARD_TERM_NAMES = (
    "linear_velocity_xy",
    "linear_velocity_z",
    "angular_velocity_xy",
    "angular_velocity_z",
    "joint_torques",
    "joint_accelerations",
    "feet_air_time",
    "action_rate",
)


class PushRegime(enum.Enum):
    BACKWARD_SMALL = "backward_small"
    DIRECTIONAL_LARGE = "directional_large"


@dataclass(frozen=True)
class PushEvent:
    """One external force episode, body frame, velocity-impulse units."""

    fx: float
    fy: float
    start_t: float
    duration: float
    regime: PushRegime

    def as_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "start_t": self.start_t,
            "duration": self.duration,
            "regime": self.regime.value,
        }


def schedule_pushes(cfg: SimConfig, rng: np.random.Generator, horizon_s: float) -> list[PushEvent]:
    """Both regimes on their periodic grids, starting at one period.

    BACKWARD_SMALL at t = k * push_small_period_s with fixed vector
    (-push_small_speed_ms, 0); DIRECTIONAL_LARGE at t = k * push_large_period_s
    with duration ~ U[lo, hi] and components ~ U[-mag, mag]. The two
    schedules may overlap; DIRECTIONAL_LARGE wins at application time.
    """
    events = []
    t = cfg.push_small_period_s
    while t < horizon_s:
        events.append(
            PushEvent(-cfg.push_small_speed_ms, 0.0, t, cfg.push_small_duration_s,
                      PushRegime.BACKWARD_SMALL)
        )
        t += cfg.push_small_period_s
    t = cfg.push_large_period_s
    while t < horizon_s:
        dur = float(rng.uniform(cfg.push_large_duration_lo_s, cfg.push_large_duration_hi_s))
        fx = float(rng.uniform(-cfg.push_large_mag_ms, cfg.push_large_mag_ms))
        fy = float(rng.uniform(-cfg.push_large_mag_ms, cfg.push_large_mag_ms))
        events.append(PushEvent(fx, fy, t, dur, PushRegime.DIRECTIONAL_LARGE))
        t += cfg.push_large_period_s
    return sorted(events, key=lambda e: e.start_t)


def reward_terms(c, u_after, wrench, udot_prev, udot, a_prev, a, dt) -> dict[str, float]:
    """Per-term reward breakdown; adapted reward table of the planar plant.

    The planar plant has no vertical velocity, no roll/pitch rates, and no
    feet, so linear_velocity_z, angular_velocity_xy, and feet_air_time are
    emitted as named zeros to keep the breakdown schema complete.
    """
    err_lin = (c[0] - u_after[0]) ** 2 + (c[1] - u_after[1]) ** 2
    err_ang = (c[2] - u_after[2]) ** 2
    jerk = ((udot_prev[0] - udot[0]) / dt) ** 2 + ((udot_prev[1] - udot[1]) / dt) ** 2 \
        + ((udot_prev[2] - udot[2]) / dt) ** 2
    terms = {
        "linear_velocity_xy": math.exp(-err_lin / 0.25) * 1.0 * dt,
        "linear_velocity_z": 0.0,
        "angular_velocity_xy": 0.0,
        "angular_velocity_z": math.exp(-err_ang / 0.25) * 0.5 * dt,
        "joint_torques": -0.0002 * dt * (wrench[0] ** 2 + wrench[1] ** 2 + wrench[2] ** 2),
        "joint_accelerations": -2.5e-7 * dt * jerk,
        "feet_air_time": 0.0,
        "action_rate": -0.01 * dt * ((a_prev[0] - a[0]) ** 2 + (a_prev[1] - a[1]) ** 2
                                     + (a_prev[2] - a[2]) ** 2),
    }
    return terms


def fall_check(u, c, err_hold_s: float, cfg: SimConfig) -> bool:
    """Fall proxy: planar overspeed, or tracking error held too long.

    Both comparisons are strict: err_hold_s must exceed fall_err_hold_s.
    """
    if math.hypot(u[0], u[1]) > cfg.fall_speed_ms:
        return True
    return err_hold_s > cfg.fall_err_hold_s


@dataclass
class PlantState:
    pose: Pose2
    u: np.ndarray          # body velocity (vx, vy, w)
    udot: np.ndarray       # dynamics acceleration at the last substep
    a_prev: np.ndarray     # previous action
    damping: np.ndarray    # per-axis drag, randomized per episode
    t: float               # seconds since episode start
    command: CommandVelocity
    err_hold_s: float = 0.0


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    reward_breakdown: dict[str, float] = field(repr=False)
    terminated: bool = False
    truncated: bool = False
    priv_v: np.ndarray = None      # true base velocity (vx, vy, 0)
    priv_f: np.ndarray = None      # active DIRECTIONAL_LARGE vector or zeros


class Plant:
    """One deterministic environment instance; single-threaded by contract."""

    def __init__(self, cfg: SimConfig, env_index: int = 0):
        self.cfg = cfg
        self.env_index = env_index
        self.rng = make_rng(cfg.seed, "env", env_index)
        self.state: PlantState | None = None
        self.episode_pushes: list[PushEvent] = []
        self._terminated = False
        self._truncated = False
        self._steps = 0
        self._sub = 0
        # per-substep push tables, built at reset
        self._ov_mask = None
        self._ov_vx = None
        self._ov_vy = None
        self._ov_start = None
        self._label_fx = None
        self._label_fy = None

    # -- episode control ---------------------------------------------------

    def reset(self, command: CommandVelocity | None = None,
              pushes: list[PushEvent] | None = None,
              randomize_damping: bool = True) -> np.ndarray:
        """Zero the body, re-randomize damping, resample command and pushes.

        `pushes=None` draws the scheduled regimes; pass an explicit list
        (possibly empty) to script an episode. Overridden parts consume no
        random draws.
        """
        cfg = self.cfg
        if randomize_damping:
            scale = self.rng.uniform(cfg.damping_rand_lo, cfg.damping_rand_hi, size=3)
        else:
            scale = np.ones(3)
        damping = np.array([cfg.damping_x, cfg.damping_y, cfg.damping_w]) * scale
        if command is None:
            command = sample_command(self.rng)
        if pushes is None:
            pushes = schedule_pushes(cfg, self.rng, cfg.episode_max_s)
        self.episode_pushes = pushes
        self.state = PlantState(
            pose=Pose2(), u=np.zeros(3), udot=np.zeros(3), a_prev=np.zeros(3),
            damping=damping, t=0.0, command=command,
        )
        self._terminated = False
        self._truncated = False
        self._steps = 0
        self._sub = 0
        self._build_push_tables()
        return self._make_obs(np.zeros(3))

    def _build_push_tables(self):
        cfg = self.cfg
        n = int(round(cfg.episode_max_s * cfg.physics_hz)) + cfg.substeps
        self._ov_mask = np.zeros(n, dtype=bool)
        self._ov_vx = np.zeros(n)
        self._ov_vy = np.zeros(n)
        self._ov_start = np.zeros(n, dtype=bool)
        self._label_fx = np.zeros(n)
        self._label_fy = np.zeros(n)
        small = [e for e in self.episode_pushes if e.regime is PushRegime.BACKWARD_SMALL]
        large = [e for e in self.episode_pushes if e.regime is PushRegime.DIRECTIONAL_LARGE]
        # smalls first so larges win on overlap
        for e in small + large:
            i0 = int(round(e.start_t * cfg.physics_hz))
            i1 = i0 + max(1, int(round(e.duration * cfg.physics_hz)))
            if i0 >= n:
                continue
            i1 = min(i1, n)
            self._ov_mask[i0:i1] = True
            self._ov_vx[i0:i1] = e.fx
            self._ov_vy[i0:i1] = e.fy
            self._ov_start[i0] = True
            if e.regime is PushRegime.DIRECTIONAL_LARGE:
                self._label_fx[i0:i1] = e.fx
                self._label_fy[i0:i1] = e.fy

    # -- stepping ----------------------------------------------------------

    def step(self, action) -> StepResult:
        """Advance one policy step (cfg.substeps physics substeps)."""
        if self.state is None:
            raise ContractViolation("step() before reset()")
        if self._terminated or self._truncated:
            raise ContractViolation(
                f"env {self.env_index}: step() after episode end without reset()"
            )
        cfg = self.cfg
        s = self.state
        S = cfg.substeps
        dtp = cfg.dt_physics
        a0 = min(1.0, max(-1.0, float(action[0])))
        a1 = min(1.0, max(-1.0, float(action[1])))
        a2 = min(1.0, max(-1.0, float(action[2])))
        a = (a0, a1, a2)
        ax_t = a0 * cfg.v_limit
        ay_t = a1 * cfg.v_limit
        aw_t = a2 * cfg.v_limit

        draws = self.rng.standard_normal(3 * S + 6)
        kp, kd = cfg.kp, cfg.kd
        m, iw = cfg.mass_kg, cfg.inertia_kgm2
        mx = m + kd
        my = m + kd
        mw = iw + kd
        wcap = cfg.wrench_limit_n
        tcap = cfg.torque_limit_nm
        dx, dy, dw = s.damping
        sig = cfg.process_noise_n
        ux, uy, uw = s.u
        px, py, pth = s.pose.x, s.pose.y, s.pose.theta
        udx = udy = udw = 0.0
        wx = wy = ww = 0.0
        additive = cfg.push_additive
        ov_mask, ov_vx, ov_vy = self._ov_mask, self._ov_vx, self._ov_vy
        ov_start = self._ov_start
        j = self._sub
        for k in range(S):
            nx = draws[3 * k] * sig
            ny = draws[3 * k + 1] * sig
            nw = draws[3 * k + 2] * sig
            # implicit in udot: M*udot = kp*(target-u) - kd*udot - damping*u + n;
            # the actuator saturates at the configured wrench limits, in which
            # case the capped output drives M*udot = w - damping*u + n directly
            udx = (kp * (ax_t - ux) - dx * ux + nx) / mx
            wx = kp * (ax_t - ux) - kd * udx
            if wx > wcap or wx < -wcap:
                wx = wcap if wx > 0 else -wcap
                udx = (wx - dx * ux + nx) / m
            udy = (kp * (ay_t - uy) - dy * uy + ny) / my
            wy = kp * (ay_t - uy) - kd * udy
            if wy > wcap or wy < -wcap:
                wy = wcap if wy > 0 else -wcap
                udy = (wy - dy * uy + ny) / m
            udw = (kp * (aw_t - uw) - dw * uw + nw) / mw
            ww = kp * (aw_t - uw) - kd * udw
            if ww > tcap or ww < -tcap:
                ww = tcap if ww > 0 else -tcap
                udw = (ww - dw * uw + nw) / iw
            ux += udx * dtp
            uy += udy * dtp
            uw += udw * dtp
            if ov_mask[j]:
                if additive:
                    if ov_start[j]:
                        ux += ov_vx[j]
                        uy += ov_vy[j]
                else:
                    ux = ov_vx[j]
                    uy = ov_vy[j]
                    # the overwrite discards the actuator's effect on x/y, so
                    # no effective actuation wrench is applied on those axes
                    # (keeps the effort penalty from rewarding push imitation)
                    wx = 0.0
                    wy = 0.0
            pth = wrap_angle(pth + uw * dtp)
            cth = math.cos(pth)
            sth = math.sin(pth)
            px += (ux * cth - uy * sth) * dtp
            py += (ux * sth + uy * cth) * dtp
            j += 1
        self._sub = j
        self._steps += 1

        c = s.command
        udot_prev = s.udot
        udot = np.array([udx, udy, udw])
        u = np.array([ux, uy, uw])
        # the effort penalty prices actuation up to the continuous rating;
        # peak transients above it cost the same as the rating itself
        rw, rt = cfg.rated_wrench_n, cfg.rated_torque_nm
        wrench = (
            min(rw, max(-rw, wx)),
            min(rw, max(-rw, wy)),
            min(rt, max(-rt, ww)),
        )
        terms = reward_terms(
            (c.cx, c.cy, c.cw), u, wrench, udot_prev, udot, s.a_prev, a, cfg.dt_policy
        )
        reward = math.fsum(terms.values())

        s.pose = Pose2(px, py, pth)
        s.u = u
        s.udot = udot
        s.a_prev = a
        s.t = self._steps * cfg.dt_policy

        err = math.hypot(c.cx - ux, c.cy - uy)
        if err > cfg.fall_err_ms:
            s.err_hold_s += cfg.dt_policy
        else:
            s.err_hold_s = 0.0
        terminated = fall_check(u, (c.cx, c.cy, c.cw), s.err_hold_s, cfg)
        truncated = (not terminated) and s.t >= cfg.episode_max_s
        self._terminated = terminated
        self._truncated = truncated

        # label reflects the final substep of this policy step
        lf = j - 1
        priv_f = np.array([self._label_fx[lf], self._label_fy[lf], 0.0])
        priv_v = np.array([ux, uy, 0.0])

        obs = self._make_obs(a, draws[3 * S:])
        return StepResult(
            obs=obs, reward=reward, reward_breakdown=terms,
            terminated=terminated, truncated=truncated,
            priv_v=priv_v, priv_f=priv_f,
        )

    def _make_obs(self, a_prev, sensor_draws=None) -> np.ndarray:
        cfg = self.cfg
        s = self.state
        if sensor_draws is None:
            sensor_draws = self.rng.standard_normal(6)
        obs = np.zeros(OBS_DIM)
        obs[OBS_C] = (s.command.cx, s.command.cy, s.command.cw)
        obs[OBS_VDOT] = s.udot + sensor_draws[:3] * cfg.accel_noise_std
        obs[OBS_PROP] = s.u + sensor_draws[3:] * cfg.prop_noise_std
        obs[OBS_APREV] = a_prev
        return obs

    # -- introspection -----------------------------------------------------

    @property
    def done(self) -> bool:
        return self._terminated or self._truncated

    @property
    def t(self) -> float:
        return 0.0 if self.state is None else self.state.t

    def active_push(self) -> tuple[float, float] | None:
        """Overwrite vector at the most recent substep, or None."""
        j = max(self._sub - 1, 0)
        if self._ov_mask is None or not self._ov_mask[j]:
            return None
        return (self._ov_vx[j], self._ov_vy[j])

    def inject_push(self, event: PushEvent):
        """Splice a push into the live episode (operator tugs in sessions)."""
        cfg = self.cfg
        i0 = int(round(event.start_t * cfg.physics_hz))
        i1 = i0 + max(1, int(round(event.duration * cfg.physics_hz)))
        n = len(self._ov_mask)
        if i0 >= n:
            return
        i1 = min(i1, n)
        self._ov_mask[i0:i1] = True
        self._ov_vx[i0:i1] = event.fx
        self._ov_vy[i0:i1] = event.fy
        self._ov_start[i0] = True
        if event.regime is PushRegime.DIRECTIONAL_LARGE:
            self._label_fx[i0:i1] = event.fx
            self._label_fy[i0:i1] = event.fy
        self.episode_pushes.append(event)


def step_record(plant: Plant, action, result: StepResult) -> dict:
    """One line-delimited trace record per policy step."""
    s = plant.state
    return {
        "t": round(s.t, 9),
        "pose": [s.pose.x, s.pose.y, s.pose.theta],
        "u": list(map(float, s.u)),
        "action": list(map(float, np.asarray(action, dtype=float))),
        "reward": result.reward,
        "reward_breakdown": {k: v for k, v in result.reward_breakdown.items()},
        "push_label": list(map(float, result.priv_f)),
        "terminated": result.terminated,
        "truncated": result.truncated,
    }
