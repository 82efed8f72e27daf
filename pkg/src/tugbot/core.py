"""Shared domain types, units, config loading, and seeded random streams.

Frames and units
----------------
World frame: x east, y north, theta counter-clockwise from +x, wrapped to
(-pi, pi]. Body frame: x forward, y left. Velocity commands, base
velocities, and push vectors are all body-frame. Forces follow the
velocity-impulse convention: a push vector is the base velocity (m/s) it
imposes while active; Newton-specified experiments convert via
dv = F * duration / mass.

Config file format
------------------
One flat text file, `key = value` per line, `#` comments. Unknown keys are
rejected. All keys, units, and defaults are listed in CONFIG_FIELDS. The
config content hash is the sha256 of the canonical serialization (every
field, sorted by key), so a sparse file and its canonical dump hash
identically.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


class ConfigError(Exception):
    """Bad config file or inconsistent configuration values."""


class ContractViolation(Exception):
    """An operation was called outside its documented contract."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]; result differs from input by k*2pi."""
    w = theta % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


@dataclass(frozen=True)
class CommandVelocity:
    """Commanded body-frame velocity (cx forward m/s, cy left m/s, cw rad/s)."""

    cx: float
    cy: float
    cw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cw], dtype=np.float64)


@dataclass(frozen=True)
class BaseVelocity:
    """Body-frame base velocity; vz is pinned to 0 in the planar plant."""

    vx: float
    vy: float
    vz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.vz], dtype=np.float64)


@dataclass(frozen=True)
class ForceVector:
    """External force in velocity-impulse units (m/s); Fz pinned to 0.

    The zero vector means "no force active".
    """

    fx: float
    fy: float
    fz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz], dtype=np.float64)

    def is_zero(self) -> bool:
        return self.fx == 0.0 and self.fy == 0.0 and self.fz == 0.0


@dataclass
class Pose2:
    """Planar world-frame pose; theta kept wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def wrapped(self) -> "Pose2":
        return Pose2(self.x, self.y, wrap_angle(self.theta))


# name -> (type tag, default, unit/help)
CONFIG_FIELDS: dict[str, tuple[str, object, str]] = {
    "physics_hz": ("int", 200, "Hz, inner PD/integration rate"),
    "policy_hz": ("int", 50, "Hz, policy and observation rate"),
    "mass_kg": ("float", 12.0, "kg"),
    "inertia_kgm2": ("float", 0.15, "kg m^2, yaw inertia"),
    "kp": ("float", 20.0, "proportional gain"),
    "kd": ("float", 0.5, "derivative gain"),
    "v_limit": ("float", 1.0, "m/s (rad/s yaw), action-to-target-velocity scale"),
    "wrench_limit_n": ("float", 60.0, "N, peak actuator force per linear axis"),
    "torque_limit_nm": ("float", 12.0, "N m, peak actuator torque (yaw)"),
    "rated_wrench_n": ("float", 20.0, "N, continuous rating priced by the effort penalty"),
    "rated_torque_nm": ("float", 4.0, "N m, continuous torque rating for the effort penalty"),
    "damping_x": ("float", 0.6, "N s/m, nominal forward drag"),
    "damping_y": ("float", 0.6, "N s/m, nominal lateral drag"),
    "damping_w": ("float", 0.1, "N m s, nominal yaw drag"),
    "damping_rand_lo": ("float", 0.5, "unitless, per-episode damping scale lower bound"),
    "damping_rand_hi": ("float", 2.0, "unitless, per-episode damping scale upper bound"),
    "process_noise_n": ("float", 1.5, "N, white force noise in the dynamics"),
    "accel_noise_std": ("float", 0.2, "m/s^2, accelerometer channel noise"),
    "prop_noise_std": ("float", 0.05, "m/s, proprioceptive velocity noise"),
    "episode_max_s": ("float", 20.0, "s, episode truncation time"),
    "seed": ("int", 0, "root seed for all random streams"),
    "fall_speed_ms": ("float", 3.0, "m/s, planar speed bound of the fall proxy"),
    "fall_err_ms": ("float", 1.5, "m/s, sustained tracking-error bound"),
    "fall_err_hold_s": ("float", 0.5, "s, duration the error bound must exceed"),
    "push_small_period_s": ("float", 0.6, "s, backward leash-drag push period"),
    "push_small_duration_s": ("float", 0.1, "s, backward push duration"),
    "push_small_speed_ms": ("float", 0.25, "m/s, backward push speed"),
    "push_large_period_s": ("float", 3.0, "s, directional push period"),
    "push_large_duration_lo_s": ("float", 0.24, "s, directional push duration lower bound"),
    "push_large_duration_hi_s": ("float", 0.48, "s, directional push duration upper bound"),
    "push_large_mag_ms": ("float", 0.75, "m/s, directional push per-component bound"),
    "push_additive": ("bool", False, "apply pushes additively instead of overwrite-and-hold"),
}


@dataclass(frozen=True)
class SimConfig:
    """Plant and randomization parameters. Immutable after load."""

    physics_hz: int = 200
    policy_hz: int = 50
    mass_kg: float = 12.0
    inertia_kgm2: float = 0.15
    kp: float = 20.0
    kd: float = 0.5
    v_limit: float = 1.0
    wrench_limit_n: float = 60.0
    torque_limit_nm: float = 12.0
    rated_wrench_n: float = 20.0
    rated_torque_nm: float = 4.0
    damping_x: float = 0.6
    damping_y: float = 0.6
    damping_w: float = 0.1
    damping_rand_lo: float = 0.5
    damping_rand_hi: float = 2.0
    process_noise_n: float = 1.5
    accel_noise_std: float = 0.2
    prop_noise_std: float = 0.05
    episode_max_s: float = 20.0
    seed: int = 0
    fall_speed_ms: float = 3.0
    fall_err_ms: float = 1.5
    fall_err_hold_s: float = 0.5
    push_small_period_s: float = 0.6
    push_small_duration_s: float = 0.1
    push_small_speed_ms: float = 0.25
    push_large_period_s: float = 3.0
    push_large_duration_lo_s: float = 0.24
    push_large_duration_hi_s: float = 0.48
    push_large_mag_ms: float = 0.75
    push_additive: bool = False
    config_hash: str = field(default="", compare=False)

    def __post_init__(self):
        if self.physics_hz <= 0 or self.policy_hz <= 0:
            raise ConfigError("physics_hz and policy_hz must be positive")
        if self.physics_hz % self.policy_hz != 0:
            raise ConfigError(
                f"rate ratio not integral: physics_hz={self.physics_hz} "
                f"policy_hz={self.policy_hz}"
            )
        if self.damping_rand_lo > self.damping_rand_hi:
            raise ConfigError("damping_rand_lo must be <= damping_rand_hi")
        if not self.config_hash:
            object.__setattr__(self, "config_hash", config_hash(self))

    @property
    def substeps(self) -> int:
        return self.physics_hz // self.policy_hz

    @property
    def dt_policy(self) -> float:
        return 1.0 / self.policy_hz

    @property
    def dt_physics(self) -> float:
        return 1.0 / self.physics_hz


def _format_value(tag: str, value) -> str:
    if tag == "bool":
        return "true" if value else "false"
    if tag == "float":
        return repr(float(value))
    return str(int(value))


def serialize_config(cfg: SimConfig) -> str:
    """Canonical full-field dump; the content hash is taken over this text."""
    lines = []
    for key in sorted(CONFIG_FIELDS):
        tag = CONFIG_FIELDS[key][0]
        lines.append(f"{key} = {_format_value(tag, getattr(cfg, key))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: SimConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def _parse_value(key: str, tag: str, raw: str, unit: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"malformed field {key!r}: expected {tag} ({unit}), got {raw!r}") from None
    raise ConfigError(f"unknown field type tag {tag!r}")


def parse_config_text(text: str) -> SimConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        tag, _default, unit = CONFIG_FIELDS[key]
        values[key] = _parse_value(key, tag, raw, unit)
    return SimConfig(**values)


def load_config(path: str | Path) -> SimConfig:
    """Load a SimConfig; unspecified fields take documented defaults.

    The returned config carries its canonical content hash in .config_hash.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def with_overrides(cfg: SimConfig, **kwargs) -> SimConfig:
    """Copy with fields replaced; the content hash is recomputed."""
    return replace(cfg, config_hash="", **kwargs)


def _key_to_int(key) -> int:
    if isinstance(key, int):
        return key & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Deterministic named random stream.

    Streams are independent across (seed, keys) tuples; string keys are
    crc32-folded so stream identity is stable across runs and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sample_command(rng: np.random.Generator) -> CommandVelocity:
    """Draw a command with each component i.i.d. uniform on [-1, 1]."""
    cx, cy, cw = rng.uniform(-1.0, 1.0, size=3)
    return CommandVelocity(float(cx), float(cy), float(cw))
