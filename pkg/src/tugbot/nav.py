"""Occupancy-grid navigation: expert-labeled decision points, tug-conditioned
goal selection, and a dynamic-window local planner.

Map file format (flat text, '#' comments outside the grid block):

    resolution 0.2            # meters per cell
    origin 0.0 0.0            # world coordinates of the grid's lower-left
    grid                      # rows top to bottom, '#' occupied, '.' free
    ##########
    #........#
    ##########
    endgrid
    waypoint NAME X Y
    decision NAME X Y RADIUS
    route DECISION HEADING TUG WAYPOINT   # HEADING in {N,E,S,W}, TUG in
                                          # {LEFT,RIGHT,STRAIGHT}
    start X Y THETA           # optional default start pose
    goal NAME                 # optional default initial goal

World frame: x right (east), y up (north); the first grid row is the top
(maximum y). Cells outside the grid count as occupied. Localization is
ground-truth pose from the plant (no scan matching in simulation).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import CommandVelocity, wrap_angle
from .tugdetect import TugDirection


class MapError(Exception):
    """Malformed or inconsistent map file."""


HEADINGS = ("E", "N", "W", "S")  # bucket order by angle


def heading_bucket(theta: float) -> str:
    """Quantize a heading to the nearest of E/N/W/S."""
    return HEADINGS[int(round(wrap_angle(theta) / (math.pi / 2))) % 4]


@dataclass(frozen=True)
class Waypoint:
    name: str
    x: float
    y: float


@dataclass(frozen=True)
class DecisionPoint:
    name: str
    x: float
    y: float
    radius: float
    table: dict = field(default_factory=dict)  # (heading, tug) -> waypoint


class NavMap:
    def __init__(self, grid: np.ndarray, resolution: float, origin: tuple,
                 waypoints: dict, decision_points: list,
                 start: tuple | None = None, initial_goal: str | None = None):
        self.grid = grid  # bool, True = occupied, row 0 = top
        self.resolution = resolution
        self.origin = origin
        self.waypoints = waypoints
        self.decision_points = decision_points
        self.start = start
        self.initial_goal = initial_goal
        # euclidean distance (meters) to the nearest occupied cell
        self.distance_m = ndimage.distance_transform_edt(~grid) * resolution
        self._validate()

    # -- geometry ---------------------------------------------------------

    @property
    def size_m(self) -> tuple:
        rows, cols = self.grid.shape
        return cols * self.resolution, rows * self.resolution

    def cell_of(self, x: float, y: float):
        col = int(math.floor((x - self.origin[0]) / self.resolution))
        row_from_bottom = int(math.floor((y - self.origin[1]) / self.resolution))
        row = self.grid.shape[0] - 1 - row_from_bottom
        if 0 <= row < self.grid.shape[0] and 0 <= col < self.grid.shape[1]:
            return row, col
        return None

    def occupied(self, x: float, y: float) -> bool:
        cell = self.cell_of(x, y)
        if cell is None:
            return True
        return bool(self.grid[cell])

    def clearance(self, x: float, y: float) -> float:
        """Distance (m) from the cell under (x, y) to the nearest obstacle."""
        cell = self.cell_of(x, y)
        if cell is None:
            return 0.0
        return float(self.distance_m[cell])

    def decision_at(self, x: float, y: float) -> DecisionPoint | None:
        for dp in self.decision_points:
            if math.hypot(x - dp.x, y - dp.y) <= dp.radius:
                return dp
        return None

    # -- validation ---------------------------------------------------------

    def _validate(self):
        for dp in self.decision_points:
            for (heading, tug), target in dp.table.items():
                if target not in self.waypoints:
                    raise MapError(
                        f"decision {dp.name} route ({heading},{tug}) references "
                        f"missing waypoint {target!r}"
                    )
        for a, b in itertools.combinations(self.decision_points, 2):
            if math.hypot(a.x - b.x, a.y - b.y) < a.radius + b.radius:
                raise MapError(f"decision radii overlap: {a.name} and {b.name}")
        if self.initial_goal is not None and self.initial_goal not in self.waypoints:
            raise MapError(f"initial goal {self.initial_goal!r} is not a waypoint")


def load_map(path: str | Path) -> NavMap:
    path = Path(path)
    if not path.is_file():
        raise MapError(f"map file not found: {path}")
    resolution = None
    origin = (0.0, 0.0)
    rows: list[str] = []
    waypoints: dict[str, Waypoint] = {}
    decisions: dict[str, DecisionPoint] = {}
    routes = []
    start = None
    initial_goal = None
    in_grid = False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        if in_grid:
            if raw.strip() == "endgrid":
                in_grid = False
                continue
            rows.append(raw.rstrip("\n"))
            continue
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "resolution":
                resolution = float(parts[1])
            elif key == "origin":
                origin = (float(parts[1]), float(parts[2]))
            elif key == "grid":
                in_grid = True
            elif key == "waypoint":
                waypoints[parts[1]] = Waypoint(parts[1], float(parts[2]), float(parts[3]))
            elif key == "decision":
                decisions[parts[1]] = DecisionPoint(
                    parts[1], float(parts[2]), float(parts[3]), float(parts[4]))
            elif key == "route":
                name, heading, tug, target = parts[1:5]
                if heading not in HEADINGS:
                    raise MapError(f"line {lineno}: bad heading {heading!r}")
                if tug not in ("LEFT", "RIGHT", "STRAIGHT"):
                    raise MapError(f"line {lineno}: bad tug {tug!r}")
                routes.append((name, heading, tug, target, lineno))
            elif key == "start":
                start = (float(parts[1]), float(parts[2]), float(parts[3]))
            elif key == "goal":
                initial_goal = parts[1]
            else:
                raise MapError(f"line {lineno}: unknown directive {key!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, MapError):
                raise
            raise MapError(f"line {lineno}: malformed {key!r} entry: {line!r}") from None
    if in_grid:
        raise MapError("grid block not closed with 'endgrid'")
    if resolution is None or not rows:
        raise MapError("map needs a resolution and a grid block")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MapError("non-rectangular grid")
    bad = set("".join(rows)) - {".", "#"}
    if bad:
        raise MapError(f"grid contains invalid characters: {sorted(bad)}")
    grid = np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)
    for name, heading, tug, target, lineno in routes:
        if name not in decisions:
            raise MapError(f"line {lineno}: route references unknown decision {name!r}")
        decisions[name].table[(heading, tug)] = target
    return NavMap(grid, resolution, origin, waypoints, list(decisions.values()),
                  start, initial_goal)


# -- goal selection -----------------------------------------------------------


@dataclass(frozen=True)
class GoalDecision:
    goal: str | None
    kind: str              # KEEP | DECIDED | STRAIGHT | HOLD
    decision_point: str | None = None
    heading: str | None = None
    diagnostic: str | None = None


def select_goal(navmap: NavMap, pose, tug: TugDirection,
                current_goal: str | None) -> GoalDecision:
    """Tug-conditioned goal lookup; pure in (map, pose, tug, goal).

    Inside a decision radius a LEFT/RIGHT tug indexes the (heading, tug)
    table; no tug takes the STRAIGHT entry when present, otherwise the
    robot keeps its goal and holds awaiting a tug. Outside decision regions
    tugs are ignored.
    """
    x, y, theta = pose
    dp = navmap.decision_at(x, y)
    if dp is None:
        return GoalDecision(current_goal, "KEEP")
    heading = heading_bucket(theta)
    if tug in (TugDirection.LEFT, TugDirection.RIGHT):
        target = dp.table.get((heading, tug.value))
        if target is None:
            return GoalDecision(
                current_goal, "HOLD", dp.name, heading,
                diagnostic=f"no route for ({heading}, {tug.value}) at {dp.name}",
            )
        return GoalDecision(target, "DECIDED", dp.name, heading)
    target = dp.table.get((heading, "STRAIGHT"))
    if target is None:
        return GoalDecision(
            current_goal, "HOLD", dp.name, heading,
            diagnostic=f"awaiting tug at {dp.name} (no STRAIGHT route for {heading})",
        )
    return GoalDecision(target, "STRAIGHT", dp.name, heading)


# -- dynamic window planner ---------------------------------------------------


@dataclass(frozen=True)
class DwaParams:
    accel: tuple = (1.5, 1.0, 2.0)       # m/s^2, m/s^2, rad/s^2
    window_dt: float = 0.4               # s, reachable-velocity window
    vmax: tuple = (1.0, 0.6, 1.0)        # caps, also the [-1,1] command box
    samples: tuple = (7, 5, 7)
    horizon: float = 1.5                 # s, rollout length
    rollout_dt: float = 0.1              # s
    inflation: float = 0.3               # m, obstacle inflation
    w_goal: float = 1.0
    w_clear: float = 0.4
    w_speed: float = 0.3
    arrive_radius: float = 0.2           # m
    hold_speed: float = 0.3              # m/s cap while awaiting a tug
    yaw_damp: float = 0.25               # command = yaw_damp * plan omega


@dataclass
class LocalPlan:
    velocity: tuple
    poses: list
    score: float
    score_terms: dict
    stop: bool = False
    n_valid: int = 0


def dwa_candidates(u, params: DwaParams) -> np.ndarray:
    """Velocity candidates in the acceleration-limited window, lexicographic
    (vx-major, then vy, then omega)."""
    axes = []
    for k in range(3):
        half = params.accel[k] * params.window_dt
        lo = max(-params.vmax[k], u[k] - half)
        hi = min(params.vmax[k], u[k] + half)
        axes.append(np.linspace(lo, hi, params.samples[k]))
    grid = np.array(list(itertools.product(*axes)))
    return grid


def rollout_poses(pose, cand: np.ndarray, params: DwaParams) -> np.ndarray:
    """Constant-velocity rollouts; (C, steps, 3) poses after each step.

    Candidates are body-frame commands; the predicted path translates along
    the start-heading-rotated velocity while yaw evolves separately. Over
    the short horizon the velocity-tracking layer owns rotation, which
    keeps the score symmetric in lateral and yaw (a straight-ahead goal is
    won by the pure-forward candidate).
    """
    steps = int(round(params.horizon / params.rollout_dt))
    C = cand.shape[0]
    out = np.zeros((C, steps, 3))
    dt = params.rollout_dt
    cth = math.cos(pose[2])
    sth = math.sin(pose[2])
    wx = cand[:, 0] * cth - cand[:, 1] * sth
    wy = cand[:, 0] * sth + cand[:, 1] * cth
    x = np.full(C, pose[0])
    y = np.full(C, pose[1])
    th = np.full(C, pose[2])
    for s in range(steps):
        x = x + wx * dt
        y = y + wy * dt
        th = th + cand[:, 2] * dt
        out[:, s, 0] = x
        out[:, s, 1] = y
        out[:, s, 2] = th
    return out


def dwa_plan(navmap: NavMap, pose, u, goal_xy, params: DwaParams = DwaParams()) -> LocalPlan:
    """Argmax over the candidate set; exact tie-breaking by smaller velocity
    change, then lexicographic candidate index. All-colliding -> STOP plan."""
    cand = dwa_candidates(u, params)
    poses = rollout_poses(pose, cand, params)
    C, steps, _ = poses.shape
    clear = np.empty((C, steps))
    for s in range(steps):
        for c in range(C):
            clear[c, s] = navmap.clearance(poses[c, s, 0], poses[c, s, 1])
    margin = clear - params.inflation
    valid = np.all(margin > 0.0, axis=1)
    gx, gy = goal_xy
    d_end = np.sqrt((gx - poses[:, -1, 0]) ** 2 + (gy - poses[:, -1, 1]) ** 2)
    d_start = math.sqrt((gx - pose[0]) ** 2 + (gy - pose[1]) ** 2)
    goal_term = 1.0 / (1.0 + d_end)
    clear_term = np.minimum(margin.min(axis=1), 1.0)
    # progress speed: world-velocity component toward the goal at the start
    cth = math.cos(pose[2])
    sth = math.sin(pose[2])
    wvx = cand[:, 0] * cth - cand[:, 1] * sth
    wvy = cand[:, 0] * sth + cand[:, 1] * cth
    if d_start > 0.0:
        speed_term = (wvx * (gx - pose[0]) + wvy * (gy - pose[1])) / d_start
    else:
        speed_term = np.zeros(len(cand))
    scores = params.w_goal * goal_term + params.w_clear * clear_term \
        + params.w_speed * speed_term
    dv = np.sqrt((cand[:, 0] - u[0]) ** 2 + (cand[:, 1] - u[1]) ** 2
                 + (cand[:, 2] - u[2]) ** 2)

    best = -1
    for i in range(C):
        if not valid[i]:
            continue
        if best < 0 or scores[i] > scores[best] or \
                (scores[i] == scores[best] and dv[i] < dv[best]):
            best = i
    if best < 0:
        return LocalPlan((0.0, 0.0, 0.0), [], 0.0, {}, stop=True, n_valid=0)
    return LocalPlan(
        tuple(cand[best]),
        [tuple(p) for p in poses[best]],
        float(scores[best]),
        {
            "goal": float(params.w_goal * goal_term[best]),
            "clearance": float(params.w_clear * clear_term[best]),
            "speed": float(params.w_speed * speed_term[best]),
        },
        stop=False,
        n_valid=int(valid.sum()),
    )


# -- navigation session ---------------------------------------------------


class NavSession:
    """Holds the current goal, decision latch, and arrival state across ticks."""

    def __init__(self, navmap: NavMap, initial_goal: str | None = None,
                 params: DwaParams = DwaParams()):
        goal = initial_goal or navmap.initial_goal
        if goal is None or goal not in navmap.waypoints:
            raise MapError(f"initial goal {goal!r} is not a waypoint")
        self.map = navmap
        self.params = params
        self.goal = goal
        self._latched_dp: str | None = None
        self._inside_dp: str | None = None
        self._goal_announced = False
        self.last_plan: LocalPlan | None = None

    def tick(self, pose, u, tug: TugDirection):
        """One navigation step: goal selection, then local planning.

        Returns (CommandVelocity, LocalPlan, events). Events are dicts with
        a "kind" key: approaching_decision, decision_made, goal_reached,
        tug_ignored.
        """
        events = []
        navmap = self.map
        params = self.params
        x, y, theta = pose

        dp = navmap.decision_at(x, y)
        if dp is not None and self._inside_dp != dp.name:
            self._inside_dp = dp.name
            events.append({"kind": "approaching_decision", "decision_point": dp.name})
        if dp is None:
            self._inside_dp = None
            self._latched_dp = None

        sel = select_goal(navmap, pose, tug, self.goal)
        holding = sel.kind == "HOLD"
        if sel.kind == "DECIDED" and self._latched_dp != sel.decision_point:
            self._latched_dp = sel.decision_point
            if sel.goal != self.goal:
                self._goal_announced = False
            self.goal = sel.goal
            events.append({
                "kind": "decision_made",
                "decision_point": sel.decision_point,
                "heading": sel.heading,
                "tug": tug.value,
                "goal": sel.goal,
            })
        elif sel.kind == "STRAIGHT" and self._latched_dp is None:
            if sel.goal != self.goal:
                self._goal_announced = False
                self.goal = sel.goal
        elif tug is not TugDirection.NONE and (sel.kind == "KEEP" or
                                               self._latched_dp is not None):
            events.append({"kind": "tug_ignored", "tug": tug.value})

        wp = navmap.waypoints[self.goal]
        dist_goal = math.hypot(wp.x - x, wp.y - y)
        if dist_goal <= params.arrive_radius:
            plan = LocalPlan((0.0, 0.0, 0.0), [], 0.0, {}, stop=False, n_valid=0)
            self.last_plan = plan
            if not self._goal_announced:
                self._goal_announced = True
                events.append({"kind": "goal_reached", "goal": self.goal})
            return CommandVelocity(0.0, 0.0, 0.0), plan, events

        plan = dwa_plan(navmap, pose, u, (wp.x, wp.y), params)
        self.last_plan = plan
        vx, vy, w = plan.velocity
        if holding:
            speed = math.hypot(vx, vy)
            if speed > params.hold_speed:
                scale = params.hold_speed / speed
                vx, vy = vx * scale, vy * scale
        # the rollout model is yaw-neutral, so score ties pin the plan's
        # omega to the current rate; damping the yaw command keeps process
        # noise from integrating into unbounded heading drift
        w = params.yaw_damp * w
        cmd = CommandVelocity(
            min(1.0, max(-1.0, vx)), min(1.0, max(-1.0, vy)), min(1.0, max(-1.0, w)),
        )
        return cmd, plan, events
