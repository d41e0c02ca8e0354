"""Planar reach-avoid task with two circular hazards and a circular goal.

State is ``(x, y, v, theta)``; the control is ``(accel, turn)`` where ``turn``
is a yaw rate.  All batched helpers take arrays whose last axis holds the
state (4) or action (2) components, so rollouts of many episodes run in
lockstep.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

CONFIG_VERSION = 1


class EnvInputError(ValueError):
    """Raised for non-finite states or actions."""


@dataclass(frozen=True)
class EnvConfig:
    arena_half_width: float = 3.0
    hazard_centers: tuple = ((-1.0, 0.8), (1.0, -0.8))
    hazard_radius: float = 0.5
    goal_center: tuple = (2.2, 2.2)
    goal_radius: float = 0.3
    dt: float = 0.1
    v_bounds: tuple = (0.0, 2.0)
    accel_bound: float = 1.0
    turn_bound: float = math.pi
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        # JSON round trips hand us lists
        object.__setattr__(self, "hazard_centers",
                           tuple(tuple(float(c) for c in p) for p in self.hazard_centers))
        object.__setattr__(self, "goal_center", tuple(float(c) for c in self.goal_center))
        object.__setattr__(self, "v_bounds", tuple(float(c) for c in self.v_bounds))
        self.validate()

    def validate(self):
        if len(self.hazard_centers) != 2 or any(len(p) != 2 for p in self.hazard_centers):
            raise ValueError("exactly two planar hazard centers are required")
        if len(self.goal_center) != 2 or len(self.v_bounds) != 2:
            raise ValueError("goal_center and v_bounds must have two components")
        if not (self.hazard_radius > 0 and self.goal_radius > 0 and self.dt > 0):
            raise ValueError("hazard_radius, goal_radius and dt must be positive")
        v_min, v_max = self.v_bounds
        if not (0 <= v_min < v_max):
            raise ValueError(f"invalid v_bounds {self.v_bounds}")
        if self.accel_bound <= 0 or self.turn_bound <= 0 or self.arena_half_width <= 0:
            raise ValueError("bounds must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        g = np.asarray(self.goal_center)
        for c in self.hazard_centers:
            if np.hypot(*(g - np.asarray(c))) <= self.hazard_radius:
                raise ValueError("goal_center must lie strictly outside both hazards")

    @property
    def v_min(self) -> float:
        return self.v_bounds[0]

    @property
    def v_max(self) -> float:
        return self.v_bounds[1]

    @property
    def action_bounds(self) -> np.ndarray:
        return np.array([self.accel_bound, self.turn_bound])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hazard_centers"] = [list(p) for p in self.hazard_centers]
        d["goal_center"] = list(self.goal_center)
        d["v_bounds"] = list(self.v_bounds)
        return d

    def to_json(self) -> str:
        return json.dumps({"version": CONFIG_VERSION, **self.to_dict()}, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported env config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EnvConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        """Stable hash of the geometry/dynamics, used to tie datasets to configs."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EnvState:
    x: float
    y: float
    v: float
    theta: float
    t: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta], dtype=np.float64)

    @classmethod
    def from_array(cls, arr, t: int = 0) -> "EnvState":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]), t)


@dataclass(frozen=True)
class Action:
    accel: float
    turn: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.turn], dtype=np.float64)


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    reward: float
    cost: float
    h: float
    done: bool
    reached_goal: bool = field(default=False)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return out if out.ndim else float(out)


def hazard_distances(xy: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Distances from points ``(..., 2)`` to both hazard centers, shape ``(..., 2)``."""
    centers = np.asarray(cfg.hazard_centers)
    diff = xy[..., None, :] - centers
    return np.hypot(diff[..., 0], diff[..., 1])


def constraint_violation(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """h(s) = R_hazard - min(d1, d2); positive inside a hazard."""
    states = np.asarray(states, dtype=np.float64)
    return cfg.hazard_radius - hazard_distances(states[..., :2], cfg).min(axis=-1)


def cost_of(h):
    return np.maximum(h, 0.0)


def goal_distance(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    g = np.asarray(cfg.goal_center)
    return np.hypot(states[..., 0] - g[0], states[..., 1] - g[1])


def clip_actions(actions: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    b = cfg.action_bounds
    return np.clip(actions, -b, b)


def step_batch(states: np.ndarray, actions: np.ndarray, cfg: EnvConfig):
    """Advance a batch of states one step.

    Returns ``(next_states, reward, cost, h_next, reached_goal)``; time-limit
    handling is left to the caller.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise EnvInputError("non-finite state or action")
    actions = clip_actions(actions, cfg)
    x, y, v, th = (states[..., i] for i in range(4))
    v2 = np.clip(v + actions[..., 0] * cfg.dt, cfg.v_min, cfg.v_max)
    th2 = wrap_angle(th + actions[..., 1] * cfg.dt)
    w = cfg.arena_half_width
    x2 = np.clip(x + v2 * np.cos(th2) * cfg.dt, -w, w)
    y2 = np.clip(y + v2 * np.sin(th2) * cfg.dt, -w, w)
    nxt = np.stack([x2, y2, v2, np.asarray(th2, dtype=np.float64)], axis=-1)
    reward = goal_distance(states, cfg) - goal_distance(nxt, cfg)
    h = constraint_violation(nxt, cfg)
    reached = goal_distance(nxt, cfg) <= cfg.goal_radius
    return nxt, reward, cost_of(h), h, reached


def step(state: EnvState, action: Action, cfg: EnvConfig) -> StepResult:
    nxt, r, c, h, reached = step_batch(state.as_array(), action.as_array(), cfg)
    t = state.t + 1
    done = bool(reached) or t >= cfg.max_steps
    return StepResult(EnvState.from_array(nxt, t), float(r), float(c), float(h), done, bool(reached))


# --- ground-truth feasibility ------------------------------------------------

def safest_action_batch(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Full braking while turning away from the nearest hazard.

    Equidistant hazards resolve to the first one; a hazard dead ahead (or dead
    astern) resolves to a left turn.  The turn saturates once the heading
    points directly away so the rollout does not oscillate.
    """
    states = np.asarray(states, dtype=np.float64)
    d = hazard_distances(states[..., :2], cfg)
    nearest = np.argmin(d, axis=-1)
    centers = np.asarray(cfg.hazard_centers)[nearest]
    bearing = np.arctan2(centers[..., 1] - states[..., 1], centers[..., 0] - states[..., 0])
    rel = wrap_angle(bearing - states[..., 3])
    direction = np.where(rel > 0, -1.0, 1.0)
    direction = np.where(rel == np.pi, 1.0, direction)
    magnitude = np.minimum(cfg.turn_bound, (np.pi - np.abs(rel)) / cfg.dt)
    accel = np.full(states.shape[:-1], -cfg.accel_bound)
    return np.stack([accel, direction * magnitude], axis=-1)


def oracle_rollout(states: np.ndarray, cfg: EnvConfig):
    """Roll the safest policy forward from every state.

    Returns ``(trajectory, max_h)`` where ``trajectory`` has shape
    ``(steps + 1, ..., 4)`` and includes the start states.  The rollout stops
    early once every state is parked at ``v_min == 0``, since nothing moves
    after that.
    """
    s = np.asarray(states, dtype=np.float64)
    traj = [s]
    max_h = constraint_violation(s, cfg)
    for _ in range(cfg.max_steps):
        if cfg.v_min == 0.0 and np.all(s[..., 2] == 0.0):
            break
        s, _, _, h, _ = step_batch(s, safest_action_batch(s, cfg), cfg)
        traj.append(s)
        max_h = np.maximum(max_h, h)
    return np.stack(traj), max_h


def oracle_feasible_batch(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    _, max_h = oracle_rollout(states, cfg)
    return max_h <= 0.0


def oracle_feasible(state: EnvState, cfg: EnvConfig) -> bool:
    return bool(oracle_feasible_batch(state.as_array(), cfg))


# --- data-collection behaviour ------------------------------------------------

# Controller gains for the scripted collector.
HEADING_GAIN = 4.0
SPEED_GAIN = 2.0
AVOID_GAIN = 3.0
AVOID_MARGIN = 1.0


def scripted_action_batch(states: np.ndarray, cfg: EnvConfig, noise=None,
                          noise_scale: float = 0.3) -> np.ndarray:
    """Goal-seeking proportional controller with a lateral hazard-avoidance term.

    ``noise`` is standard-normal with the same shape as the action; it is
    scaled by ``noise_scale`` times the action bounds.
    """
    s = np.asarray(states, dtype=np.float64)
    x, y, v, th = (s[..., i] for i in range(4))
    gx, gy = cfg.goal_center
    goal_heading = np.arctan2(gy - y, gx - x)
    err = wrap_angle(goal_heading - th)
    turn = HEADING_GAIN * err

    centers = np.asarray(cfg.hazard_centers)
    R = cfg.hazard_radius
    caution = np.zeros_like(v)
    for cx, cy in centers:
        dx, dy = cx - x, cy - y
        dist = np.hypot(dx, dy)
        # only hazards ahead of us and closer than the influence radius push back
        ahead = np.cos(th) * dx + np.sin(th) * dy
        cross = np.cos(th) * dy - np.sin(th) * dx
        influence = np.clip((R + AVOID_MARGIN - dist) / AVOID_MARGIN, 0.0, 1.0)
        influence = np.where(ahead > 0, influence, 0.0)
        side = np.where(cross >= 0, -1.0, 1.0)
        turn = turn + side * AVOID_GAIN * cfg.turn_bound * influence
        caution = np.maximum(caution, influence)

    dist_goal = np.hypot(gx - x, gy - y)
    v_des = cfg.v_max * np.clip(np.cos(err), 0.25, 1.0) * (1.0 - 0.6 * caution)
    v_des = np.minimum(v_des, 1.5 * dist_goal + 0.3)
    accel = SPEED_GAIN * (v_des - v)
    a = np.stack([accel, turn], axis=-1)
    if noise is not None:
        a = a + noise_scale * cfg.action_bounds * np.asarray(noise)
    return clip_actions(a, cfg)


def scripted_behavior(state: EnvState, cfg: EnvConfig, rng: np.random.Generator,
                      noise_scale: float = 0.3) -> Action:
    noise = rng.standard_normal(2) if noise_scale > 0 else None
    a = scripted_action_batch(state.as_array(), cfg, noise, noise_scale)
    return Action(float(a[0]), float(a[1]))


def random_action_batch(rng: np.random.Generator, n: int, cfg: EnvConfig) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 2)) * cfg.action_bounds


def sample_start_states(rng: np.random.Generator, n: int, cfg: EnvConfig) -> np.ndarray:
    """Uniform over the arena, speed and heading; goal-region starts rejected."""
    out = np.empty((0, 4))
    w = cfg.arena_half_width
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        s = np.column_stack([
            rng.uniform(-w, w, m), rng.uniform(-w, w, m),
            rng.uniform(cfg.v_min, cfg.v_max, m), rng.uniform(-np.pi, np.pi, m),
        ])
        s = s[goal_distance(s, cfg) > cfg.goal_radius]
        out = np.concatenate([out, s])
    return out[:n]


def featurize(states: np.ndarray) -> np.ndarray:
    """Network observation (x, y, v, cos theta, sin theta)."""
    s = np.asarray(states, dtype=np.float64)
    return np.stack([s[..., 0], s[..., 1], s[..., 2], np.cos(s[..., 3]), np.sin(s[..., 3])], axis=-1)
