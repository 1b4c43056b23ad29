"""Toy intersection simulator.

A single vehicle enters an intersection from the bottom heading north and
either drives straight through to the top exit or turns right to the east
exit.  Motion follows the kinematic bicycle model; a pure-pursuit steering
law with proportional speed control tracks a per-mode waypoint list.

Rollouts run for a fixed number of raw steps, are downsampled, and split into
a short history (the observation) and the future to forecast.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

MODES = ("straight", "right")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])


@dataclass(frozen=True)
class Control:
    acceleration: float
    steering: float


@dataclass(frozen=True)
class ControllerGains:
    cruise_speed: float = 7.0
    lookahead: float = 3.0
    speed_gain: float = 3.0
    stop_gain: float = 1.0
    goal_radius: float = 0.5
    max_steer: float = 0.6
    max_accel: float = 3.0
    max_decel: float = 6.0
    speed_limit: float = 9.0


def _right_turn(radius: float = 6.0, n: int = 5) -> list[list[float]]:
    # straight to (0, 10 - r), quarter arc to (r, 10), then east to the exit at (10, 10)
    cy = 10.0 - radius
    angles = np.linspace(math.pi, math.pi / 2, n + 1)[1:]
    arc = [[radius + radius * math.cos(a), cy + radius * math.sin(a)] for a in angles]
    return [[0.0, cy]] + arc + [[10.0, 10.0]]


@dataclass(frozen=True)
class SimConfig:
    n_straight: int = 100
    n_right: int = 900
    start: tuple[float, float] = (0.0, -7.0)
    start_noise: float = 0.2
    accel_noise: float = 3.0
    steer_noise: float = 0.2
    initial_speed: float = 7.0
    dt: float = 0.05
    raw_steps: int = 100
    downsample: int = 10
    history: int = 2
    horizon: int = 8
    wheelbase: float = 2.5
    straight_goal: tuple[float, float] = (0.0, 20.0)
    right_goal: tuple[float, float] = (10.0, 10.0)
    waypoints: dict = field(default_factory=lambda: {
        "straight": [[0.0, 5.0], [0.0, 10.0], [0.0, 15.0], [0.0, 20.0]],
        "right": _right_turn(),
    })
    gains: ControllerGains = field(default_factory=ControllerGains)
    max_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.raw_steps // self.downsample != self.history + self.horizon:
            raise ValueError("raw_steps / downsample must equal history + horizon")
        if self.raw_steps % self.downsample:
            raise ValueError("raw_steps must be a multiple of downsample")
        if self.n_straight <= 0 or self.n_right <= 0:
            raise ValueError("mode counts must be positive")
        if self.dt <= 0 or self.wheelbase <= 0:
            raise ValueError("dt and wheelbase must be positive")
        if min(self.start_noise, self.accel_noise, self.steer_noise) < 0:
            raise ValueError("noise levels must be non-negative")

    def goals(self) -> dict[str, np.ndarray]:
        return {"straight": np.array(self.straight_goal), "right": np.array(self.right_goal)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = list(self.start)
        d["straight_goal"] = list(self.straight_goal)
        d["right_goal"] = list(self.right_goal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        if "gains" in d and isinstance(d["gains"], dict):
            d["gains"] = ControllerGains(**d["gains"])
        for key in ("start", "straight_goal", "right_goal"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Dataset:
    """Observation/future pairs with mode labels.

    ``history`` has shape (N, history, 2) and ``future`` (N, horizon, 2), both in
    metres; ``modes`` holds the mode name per record.
    """

    history: np.ndarray
    future: np.ndarray
    modes: list[str]
    config: SimConfig
    seed: int

    def __len__(self) -> int:
        return len(self.modes)

    def mode_mask(self, mode: str) -> np.ndarray:
        return np.array([m == mode for m in self.modes])

    def records(self) -> list[dict]:
        return [
            {"history": h.tolist(), "future": f.tolist(), "mode": m}
            for h, f, m in zip(self.history, self.future, self.modes)
        ]

    def digest(self) -> str:
        payload = json.dumps({"seed": self.seed, "config": self.config.to_dict(), "records": self.records()},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class EvalInstance:
    history: np.ndarray          # (history, 2)
    futures: np.ndarray          # (J, horizon, 2)
    modes: list[str]


def step_bicycle(state: VehicleState, control: Control, dt: float, wheelbase: float) -> VehicleState:
    """Advance the kinematic bicycle model by one explicit Euler step."""
    if dt < 0 or wheelbase <= 0:
        raise ValueError("dt must be non-negative and wheelbase positive")
    x = state.x + state.speed * math.cos(state.heading) * dt
    y = state.y + state.speed * math.sin(state.heading) * dt
    heading = state.heading + state.speed / wheelbase * math.tan(control.steering) * dt
    speed = max(0.0, state.speed + control.acceleration * dt)
    if not all(map(math.isfinite, (x, y, heading, speed))):
        raise SimulationError("non-finite vehicle state")
    return VehicleState(x, y, heading, speed)


def track_waypoints(state: VehicleState, waypoints, gains: ControllerGains = ControllerGains(),
                    wheelbase: float = 2.5) -> Control:
    """Pure-pursuit steering toward the lookahead waypoint, P-control on speed.

    The lookahead target is the first waypoint farther than ``gains.lookahead``
    (the last waypoint if none is).  Steering is left-positive.  The speed
    target drops linearly near the final waypoint and is zero inside the goal
    radius.
    """
    pts = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("no waypoints left to track")
    pos = np.array([state.x, state.y])
    dists = np.linalg.norm(pts - pos, axis=1)
    far = np.nonzero(dists > gains.lookahead)[0]
    target = pts[far[0]] if len(far) else pts[-1]

    dx, dy = target - pos
    alpha = math.atan2(dy, dx) - state.heading
    alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
    ld = max(math.hypot(dx, dy), 1e-6)
    steer = math.atan2(2.0 * wheelbase * math.sin(alpha), ld)
    steer = float(np.clip(steer, -gains.max_steer, gains.max_steer))

    goal_dist = dists[-1]
    if goal_dist <= gains.goal_radius:
        v_target = 0.0
    else:
        v_target = min(gains.cruise_speed, gains.stop_gain * goal_dist)
    accel = float(np.clip(gains.speed_gain * (v_target - state.speed), -gains.max_decel, gains.max_accel))
    return Control(accel, steer)


def perturb_control(control: Control, state: VehicleState, config: SimConfig, rng: np.random.Generator) -> Control:
    """Add white actuation noise; the steering limit and the speed limit still hold."""
    g = config.gains
    a, d = rng.normal(0.0, 1.0, size=2) * (config.accel_noise, config.steer_noise)
    accel = min(control.acceleration + a, (g.speed_limit - state.speed) / config.dt)
    steer = float(np.clip(control.steering + d, -g.max_steer, g.max_steer))
    return Control(accel, steer)


def _remaining(waypoints: np.ndarray, state: VehicleState, radius: float) -> np.ndarray:
    # drop waypoints already passed (within the capture radius), never the goal
    pos = np.array([state.x, state.y])
    while len(waypoints) > 1 and np.linalg.norm(waypoints[0] - pos) < radius:
        waypoints = waypoints[1:]
    return waypoints


def rollout(config: SimConfig, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Simulate one vehicle; returns the raw (raw_steps, 4) state array after each step.

    The start position is perturbed with white noise drawn from ``rng``, and
    so is every control command issued after the observed prefix; vehicles
    therefore arrive at the entrance differing only by their start offset.

    Raises :class:`SimulationError` if the goal is not reached.
    """
    sx, sy = config.start
    noise = rng.normal(0.0, config.start_noise, size=2)
    state = VehicleState(sx + noise[0], sy + noise[1], math.pi / 2, config.initial_speed)
    wps = np.asarray(config.waypoints[mode], dtype=float)
    goal = wps[-1]
    out = np.empty((config.raw_steps, 4))
    quiet = config.history * config.downsample
    for k in range(config.raw_steps):
        wps = _remaining(wps, state, config.gains.lookahead)
        ctrl = track_waypoints(state, wps, config.gains, config.wheelbase)
        if k >= quiet:
            ctrl = perturb_control(ctrl, state, config, rng)
        state = step_bicycle(state, ctrl, config.dt, config.wheelbase)
        out[k] = state.as_array()
    if np.hypot(state.x - goal[0], state.y - goal[1]) > 2.0 * config.gains.goal_radius:
        raise SimulationError(f"{mode} rollout ended {np.hypot(state.x - goal[0], state.y - goal[1]):.2f} m from goal")
    return out


def downsample(states: np.ndarray, factor: int) -> np.ndarray:
    """Every ``factor``-th position, ending at the final state."""
    return states[factor - 1::factor, :2]


def generate_dataset(config: SimConfig = SimConfig(), seed: int | None = None) -> Dataset:
    seed = config.seed if seed is None else seed
    modes = ["straight"] * config.n_straight + ["right"] * config.n_right
    order = np.random.default_rng(seed).permutation(len(modes))
    modes = [modes[i] for i in order]
    streams = np.random.SeedSequence(seed).spawn(len(modes))

    hist, fut = [], []
    for mode, ss in zip(modes, streams):
        rng = np.random.default_rng(ss)
        for _ in range(config.max_retries + 1):
            try:
                states = rollout(config, mode, rng)
                break
            except SimulationError:
                continue
        else:
            raise SimulationError(f"{mode} rollout failed {config.max_retries + 1} times")
        pts = downsample(states, config.downsample)
        hist.append(pts[: config.history])
        fut.append(pts[config.history:])
    return Dataset(np.array(hist), np.array(fut), modes, config, seed)


def mode_means(dataset: Dataset) -> dict[str, np.ndarray]:
    out = {}
    for mode in MODES:
        mask = dataset.mode_mask(mode)
        if not mask.any():
            raise ValueError(f"dataset has no {mode!r} records")
        out[mode] = dataset.future[mask].mean(axis=0)
    return out


def build_multifuture_eval(dataset: Dataset, n_instances: int, seed: int = 0) -> list[EvalInstance]:
    """Pair sampled observations with the per-mode mean futures (J = 2)."""
    if n_instances < 1:
        raise ValueError("n_instances must be positive")
    means = mode_means(dataset)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=n_instances, replace=n_instances > len(dataset))
    futures = np.stack([means[m] for m in MODES])
    return [EvalInstance(dataset.history[i].copy(), futures.copy(), list(MODES)) for i in idx]


def classify_endpoints(endpoints: np.ndarray, config: SimConfig = SimConfig()) -> np.ndarray:
    """Nearest-exit mode label for each (x, y) endpoint."""
    endpoints = np.asarray(endpoints).reshape(-1, 2)
    goals = config.goals()
    d = np.stack([np.linalg.norm(endpoints - goals[m], axis=1) for m in MODES], axis=1)
    return np.array(MODES)[np.argmin(d, axis=1)]


def canonical_observation(config: SimConfig = SimConfig()) -> np.ndarray:
    """Noise-free history of a vehicle arriving at the intersection entrance."""
    sx, sy = config.start
    state = VehicleState(sx, sy, math.pi / 2, config.initial_speed)
    wps = np.asarray(config.waypoints["straight"], dtype=float)
    states = []
    for _ in range(config.history * config.downsample):
        ctrl = track_waypoints(state, wps, config.gains, config.wheelbase)
        state = step_bicycle(state, ctrl, config.dt, config.wheelbase)
        states.append(state.as_array())
    return downsample(np.array(states), config.downsample)
