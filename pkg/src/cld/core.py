"""Domain vocabulary: agent states and actions, trajectories, maps, contexts, scenarios."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InsufficientHistoryError, InvalidInputError

DT = 0.1
A_MAX = 4.0
W_MAX = 1.0


def wrap_angle(theta: float) -> float:
    """Map an angle onto (-pi, pi]."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise InvalidInputError(f"wrap_angle needs a finite angle, got {theta}")
    return float(kernels.numpy_backend.wrap_angles(theta))


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.v, self.theta)
        if not all(math.isfinite(float(u)) for u in vals):
            raise InvalidInputError(f"non-finite AgentState field in {vals}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "v", max(0.0, float(self.v)))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta])

    @classmethod
    def from_array(cls, a) -> "AgentState":
        return cls(*(float(u) for u in a[:4]))


@dataclass(frozen=True)
class AgentAction:
    accel: float
    yaw_rate: float

    def __post_init__(self):
        a, w = float(self.accel), float(self.yaw_rate)
        if not (math.isfinite(a) and math.isfinite(w)):
            raise InvalidInputError("non-finite AgentAction")
        if abs(a) > A_MAX + 1e-12 or abs(w) > W_MAX + 1e-12:
            raise InvalidInputError(f"action ({a}, {w}) outside bounds ({A_MAX}, {W_MAX})")
        object.__setattr__(self, "accel", a)
        object.__setattr__(self, "yaw_rate", w)

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.yaw_rate])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """T+1 states produced by rolling out T actions.

    ``states`` is (T+1, 4) with columns x, y, v, theta; ``actions`` is (T, 2).
    Construction re-checks every transition against the unicycle step.
    """

    states: np.ndarray
    actions: np.ndarray
    dt: float = DT

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64)
        actions = np.array(self.actions, dtype=np.float64).reshape(-1, 2)
        if states.ndim != 2 or states.shape[1] != 4:
            raise InvalidInputError(f"states must be (T+1, 4), got {states.shape}")
        if states.shape[0] != actions.shape[0] + 1:
            raise InvalidInputError(
                f"need len(states) == len(actions) + 1, got {states.shape[0]} and {actions.shape[0]}"
            )
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise InvalidInputError("non-finite trajectory entries")
        if len(actions):
            redo = kernels.numpy_backend.rollout_batch(states[:-1], actions[:, None, :], self.dt)[:, 1]
            err = redo - states[1:]
            err[:, 3] = kernels.numpy_backend.wrap_angles(err[:, 3])
            if np.max(np.abs(err)) > 1e-9:
                raise InvalidInputError("trajectory states do not follow the dynamics step")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self):
        return self.actions.shape[0]

    def state(self, i: int) -> AgentState:
        return AgentState.from_array(self.states[i])

    def action(self, i: int) -> AgentAction:
        return AgentAction(*self.actions[i])


@dataclass(frozen=True, eq=False)
class SemanticMap:
    grid: np.ndarray
    origin_x: float
    origin_y: float
    resolution: float

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.bool_)
        if grid.ndim != 2 or grid.size == 0:
            raise InvalidInputError("map grid must be a non-empty 2-D raster")
        if not self.resolution > 0:
            raise InvalidInputError("map resolution must be positive")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    def drivable(self, x, y):
        return kernels.raster_lookup(self.grid, self.origin_x, self.origin_y, self.resolution, x, y)

    @property
    def extent(self):
        h, w = self.grid.shape
        return (self.origin_x, self.origin_x + w * self.resolution,
                self.origin_y, self.origin_y + h * self.resolution)


@dataclass(frozen=True)
class CropSpec:
    size: int = 32
    extent_m: float = 32.0
    forward_offset_m: float = 8.0


@dataclass(frozen=True)
class HistorySpec:
    steps: int = 10
    neighbors: int = 4
    radius_m: float = 40.0
    crop: CropSpec = field(default_factory=CropSpec)


@dataclass(frozen=True, eq=False)
class Context:
    map_crop: np.ndarray  # (C, Hc, Wc) in [0, 1]
    history: np.ndarray  # (M+1, H, 4) ego frame, row 0 is the ego
    mask: np.ndarray  # (M+1,) validity, mask[0] always True
    ego_now: AgentState

    def __post_init__(self):
        if self.map_crop.min(initial=0.0) < 0 or self.map_crop.max(initial=0.0) > 1:
            raise InvalidInputError("map_crop values must lie in [0, 1]")
        if not self.mask[0]:
            raise InvalidInputError("history row 0 must be the (valid) target agent")


@dataclass(frozen=True, eq=False)
class ContextBatch:
    """Stacked contexts for batched network evaluation."""

    map_crop: np.ndarray  # (B, C, Hc, Wc)
    history: np.ndarray  # (B, M+1, H, 4)
    mask: np.ndarray  # (B, M+1)
    ego_now: np.ndarray  # (B, 4)

    def __len__(self):
        return self.map_crop.shape[0]

    @classmethod
    def stack(cls, contexts: Sequence[Context]) -> "ContextBatch":
        return cls(
            np.stack([c.map_crop for c in contexts]),
            np.stack([c.history for c in contexts]),
            np.stack([c.mask for c in contexts]),
            np.stack([c.ego_now.as_array() for c in contexts]),
        )

    def take(self, idx) -> "ContextBatch":
        return ContextBatch(self.map_crop[idx], self.history[idx], self.mask[idx], self.ego_now[idx])

    def __getitem__(self, i: int) -> Context:
        return Context(self.map_crop[i], self.history[i], self.mask[i], AgentState.from_array(self.ego_now[i]))

    @classmethod
    def concat(cls, batches: Sequence["ContextBatch"]) -> "ContextBatch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("map_crop", "history", "mask", "ego_now")))


def to_ego_frame(states: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Express (..., 4) world states in the frame of pose (x, y, theta)."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    dx = states[..., 0] - pose[0]
    dy = states[..., 1] - pose[1]
    out = np.empty(states.shape)
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = states[..., 2]
    out[..., 3] = kernels.numpy_backend.wrap_angles(states[..., 3] - pose[2])
    return out


def context_arrays(world_states: np.ndarray, semantic_map: SemanticMap, t: int,
                   spec: HistorySpec = HistorySpec()):
    """Ego-frame (crop, history, mask) for agent 0 at step t.

    world_states is (A, n, 4): agent 0 is the ego, the rest are neighbours.
    """
    H, M = spec.steps, spec.neighbors
    if t < H - 1:
        raise InsufficientHistoryError(f"need t >= H-1 = {H - 1}, got t={t}")
    if world_states.shape[1] <= t:
        raise InsufficientHistoryError(f"state sequences end before step {t}")
    ego = world_states[0, t]
    pose = np.array([ego[0], ego[1], ego[3]])
    window = world_states[:, t - H + 1: t + 1]

    history = np.zeros((M + 1, H, 4))
    mask = np.zeros(M + 1, dtype=np.bool_)
    history[0] = to_ego_frame(window[0], pose)
    mask[0] = True
    if world_states.shape[0] > 1 and M > 0:
        d = np.hypot(world_states[1:, t, 0] - ego[0], world_states[1:, t, 1] - ego[1])
        # stable sort keeps lower agent index first on ties
        order = np.argsort(d, kind="stable")[:M]
        order = order[d[order] <= spec.radius_m]
        for row, j in enumerate(order, start=1):
            history[row] = to_ego_frame(window[j + 1], pose)
            mask[row] = True

    crop = kernels.crop_batch(
        semantic_map.grid, semantic_map.origin_x, semantic_map.origin_y, semantic_map.resolution,
        pose[None], spec.crop.size, spec.crop.extent_m, spec.crop.forward_offset_m,
    )
    return crop, history, mask


def context_from_history(world_states, semantic_map: SemanticMap, t: int,
                         H: int | None = None, M: int | None = None,
                         spec: HistorySpec | None = None) -> Context:
    spec = spec or HistorySpec()
    if H is not None or M is not None:
        spec = HistorySpec(steps=H if H is not None else spec.steps,
                           neighbors=M if M is not None else spec.neighbors,
                           radius_m=spec.radius_m, crop=spec.crop)
    world_states = np.asarray(world_states, dtype=np.float64)
    crop, history, mask = context_arrays(world_states, semantic_map, t, spec)
    return Context(crop, history, mask, AgentState.from_array(world_states[0, t]))


@dataclass(frozen=True, eq=False)
class NeighborProfile:
    """Open-loop scripted motion: travel along ``path`` with a piecewise-linear speed.

    ``speed_knots`` is (K, 2) rows of (time s, speed m/s); speed is held
    constant outside the knot range. ``start_s`` is the arc length at t=0.
    """

    path: np.ndarray
    speed_knots: np.ndarray
    start_s: float = 0.0

    def __post_init__(self):
        path = np.asarray(self.path, dtype=np.float64)
        knots = np.asarray(self.speed_knots, dtype=np.float64).reshape(-1, 2)
        if path.ndim != 2 or path.shape[0] < 2 or path.shape[1] != 2:
            raise InvalidInputError("neighbour path must be (P>=2, 2)")
        if knots.shape[0] < 1 or np.any(np.diff(knots[:, 0]) <= 0):
            raise InvalidInputError("speed knots need strictly increasing times")
        object.__setattr__(self, "path", path)
        object.__setattr__(self, "speed_knots", knots)

    def track(self, n_steps: int, dt: float = DT) -> np.ndarray:
        """States at t = 0, dt, ..., n_steps*dt as an (n_steps+1, 4) array."""
        t = np.arange(n_steps + 1) * dt
        speed = np.interp(t, self.speed_knots[:, 0], np.maximum(self.speed_knots[:, 1], 0.0))
        s = self.start_s + np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * dt)])
        return polyline_states(self.path, s, speed)


def polyline_arclength(path: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(path, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_states(path: np.ndarray, s: np.ndarray, speed: np.ndarray) -> np.ndarray:
    """Position and heading at arc lengths s; extrapolates past either end."""
    cum = polyline_arclength(path)
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(path) - 2)
    p0, p1 = path[seg], path[seg + 1]
    seglen = np.maximum(cum[seg + 1] - cum[seg], 1e-12)
    u = (s - cum[seg]) / seglen
    xy = p0 + (p1 - p0) * u[:, None]
    heading = np.arctan2(p1[:, 1] - p0[:, 1], p1[:, 0] - p0[:, 0])
    out = np.empty((len(s), 4))
    out[:, :2] = xy
    out[:, 2] = speed
    out[:, 3] = kernels.numpy_backend.wrap_angles(heading)
    return out


@dataclass(frozen=True, eq=False)
class Scenario:
    """A closed-loop episode definition.

    ``agents[0]`` is the ego's initial state. ``ego_route`` and
    ``ego_target_speed`` / ``ego_lateral_offset`` parameterise the scripted
    reference driver that produces demonstrations and the history warm-up.
    """

    map: SemanticMap
    agents: tuple
    neighbor_policies: tuple
    duration: float
    ego_route: np.ndarray
    ego_target_speed: float
    ego_lateral_offset: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "neighbor_policies", tuple(self.neighbor_policies))
        object.__setattr__(self, "ego_route", np.asarray(self.ego_route, dtype=np.float64))
        if len(self.agents) != len(self.neighbor_policies) + 1:
            raise InvalidInputError("need one initial state per agent and one profile per neighbour")
        xs = np.array([a.x for a in self.agents])
        ys = np.array([a.y for a in self.agents])
        if not np.all(self.map.drivable(xs, ys)):
            raise InvalidInputError("every initial agent position must be on a drivable cell")

    @property
    def n_neighbors(self) -> int:
        return len(self.neighbor_policies)

    def neighbor_tracks(self, n_steps: int, dt: float = DT) -> np.ndarray:
        """(J, n_steps+1, 4) open-loop neighbour states."""
        if not self.neighbor_policies:
            return np.zeros((0, n_steps + 1, 4))
        return np.stack([p.track(n_steps, dt) for p in self.neighbor_policies])


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Training windows: context at time t plus the next T-step ego trajectory.

    ``states`` (N, T+1, 4) and ``actions`` (N, T, 2) are expressed in the ego
    frame of the context (first state at the origin heading +x).
    """

    contexts: ContextBatch
    states: np.ndarray
    actions: np.ndarray
    scenario_ids: np.ndarray

    def __len__(self):
        return self.states.shape[0]

    def take(self, idx) -> "TrajectoryDataset":
        return TrajectoryDataset(self.contexts.take(idx), self.states[idx], self.actions[idx],
                                 self.scenario_ids[idx])
