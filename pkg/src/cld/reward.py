"""Trajectory-level {-1, 0} rewards and the weighted cost J."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import SemanticMap, Trajectory
from .errors import InvalidInputError

MODES = ("collision", "offroad", "combined")


@dataclass(frozen=True)
class RewardConfig:
    collision_threshold: float = 2.0
    alpha: float = 1.0
    beta_cost: float = 1.0
    mode: str = "collision"

    def __post_init__(self):
        if self.collision_threshold <= 0:
            raise InvalidInputError("collision_threshold must be > 0")
        if self.alpha < 0 or self.beta_cost < 0:
            raise InvalidInputError("reward weights must be >= 0")
        if self.mode not in MODES:
            raise InvalidInputError(f"reward mode {self.mode!r} not in {MODES}")


def _states(traj) -> np.ndarray:
    return traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)


def collision_reward(traj, neighbor_tracks: np.ndarray, threshold: float = 2.0) -> int:
    """-1 if the ego comes strictly closer than ``threshold`` to any neighbour at the same step.

    neighbor_tracks is (J, T+1, >=2) aligned with the trajectory's states.
    """
    s = _states(traj)
    tracks = np.asarray(neighbor_tracks, dtype=np.float64)
    if tracks.size == 0:
        return 0
    if tracks.ndim != 3 or tracks.shape[1] != s.shape[0]:
        raise InvalidInputError(f"neighbour tracks cover {tracks.shape[1] if tracks.ndim == 3 else '?'} "
                                f"steps, trajectory has {s.shape[0]} states")
    d = kernels.min_distance_batch(s[None, :, :2], tracks[None, :, :, :2],
                                   np.ones((1, tracks.shape[0]), dtype=bool))[0]
    return -1 if d < threshold else 0


def offroad_reward(traj, semantic_map: SemanticMap) -> int:
    s = _states(traj)
    m = semantic_map
    return -1 if kernels.offroad_batch(m.grid, m.origin_x, m.origin_y, m.resolution, s[None])[0] else 0


def cost_J(traj, neighbor_tracks, semantic_map: SemanticMap, config: RewardConfig = RewardConfig()) -> float:
    col = collision_reward(traj, neighbor_tracks, config.collision_threshold) < 0
    off = offroad_reward(traj, semantic_map) < 0
    return config.alpha * col + config.beta_cost * off


def task_reward(collided, offroad, config: RewardConfig):
    """Reward used for fine-tuning given violation flags (arrays or scalars)."""
    collided = np.asarray(collided, dtype=np.float64)
    offroad = np.asarray(offroad, dtype=np.float64)
    if config.mode == "collision":
        return -collided
    if config.mode == "offroad":
        return -offroad
    return -(config.alpha * collided + config.beta_cost * offroad)


def violation_flags(states: np.ndarray, tracks: np.ndarray, valid: np.ndarray, semantic_map: SemanticMap,
                    threshold: float = 2.0):
    """Batched predicates: states (B, T+1, 4), tracks (B, J, T+1, >=2), valid (B, J)."""
    m = semantic_map
    off = kernels.offroad_batch(m.grid, m.origin_x, m.origin_y, m.resolution, states)
    if tracks.shape[1] == 0:
        return np.zeros(len(states), dtype=bool), off
    d = kernels.min_distance_batch(np.ascontiguousarray(states[..., :2]),
                                   np.ascontiguousarray(tracks[..., :2]), valid)
    return d < threshold, off
