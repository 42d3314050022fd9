"""Unicycle transition, rollout, and kinematic profiles for realism metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DT, AgentAction, AgentState, Trajectory
from .errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class KinematicProfile:
    lon_accel: np.ndarray
    lat_accel: np.ndarray
    jerk: np.ndarray


def step(s: AgentState, a: AgentAction, dt: float = DT) -> AgentState:
    """One explicit-Euler unicycle step; speed is floored at zero."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    out = kernels.rollout_batch(s.as_array()[None], a.as_array()[None, None], dt)
    return AgentState.from_array(out[0, 1])


def rollout(s0: AgentState, actions, dt: float = DT) -> Trajectory:
    acts = np.array([a.as_array() if isinstance(a, AgentAction) else a for a in actions],
                    dtype=np.float64).reshape(-1, 2)
    if acts.shape[0] == 0:
        raise InvalidInputError("rollout needs at least one action")
    states = kernels.rollout_batch(s0.as_array()[None], acts[None], dt)[0]
    return Trajectory(states, acts, dt)


def rollout_arrays(init: np.ndarray, actions: np.ndarray, dt: float = DT) -> np.ndarray:
    """Batched rollout on raw arrays: (B, 4), (B, T, 2) -> (B, T+1, 4)."""
    return kernels.rollout_batch(init, actions, dt)


def kinematic_profile(traj: Trajectory) -> KinematicProfile:
    if traj.states.shape[0] < 3:
        raise InvalidInputError("kinematic_profile needs at least 3 states")
    return profile_arrays(traj.states, traj.actions, traj.dt)


def profile_arrays(states: np.ndarray, actions: np.ndarray, dt: float = DT) -> KinematicProfile:
    lon = actions[:, 0].copy()
    lat = states[:-1, 2] * actions[:, 1]
    jerk = np.diff(lon) / dt
    return KinematicProfile(lon, lat, jerk)
