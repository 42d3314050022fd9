"""Realism (1-D Wasserstein over kinematic profiles) and failure-rate metrics."""
from __future__ import annotations

import numpy as np

from .dynamics import profile_arrays
from .errors import InvalidInputError

PROFILE_KEYS = ("lon_accel", "lat_accel", "jerk")
TASKS = ("no-collision", "no-offroad")


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions.

    Equal sizes use the sorted pairing; otherwise the quantile functions are
    integrated exactly over the merged breakpoints of both step functions.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("wasserstein_1d needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    q = np.union1d(qa, qb)
    widths = np.diff(np.concatenate([[0.0], q]))
    # quantile value on (q_{i-1}, q_i]
    ia = np.minimum(np.searchsorted(qa, q, side="left"), a.size - 1)
    ib = np.minimum(np.searchsorted(qb, q, side="left"), b.size - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def _pair(item):
    if hasattr(item, "trajectory"):
        item = item.trajectory
    if hasattr(item, "states") and hasattr(item, "actions"):
        return item.states, item.actions
    return item


def pooled_profiles(trajectories, dt: float) -> dict:
    """Concatenate per-trajectory kinematic profiles.

    Items may be Trajectory objects, closed-loop runs, or (states, actions) pairs.
    """
    parts = {k: [] for k in PROFILE_KEYS}
    for item in trajectories:
        states, actions = _pair(item)
        if len(states) < 3:
            continue
        prof = profile_arrays(np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64), dt)
        for k in PROFILE_KEYS:
            parts[k].append(getattr(prof, k))
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in parts.items()}


def realism_breakdown(generated, reference, dt: float) -> dict:
    g = pooled_profiles(generated, dt)
    r = pooled_profiles(reference, dt)
    out = {k: wasserstein_1d(g[k], r[k]) for k in PROFILE_KEYS}
    out["real"] = float(np.mean([out[k] for k in PROFILE_KEYS]))
    return out


def realism_score(generated, reference, dt: float) -> float:
    """Mean of the three W1 distances (lon accel, lat accel, jerk)."""
    return realism_breakdown(generated, reference, dt)["real"]


def failure_rate(runs, task: str) -> float:
    if task not in TASKS:
        raise InvalidInputError(f"task must be one of {TASKS}, got {task!r}")
    runs = list(runs)
    if not runs:
        raise InvalidInputError("failure_rate needs at least one run")
    return float(np.mean([r.failed(task) for r in runs]))


def evaluation_report(runs, reference, task: str, dt: float) -> dict:
    br = realism_breakdown(runs, reference, dt)
    return {
        "task": task,
        "real": br["real"],
        "fail": failure_rate(runs, task),
        "n_runs": len(runs),
        "wasserstein": {k: br[k] for k in PROFILE_KEYS},
    }
