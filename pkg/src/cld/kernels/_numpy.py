"""Pure-numpy reference kernels.

Each function here has a numba twin in ``_numba.py`` with an identical
signature. The numpy versions vectorise over the batch axis and loop only
over time.
"""
import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angles(theta):
    theta = np.asarray(theta, dtype=np.float64)
    r = theta - TWO_PI * np.floor((theta + np.pi) / TWO_PI)
    return np.where(r <= -np.pi, r + TWO_PI, r)


def rollout_batch(init, actions, dt):
    """Unicycle rollout. init (B, 4), actions (B, T, 2) -> states (B, T+1, 4)."""
    B, T, _ = actions.shape
    out = np.empty((B, T + 1, 4))
    out[:, 0] = init
    x, y, v, th = (init[:, i].copy() for i in range(4))
    for t in range(T):
        nx = x + v * np.cos(th) * dt
        ny = y + v * np.sin(th) * dt
        v = np.maximum(0.0, v + actions[:, t, 0] * dt)
        th = wrap_angles(th + actions[:, t, 1] * dt)
        x, y = nx, ny
        out[:, t + 1, 0] = x
        out[:, t + 1, 1] = y
        out[:, t + 1, 2] = v
        out[:, t + 1, 3] = th
    return out


def raster_lookup(grid, origin_x, origin_y, resolution, px, py):
    """Drivable flag of the cell containing each point; out of bounds is False."""
    h, w = grid.shape
    col = np.floor((px - origin_x) / resolution).astype(np.int64)
    row = np.floor((py - origin_y) / resolution).astype(np.int64)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    out = np.zeros(np.shape(px), dtype=np.bool_)
    out[inside] = grid[row[inside], col[inside]]
    return out


def offroad_batch(grid, origin_x, origin_y, resolution, states):
    """True per trajectory if any state (B, T, >=2) sits off the drivable raster."""
    ok = raster_lookup(grid, origin_x, origin_y, resolution, states[..., 0], states[..., 1])
    return ~np.all(ok, axis=1)


def min_distance_batch(ego_xy, others_xy, valid):
    """Minimum ego-neighbour distance over time.

    ego_xy (B, T, 2); others_xy (B, J, T, 2); valid (B, J) -> (B,) with
    +inf where no valid neighbour exists.
    """
    d = np.sqrt(np.sum((others_xy - ego_xy[:, None]) ** 2, axis=-1))
    d = np.where(valid[:, :, None], d, np.inf)
    if d.shape[1] == 0:
        return np.full(ego_xy.shape[0], np.inf)
    return d.min(axis=(1, 2))


def crop_batch(grid, origin_x, origin_y, resolution, poses, size, extent, forward_offset):
    """Ego-centric nearest-cell crops. poses (B, 3) of (x, y, theta) -> (B, size, size)."""
    step = extent / size
    half = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64)
    fwd = forward_offset + (idx - half) * step  # columns
    lat = (half - idx) * step  # rows, top = left of ego
    xe = np.broadcast_to(fwd[None, :], (size, size))
    ye = np.broadcast_to(lat[:, None], (size, size))
    c = np.cos(poses[:, 2])[:, None, None]
    s = np.sin(poses[:, 2])[:, None, None]
    wx = poses[:, 0, None, None] + c * xe - s * ye
    wy = poses[:, 1, None, None] + s * xe + c * ye
    return raster_lookup(grid, origin_x, origin_y, resolution, wx, wy).astype(np.float64)
