"""numba-compiled twins of the kernels in ``_numpy.py``."""
import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _wrap(theta):
    r = theta - TWO_PI * math.floor((theta + math.pi) / TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@njit(cache=True)
def _wrap_array(theta):
    flat = theta.ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        out[i] = _wrap(flat[i])
    return out.reshape(theta.shape)


def wrap_angles(theta):
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim == 0:
        return np.float64(_wrap(float(arr)))
    return _wrap_array(np.ascontiguousarray(arr))


@njit(cache=True)
def _rollout(init, actions, dt, out):
    B, T = actions.shape[0], actions.shape[1]
    for b in range(B):
        x = init[b, 0]
        y = init[b, 1]
        v = init[b, 2]
        th = init[b, 3]
        out[b, 0, 0] = x
        out[b, 0, 1] = y
        out[b, 0, 2] = v
        out[b, 0, 3] = th
        for t in range(T):
            nx = x + v * math.cos(th) * dt
            ny = y + v * math.sin(th) * dt
            v = max(0.0, v + actions[b, t, 0] * dt)
            th = _wrap(th + actions[b, t, 1] * dt)
            x = nx
            y = ny
            out[b, t + 1, 0] = x
            out[b, t + 1, 1] = y
            out[b, t + 1, 2] = v
            out[b, t + 1, 3] = th


def rollout_batch(init, actions, dt):
    init = np.ascontiguousarray(init, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.float64)
    out = np.empty((actions.shape[0], actions.shape[1] + 1, 4))
    _rollout(init, actions, float(dt), out)
    return out


@njit(cache=True)
def _lookup(grid, ox, oy, res, px, py):
    col = int(math.floor((px - ox) / res))
    row = int(math.floor((py - oy) / res))
    if col < 0 or row < 0 or row >= grid.shape[0] or col >= grid.shape[1]:
        return False
    return grid[row, col]


@njit(cache=True)
def _lookup_flat(grid, ox, oy, res, px, py, out):
    for i in range(px.size):
        out[i] = _lookup(grid, ox, oy, res, px[i], py[i])


def raster_lookup(grid, origin_x, origin_y, resolution, px, py):
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    out = np.empty(px.size, dtype=np.bool_)
    _lookup_flat(grid, float(origin_x), float(origin_y), float(resolution),
                 np.ascontiguousarray(px).ravel(), np.ascontiguousarray(py).ravel(), out)
    return out.reshape(px.shape)


@njit(cache=True)
def _offroad(grid, ox, oy, res, states, out):
    for b in range(states.shape[0]):
        bad = False
        for t in range(states.shape[1]):
            if not _lookup(grid, ox, oy, res, states[b, t, 0], states[b, t, 1]):
                bad = True
                break
        out[b] = bad


def offroad_batch(grid, origin_x, origin_y, resolution, states):
    states = np.ascontiguousarray(states, dtype=np.float64)
    out = np.empty(states.shape[0], dtype=np.bool_)
    _offroad(grid, float(origin_x), float(origin_y), float(resolution), states, out)
    return out


@njit(cache=True)
def _min_dist(ego, others, valid, out):
    B, J, T = others.shape[0], others.shape[1], others.shape[2]
    for b in range(B):
        best = np.inf
        for j in range(J):
            if not valid[b, j]:
                continue
            for t in range(T):
                dx = others[b, j, t, 0] - ego[b, t, 0]
                dy = others[b, j, t, 1] - ego[b, t, 1]
                d = math.sqrt(dx * dx + dy * dy)
                if d < best:
                    best = d
        out[b] = best


def min_distance_batch(ego_xy, others_xy, valid):
    ego_xy = np.ascontiguousarray(ego_xy, dtype=np.float64)
    others_xy = np.ascontiguousarray(others_xy, dtype=np.float64)
    out = np.empty(ego_xy.shape[0])
    _min_dist(ego_xy, others_xy, np.ascontiguousarray(valid, dtype=np.bool_), out)
    return out


@njit(cache=True)
def _crop(grid, ox, oy, res, poses, size, extent, fwd_off, out):
    step = extent / size
    half = (size - 1) / 2.0
    for b in range(poses.shape[0]):
        c = math.cos(poses[b, 2])
        s = math.sin(poses[b, 2])
        for r in range(size):
            ye = (half - r) * step
            for col in range(size):
                xe = fwd_off + (col - half) * step
                wx = poses[b, 0] + c * xe - s * ye
                wy = poses[b, 1] + s * xe + c * ye
                out[b, r, col] = 1.0 if _lookup(grid, ox, oy, res, wx, wy) else 0.0


def crop_batch(grid, origin_x, origin_y, resolution, poses, size, extent, forward_offset):
    poses = np.ascontiguousarray(poses, dtype=np.float64)
    out = np.empty((poses.shape[0], size, size))
    _crop(grid, float(origin_x), float(origin_y), float(resolution), poses,
          int(size), float(extent), float(forward_offset), out)
    return out
