"""Fused layer ops with hand-written backward passes.

Each op here replaces a chain of primitives that would otherwise dominate
the graph size (dense, LSTM cell, strided conv, unicycle rollout).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, _node, as_tensor, concat, getitem, reshape


def dense(x, W, b) -> Tensor:
    """x @ W + b for x of shape (B, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: x{x.shape} W{W.shape} b{b.shape}")
    out = x.data @ W.data + b.data
    return _node(out, (x, W, b),
                 lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)), "dense")


def lstm_cell(xproj, state, Wh) -> Tensor:
    """One LSTM step.

    xproj is the already projected input (B, 4H) including the bias, state is
    the packed (B, 2H) array [h, c], Wh is (H, 4H). Gate order i, f, g, o.
    Returns the packed next state.
    """
    xproj, state, Wh = as_tensor(xproj), as_tensor(state), as_tensor(Wh)
    H = Wh.shape[0]
    if Wh.shape != (H, 4 * H) or xproj.shape[1:] != (4 * H,) or state.shape[1:] != (2 * H,) \
            or xproj.shape[0] != state.shape[0]:
        raise ShapeError(f"lstm_cell: xproj{xproj.shape} state{state.shape} Wh{Wh.shape}")
    h, c = state.data[:, :H], state.data[:, H:]
    z = xproj.data + h @ Wh.data
    i = 0.5 * (1.0 + np.tanh(0.5 * z[:, :H]))
    f = 0.5 * (1.0 + np.tanh(0.5 * z[:, H:2 * H]))
    gg = np.tanh(z[:, 2 * H:3 * H])
    o = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * H:]))
    c2 = f * c + i * gg
    tc = np.tanh(c2)
    h2 = o * tc

    def back(g):
        gh, gc = g[:, :H], g[:, H:]
        gct = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gct * gg * i * (1.0 - i),
            gct * c * f * (1.0 - f),
            gct * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        gstate = np.concatenate([dz @ Wh.data.T, gct * f], axis=1)
        return dz, gstate, h.T @ dz

    return _node(np.concatenate([h2, c2], axis=1), (xproj, state, Wh), back, "lstm_cell")


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided 2-D convolution, NCHW layout."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: x{x.shape} w{w.shape} b{b.shape}")
    N, C, Hh, Ww = x.shape
    F, _, kh, kw = w.shape
    Ho, Wo = (Hh - kh) // stride + 1, (Ww - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {Hh}x{Ww}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, -1)
    out = (cols @ wmat.T + b.data).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
        gx = np.zeros(x.shape)
        for di in range(kh):
            for dj in range(kw):
                gx[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += \
                    gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return gx, gw, g2.sum(axis=0)

    return _node(np.ascontiguousarray(out), (x, w, b), back, "conv2d")


def unicycle_rollout(init, actions, dt: float) -> Tensor:
    """Differentiable explicit-Euler unicycle rollout.

    init (B, 4) as (x, y, v, theta); actions (B, T, 2) as (accel, yaw_rate).
    Returns (B, T+1, 4). Heading is left unwrapped inside the graph; callers
    compare headings through a wrapped difference.
    """
    init, actions = as_tensor(init), as_tensor(actions)
    if init.ndim != 2 or init.shape[1] != 4 or actions.ndim != 3 or actions.shape[2] != 2 \
            or actions.shape[0] != init.shape[0]:
        raise ShapeError(f"unicycle_rollout: init{init.shape} actions{actions.shape}")
    B, T, _ = actions.shape
    A = actions.data
    S = np.empty((B, T + 1, 4))
    S[:, 0] = init.data
    active = np.empty((B, T), dtype=bool)
    for t in range(T):
        x, y, v, th = S[:, t, 0], S[:, t, 1], S[:, t, 2], S[:, t, 3]
        vn = v + A[:, t, 0] * dt
        active[:, t] = vn > 0
        S[:, t + 1, 0] = x + v * np.cos(th) * dt
        S[:, t + 1, 1] = y + v * np.sin(th) * dt
        S[:, t + 1, 2] = np.where(active[:, t], vn, 0.0)
        S[:, t + 1, 3] = th + A[:, t, 1] * dt

    def back(g):
        gA = np.zeros((B, T, 2))
        carry = g[:, T].copy()
        for t in range(T - 1, -1, -1):
            v, th = S[:, t, 2], S[:, t, 3]
            c, s = np.cos(th), np.sin(th)
            gx, gy, gv, gth = carry[:, 0], carry[:, 1], carry[:, 2] * active[:, t], carry[:, 3]
            gA[:, t, 0] = gv * dt
            gA[:, t, 1] = gth * dt
            prev = np.empty((B, 4))
            prev[:, 0] = gx
            prev[:, 1] = gy
            prev[:, 2] = (gx * c + gy * s) * dt + gv
            prev[:, 3] = (gy * c - gx * s) * v * dt + gth
            carry = prev + g[:, t]
        return carry, gA

    return _node(S, (init, actions), back, "unicycle_rollout")


def sinusoidal_timestep_embedding(k, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features of integer diffusion steps, shape (N, dim)."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = k[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(k), 1))], axis=1)
    return emb


# ---- parameter-store helpers ----------------------------------------------

def init_dense(store, name, n_in, n_out, rng, bias=0.0):
    store.xavier(f"{name}.W", (n_in, n_out), rng)
    store.add(f"{name}.b", np.full(n_out, float(bias)))


def apply_dense(store, name, x) -> Tensor:
    return dense(x, store[f"{name}.W"], store[f"{name}.b"])


def init_lstm(store, name, n_in, n_hidden, rng):
    store.xavier(f"{name}.Wx", (n_in, 4 * n_hidden), rng)
    store.xavier(f"{name}.Wh", (n_hidden, 4 * n_hidden), rng)
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = 1.0  # forget-gate bias
    store.add(f"{name}.b", b)


def run_lstm(store, name, seq, state=None):
    """Run an LSTM over seq (B, T, in). Returns (list of h_t, final packed state).

    The input projection for all steps is computed in a single matmul.
    """
    seq = as_tensor(seq)
    B, T, n_in = seq.shape
    Wx, b, Wh = store[f"{name}.Wx"], store[f"{name}.b"], store[f"{name}.Wh"]
    H = Wh.shape[0]
    if seq.requires_grad:
        proj = reshape(dense(reshape(seq, (B * T, n_in)), Wx, b), (B, T, 4 * H))
        step_in = [getitem(proj, (slice(None), t)) for t in range(T)]
    else:
        # constant input: per-step projections avoid a full-size gradient per slice
        step_in = [dense(np.ascontiguousarray(seq.data[:, t]), Wx, b) for t in range(T)]
    if state is None:
        state = Tensor(np.zeros((B, 2 * H)))
    hs = []
    for t in range(T):
        state = lstm_cell(step_in[t], state, Wh)
        hs.append(getitem(state, (slice(None), slice(0, H))))
    return hs, state


def run_lstm_const_input(store, name, x, steps, state=None):
    """LSTM driven by the same input x (B, in) at every step."""
    x = as_tensor(x)
    Wh = store[f"{name}.Wh"]
    H = Wh.shape[0]
    proj = dense(x, store[f"{name}.Wx"], store[f"{name}.b"])
    if state is None:
        state = Tensor(np.zeros((x.shape[0], 2 * H)))
    hs = []
    for _ in range(steps):
        state = lstm_cell(proj, state, Wh)
        hs.append(getitem(state, (slice(None), slice(0, H))))
    return hs, state


def init_conv(store, name, c_in, c_out, k, rng):
    store.xavier(f"{name}.w", (c_out, c_in, k, k), rng)
    store.add(f"{name}.b", np.zeros(c_out))


def apply_conv(store, name, x, stride) -> Tensor:
    return conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride)


def packed_state(h, c) -> Tensor:
    return concat([h, c], axis=1)
