"""Central finite-difference gradient checks against the autodiff engine."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParameterStore
from .tensor import Tensor


def forward_backward(loss_fn: Callable[[], Tensor], params: ParameterStore) -> float:
    """Evaluate a scalar loss and accumulate its gradients into ``params``."""
    loss = loss_fn()
    loss.backward()
    return loss.item()


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: ParameterStore,
                    rng: np.random.Generator | None = None, max_coords: int | None = None,
                    h: float = 1e-5) -> tuple[float, np.ndarray, np.ndarray]:
    """Compare analytic gradients with central differences.

    When ``max_coords`` is given, a random subset of that many flat
    coordinates is checked instead of every parameter value.
    Returns (relative error, analytic, numeric) over the checked coordinates.
    """
    params.zero_grad()
    forward_backward(loss_fn, params)
    analytic = params.flat_grad()
    params.zero_grad()
    base = params.flat()
    n = base.size
    if max_coords is None or max_coords >= n:
        coords = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    numeric = np.empty(len(coords))
    for j, i in enumerate(coords):
        vec = base.copy()
        vec[i] += h
        params.set_flat(vec)
        up = loss_fn().item()
        vec[i] -= 2 * h
        params.set_flat(vec)
        down = loss_fn().item()
        numeric[j] = (up - down) / (2 * h)
    params.set_flat(base)
    return relative_error(analytic[coords], numeric), analytic[coords], numeric
