import numpy as np

from .params import ParameterStore


def adam_update(params: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8, max_grad_norm: float | None = None) -> None:
    """One bias-corrected Adam descent step, then zero all gradients.

    Entries whose gradient slot is empty are treated as having zero gradient.
    ``max_grad_norm`` rescales the global gradient when it is exceeded.
    """
    params.step_count += 1
    t = params.step_count
    scale = 1.0
    if max_grad_norm is not None:
        norm = params.grad_norm()
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in params:
        g = params.grad(name) * scale
        m, v = params.moments(name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr:
            p = params[name]
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()
