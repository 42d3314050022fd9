import math

import numpy as np

from ..errors import InvalidInputError
from .tensor import Tensor, as_tensor, exp, log, mul, square, sub, tsum

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(x, mu, var, axis=-1) -> Tensor:
    """Diagonal-Gaussian log density summed over ``axis``.

    ``var`` may be a Tensor or a plain array broadcastable to ``x``.
    """
    x, mu = as_tensor(x), as_tensor(mu)
    var_data = var.data if isinstance(var, Tensor) else np.asarray(var, dtype=np.float64)
    if np.any(var_data <= 0):
        raise InvalidInputError("gaussian_log_prob needs strictly positive variances")
    if isinstance(var, Tensor):
        norm = log(var * (2.0 * math.pi))
        quad = square(sub(x, mu)) / (var * 2.0)
        return tsum(-0.5 * norm - quad, axis=axis)
    norm = np.broadcast_to(-0.5 * (LOG_2PI + np.log(var_data)), np.broadcast_shapes(x.shape, mu.shape))
    quad = mul(square(sub(x, mu)), 0.5 / var_data)
    return tsum(sub(norm, quad), axis=axis)


def kl_standard_normal(mu, sigma, axis=-1) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over ``axis``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise InvalidInputError("kl_standard_normal needs sigma > 0")
    s2 = square(sigma)
    return tsum(0.5 * (square(mu) + s2 - 1.0 - log(s2)), axis=axis)


def kl_standard_normal_logvar(mu, logvar, axis=-1) -> Tensor:
    """Same KL written in terms of log sigma^2, which avoids a log of exp."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    return tsum(0.5 * (square(mu) + exp(logvar) - 1.0 - logvar), axis=axis)
