from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidInputError, ShapeError
from .tensor import Tensor


class ParameterStore:
    """Named trainable arrays with gradient slots and Adam moments.

    Each entry is a leaf :class:`Tensor`; its ``grad`` attribute is the
    gradient slot that ``backward`` accumulates into.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise InvalidInputError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        self._m[name] = np.zeros(t.shape)
        self._v[name] = np.zeros(t.shape)
        return t

    def xavier(self, name: str, shape, rng: np.random.Generator) -> Tensor:
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            receptive = int(np.prod(shape[2:]))
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def grad(self, name: str) -> np.ndarray:
        g = self._tensors[name].grad
        return np.zeros(self._tensors[name].shape) if g is None else g

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def moments(self, name: str):
        return self._m[name], self._v[name]

    def reset_optimizer(self):
        """Zero the Adam moments and step count; weights are untouched."""
        for k in self._tensors:
            self._m[k] = np.zeros_like(self._m[k])
            self._v[k] = np.zeros_like(self._v[k])
        self.step_count = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            if k not in self._tensors:
                raise InvalidInputError(f"unknown parameter {k!r}")
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._tensors[k].shape:
                raise ShapeError(f"parameter {k!r}: shape {v.shape} != {self._tensors[k].shape}")
            self._tensors[k].data = v.copy()

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for k, t in self._tensors.items():
            new.add(k, t.data)
            new._m[k] = self._m[k].copy()
            new._v[k] = self._v[k].copy()
        new.step_count = self.step_count
        return new

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._tensors.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grad(k).ravel() for k in self._tensors])

    def set_flat(self, vec: np.ndarray):
        i = 0
        for t in self._tensors.values():
            n = t.size
            t.data = vec[i:i + n].reshape(t.shape).copy()
            i += n

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(self.grad(k) ** 2) for k in self._tensors)))
