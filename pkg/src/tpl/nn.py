"""Trainable parameters, seeded initialization, and the AdamW optimizer.

Training runs in double precision; layer math lives in :mod:`tpl.autodiff`.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Var


class ParamTensor:
    """Named trainable array with an accumulated gradient of the same shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def param_vars(params: dict[str, ParamTensor]) -> dict[str, Var]:
    """Fresh graph leaves sharing the parameter values (one graph per call)."""
    return {name: Var(p.value) for name, p in params.items()}


def harvest_grads(params: dict[str, ParamTensor], leaves: dict[str, Var]):
    """Accumulate leaf gradients back into the parameter tensors."""
    for name, leaf in leaves.items():
        if leaf.grad is not None:
            params[name].grad += leaf.grad


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_conv(rng, name, c_out, c_in, k) -> dict[str, ParamTensor]:
    w = he_uniform(rng, (c_out, c_in, k), c_in * k)
    return {
        f"{name}.w": ParamTensor(f"{name}.w", w),
        f"{name}.b": ParamTensor(f"{name}.b", np.zeros(c_out)),
    }


def init_dense(rng, name, m, n, zero=False) -> dict[str, ParamTensor]:
    w = np.zeros((m, n)) if zero else he_uniform(rng, (m, n), n)
    return {
        f"{name}.w": ParamTensor(f"{name}.w", w),
        f"{name}.b": ParamTensor(f"{name}.b", np.zeros(m)),
    }


class AdamW:
    """AdamW with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1**self.t)
            vhat = v / (1.0 - b2**self.t)
            p.value -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.value)
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"non-finite value for parameter {p.name!r} after update")

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adamw_step(params, optimizer: AdamW):
    """One optimizer step over already-accumulated gradients."""
    optimizer.step()
    optimizer.zero_grad()
    return params, optimizer
