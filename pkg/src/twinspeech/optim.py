"""Adam and SGD updates over named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def equal(self, other) -> bool:
        return (self.step == other.step and self.m.keys() == other.m.keys() and self.v.keys() == other.v.keys()
                and all(np.array_equal(self.m[k], other.m[k]) for k in self.m)
                and all(np.array_equal(self.v[k], other.v[k]) for k in self.v))


def init_state(params, hyper: OptimizerConfig) -> OptimizerState:
    if hyper.name == "sgd":
        return OptimizerState()
    return OptimizerState(
        0,
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
    )


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(np.sum(np.square(g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def optimizer_step(params: dict, grads: dict, state: OptimizerState, hyper: OptimizerConfig):
    """In-place update of ``params``; tensors keep their dtype. Returns ``(params, state)``.

    ``params`` and ``grads`` are name -> array mappings (``ModelParams`` works too).
    """
    names = list(params.keys()) if isinstance(params, dict) else list(params.tensors)
    tensors = params if isinstance(params, dict) else params.tensors
    for name in names:
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name!r}")
        if np.shape(grads[name]) != tensors[name].shape:
            raise ShapeError(f"{name}: gradient shape {np.shape(grads[name])} != parameter shape {tensors[name].shape}")
    state.step += 1
    if hyper.name == "sgd":
        for name in names:
            p = tensors[name]
            p[...] = p - hyper.lr * np.asarray(grads[name], dtype=np.float64)
    else:
        b1, b2 = hyper.beta1, hyper.beta2
        bc1 = 1.0 - b1 ** state.step
        bc2 = 1.0 - b2 ** state.step
        for name in names:
            g = np.asarray(grads[name], dtype=np.float64)
            m = state.m[name]
            v = state.v[name]
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p = tensors[name]
            p[...] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    if not isinstance(params, dict):
        params.bump()
    return params, state
