"""Spectrogram-domain distortions producing the two views of each batch item."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dsp import FEATURE_SHAPE, FLOOR
from .exceptions import InvalidInput, InvalidPolicy

POLICY_SCHEMA_VERSION = 1
FLOOR_VALUE = float(np.log(FLOOR))

_PARAM_KEYS = {
    "time_mask": {"max_width", "start", "width", "fill"},
    "freq_mask": {"max_width", "start", "width", "fill"},
    "gain": {"low", "high", "value"},
    "additive_noise": {"sigma"},
}


@dataclass(frozen=True)
class AugmentOp:
    op: str
    params: dict = field(default_factory=dict)
    p: float = 1.0

    def __post_init__(self):
        if self.op not in _PARAM_KEYS:
            raise InvalidPolicy(f"unknown augmentation op {self.op!r}")
        unknown = set(self.params) - _PARAM_KEYS[self.op]
        if unknown:
            raise InvalidPolicy(f"{self.op}: unknown parameters {sorted(unknown)}")
        if not 0.0 <= float(self.p) <= 1.0:
            raise InvalidPolicy(f"{self.op}: probability {self.p} outside [0, 1]")
        _check_params(self.op, self.params)

    def to_dict(self):
        return {"op": self.op, "params": dict(self.params), "p": self.p}


def _check_params(op, params):
    for key in ("max_width", "start", "width"):
        if key in params and (int(params[key]) != params[key] or params[key] < 0):
            raise InvalidPolicy(f"{op}: {key} must be a nonnegative integer")
    if "low" in params or "high" in params:
        if params.get("low", 0.0) > params.get("high", 0.0):
            raise InvalidPolicy(f"{op}: empty range [{params.get('low')}, {params.get('high')}]")
    if params.get("sigma", 0.0) < 0:
        raise InvalidPolicy(f"{op}: sigma must be nonnegative")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered list of ops, each applied with its own probability."""

    ops: tuple = ()
    rng_seed: int = 0

    def __post_init__(self):
        ops = tuple(o if isinstance(o, AugmentOp) else AugmentOp(**o) for o in self.ops)
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "rng_seed", int(self.rng_seed))

    @classmethod
    def default(cls, rng_seed: int = 0) -> "AugmentationPolicy":
        return cls(
            ops=(
                AugmentOp("time_mask", {"max_width": 8}, 0.5),
                AugmentOp("freq_mask", {"max_width": 64}, 0.5),
                AugmentOp("gain", {"low": -1.0, "high": 1.0}, 0.5),
                AugmentOp("additive_noise", {"sigma": 0.05}, 0.5),
            ),
            rng_seed=rng_seed,
        )

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentationPolicy":
        return cls((), rng_seed)

    def to_dict(self):
        return {
            "schema_version": POLICY_SCHEMA_VERSION,
            "rng_seed": self.rng_seed,
            "ops": [o.to_dict() for o in self.ops],
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version", POLICY_SCHEMA_VERSION)
        if version != POLICY_SCHEMA_VERSION:
            raise InvalidPolicy(f"unsupported policy schema_version {version}")
        try:
            return cls(tuple(AugmentOp(**o) for o in d.get("ops", [])), d.get("rng_seed", 0))
        except TypeError as exc:
            raise InvalidPolicy(f"malformed policy: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPolicy":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InvalidPolicy(f"policy is not valid JSON: {exc}") from exc


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray

    def __len__(self):
        return self.view_a.shape[0]


def _mask(x, axis, params, rng):
    size = x.shape[axis]
    if "width" in params:
        width = int(params["width"])
        start = int(params.get("start", 0))
    else:
        width = int(rng.integers(0, int(params.get("max_width", 0)) + 1))
        start = int(rng.integers(0, max(size - width, 0) + 1))
    out = x.copy()
    if width:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, min(start + width, size))
        out[tuple(idx)] = params.get("fill", FLOOR_VALUE)
    return out


def apply_op(x: np.ndarray, op_name: str, params: dict, rng: np.random.Generator) -> np.ndarray:
    """Apply one distortion to a ``(bins, frames)`` log-mel array; returns a new array."""
    if op_name == "time_mask":
        return _mask(x, 1, params, rng)
    if op_name == "freq_mask":
        return _mask(x, 0, params, rng)
    if op_name == "gain":
        g = params["value"] if "value" in params else rng.uniform(params.get("low", 0.0), params.get("high", 0.0))
        return x + g
    if op_name == "additive_noise":
        return x + rng.normal(0.0, params.get("sigma", 0.0), size=x.shape)
    raise InvalidPolicy(f"unknown augmentation op {op_name!r}")


def item_rng(policy_seed: int, step_seed: int, index: int, branch: int) -> np.random.Generator:
    return np.random.default_rng([int(policy_seed), int(step_seed), int(index), int(branch)])


def augment_item(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    out = x
    for op in policy.ops:
        # the coin is always drawn so later ops see the same stream
        if rng.random() < op.p:
            out = apply_op(out, op.op, op.params, rng)
    return out


def make_views(batch, policy: AugmentationPolicy, step_seed: int = 0,
               item_shape: tuple = FEATURE_SHAPE) -> ViewPair:
    """Two independent draws of ``policy`` per item.

    Item ``k`` of branch ``b`` depends only on ``(policy.rng_seed, step_seed, k, b)``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0 or batch.shape[1:] != tuple(item_shape):
        raise InvalidInput(f"expected a nonempty (n, {item_shape[0]}, {item_shape[1]}) batch, got {batch.shape}")
    if not policy.ops:
        return ViewPair(batch.copy(), batch.copy())
    views = []
    for branch in (0, 1):
        views.append(np.stack([
            augment_item(x, policy, item_rng(policy.rng_seed, step_seed, k, branch))
            for k, x in enumerate(batch)
        ]))
    return ViewPair(*views)
