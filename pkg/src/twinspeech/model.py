"""Convolutional encoder with an optional projector head and hand-written backward pass.

Layout is channels-last: a batch of log-mel inputs ``(n, 513, 32)`` becomes
``(n, 513, 32, 1)`` and every stride-2 3x3 convolution halves both spatial axes
(rounding up). Global average pooling yields the backbone representation,
which the projector maps to the ``m``-dimensional latent.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsp import FEATURE_SHAPE
from .exceptions import CacheError, ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class Architecture:
    """Descriptor that fully determines every parameter shape."""

    conv_widths: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    input_shape: tuple = FEATURE_SHAPE
    projector: bool = True
    projector_hidden: int = 128
    latent_dim: int = 64
    activation: str = "relu"
    input_shift: float = -10.0
    input_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self):
        if any(w < 1 for w in self.conv_widths):
            raise ConfigError("conv widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd integer")
        if self.stride < 1:
            raise ConfigError("stride must be positive")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.input_scale == 0:
            raise ConfigError("input_scale must be nonzero")
        if self.projector:
            if self.projector_hidden < 1:
                raise ConfigError("projector_hidden must be positive")
        elif self.latent_dim != self.feature_dim:
            raise ConfigError(
                f"without a projector latent_dim ({self.latent_dim}) must equal the "
                f"backbone width ({self.feature_dim})")

    @property
    def feature_dim(self) -> int:
        return self.conv_widths[-1] if self.conv_widths else 1

    def spatial_shapes(self):
        h, w = self.input_shape
        shapes = [(h, w)]
        pad = self.kernel // 2
        for _ in self.conv_widths:
            h = (h + 2 * pad - self.kernel) // self.stride + 1
            w = (w + 2 * pad - self.kernel) // self.stride + 1
            shapes.append((h, w))
        return shapes

    def param_shapes(self) -> dict:
        shapes = {}
        c_in = 1
        for i, c_out in enumerate(self.conv_widths):
            shapes[f"conv{i}.weight"] = (self.kernel, self.kernel, c_in, c_out)
            shapes[f"conv{i}.bias"] = (c_out,)
            c_in = c_out
        if self.projector:
            shapes["proj0.weight"] = (self.feature_dim, self.projector_hidden)
            shapes["proj0.bias"] = (self.projector_hidden,)
            shapes["proj1.weight"] = (self.projector_hidden, self.latent_dim)
            shapes["proj1.bias"] = (self.latent_dim,)
        return shapes

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def desk(cls, latent_dim: int = 64) -> "Architecture":
        return cls(latent_dim=latent_dim)

    @classmethod
    def upstream(cls) -> "Architecture":
        return cls(conv_widths=(32, 64, 128), projector_hidden=2048, latent_dim=2048)

    @classmethod
    def tiny(cls, latent_dim: int = 8) -> "Architecture":
        return cls(conv_widths=(2, 3), projector_hidden=6, latent_dim=latent_dim)


@dataclass
class ModelParams:
    """Named parameter tensors plus the descriptor that shaped them.

    ``version`` increments on every in-place update so stale activation
    caches can be detected.
    """

    arch: Architecture
    tensors: dict = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if list(self.tensors) != list(expected):
            raise ConfigError(f"parameter names {list(self.tensors)} do not match descriptor {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != tuple(shape):
                raise ShapeError(f"{name}: shape {self.tensors[name].shape}, descriptor wants {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.version)

    def bump(self):
        self.version += 1

    def zeros_like(self) -> "GradientSet":
        return GradientSet(self.arch, {k: np.zeros(v.shape) for k, v in self.tensors.items()})

    def equal(self, other) -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


class GradientSet(ModelParams):
    """Gradients, congruent with the :class:`ModelParams` they belong to."""

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.tensors.values())))


def init(arch: Architecture, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled uniform (He) weights, zero biases."""
    if not isinstance(arch, Architecture):
        raise ConfigError(f"expected an Architecture, got {type(arch).__name__}")
    arch.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(arch, tensors)


# ---------------------------------------------------------------------------
# layers


def _conv_forward(x, w, b, stride):
    k = w.shape[0]
    pad = k // 2
    n, h, wd, _ = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((n, ho, wo, w.shape[3]))
    out[...] = b
    for di in range(k):
        for dj in range(k):
            xs = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
            out += xs @ w[di, dj]
    return out, xp


def _conv_backward(dout, xp, w, stride, need_input_grad=True):
    k = w.shape[0]
    pad = k // 2
    n, ho, wo, c_out = dout.shape
    c_in = w.shape[2]
    dw = np.empty(w.shape)
    dflat = dout.reshape(-1, c_out)
    dxp = np.zeros(xp.shape) if need_input_grad else None
    for di in range(k):
        for dj in range(k):
            sl = (slice(None), slice(di, di + stride * ho, stride), slice(dj, dj + stride * wo, stride))
            xs = xp[sl].reshape(-1, c_in)
            dw[di, dj] = xs.T @ dflat
            if need_input_grad:
                dxp[sl] += dout @ w[di, dj].T
    db = dflat.sum(axis=0)
    dx = None
    if need_input_grad:
        dx = dxp[:, pad:xp.shape[1] - pad, pad:xp.shape[2] - pad, :]
    return dx, dw, db


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def _act_backward(d, z, kind):
    return d * (z > 0) if kind == "relu" else d


@dataclass
class ActivationCache:
    """Everything backward needs. Not shareable across threads."""

    params: ModelParams
    version: int
    batch_size: int
    output: str
    conv_inputs: list
    conv_pre: list
    spatial: tuple
    features: np.ndarray
    proj_in: Optional[np.ndarray] = None
    proj_pre: Optional[np.ndarray] = None
    proj_hidden: Optional[np.ndarray] = None


def _check_batch(arch, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != arch.input_shape or x.shape[0] < 1:
        raise ShapeError(f"expected a (n, {arch.input_shape[0]}, {arch.input_shape[1]}) batch, got {x.shape}")
    return x


def forward(params: ModelParams, batch, output: str = "latent"):
    """Run the encoder. Returns ``(out, cache)``.

    ``output="latent"`` gives the ``n x m`` projector output; ``"features"``
    stops after pooling and gives the ``n x feature_dim`` backbone output.
    """
    arch = params.arch
    if output not in ("latent", "features"):
        raise ValueError(f"unknown output {output!r}")
    x = _check_batch(arch, batch)
    h = ((x - arch.input_shift) / arch.input_scale)[..., None]
    conv_inputs, conv_pre = [], []
    for i in range(len(arch.conv_widths)):
        w = params[f"conv{i}.weight"].astype(np.float64, copy=False)
        b = params[f"conv{i}.bias"].astype(np.float64, copy=False)
        z, xp = _conv_forward(h, w, b, arch.stride)
        conv_inputs.append(xp)
        conv_pre.append(z)
        h = _act(z, arch.activation)
    spatial = h.shape[1:3]
    features = h.mean(axis=(1, 2))
    cache = ActivationCache(params, params.version, x.shape[0], output, conv_inputs, conv_pre, spatial, features)
    if output == "features" or not arch.projector:
        out = features
    else:
        w0 = params["proj0.weight"].astype(np.float64, copy=False)
        w1 = params["proj1.weight"].astype(np.float64, copy=False)
        pre = features @ w0 + params["proj0.bias"]
        hidden = _act(pre, arch.activation)
        out = hidden @ w1 + params["proj1.bias"]
        cache.proj_in, cache.proj_pre, cache.proj_hidden = features, pre, hidden
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite activation in encoder forward pass")
    return out, cache


def backward(cache: ActivationCache, upstream) -> GradientSet:
    """Reverse-mode gradient of ``<upstream, out>`` for every parameter.

    Parameters that the cached forward did not touch (the projector, when
    only backbone features were computed) get zero gradients.
    """
    params = cache.params
    arch = params.arch
    if cache.version != params.version:
        raise CacheError(
            f"activation cache is stale (params version {params.version}, cache from {cache.version})")
    upstream = np.asarray(upstream, dtype=np.float64)
    out_dim = arch.feature_dim if (cache.output == "features" or not arch.projector) else arch.latent_dim
    if upstream.shape != (cache.batch_size, out_dim):
        raise CacheError(f"upstream gradient shape {upstream.shape} does not match cached output "
                         f"({cache.batch_size}, {out_dim})")
    grads = params.zeros_like()
    g = grads.tensors
    d_feat = upstream
    if cache.proj_in is not None:
        g["proj1.weight"] = cache.proj_hidden.T @ upstream
        g["proj1.bias"] = upstream.sum(axis=0)
        d_hidden = upstream @ params["proj1.weight"].astype(np.float64).T
        d_pre = _act_backward(d_hidden, cache.proj_pre, arch.activation)
        g["proj0.weight"] = cache.proj_in.T @ d_pre
        g["proj0.bias"] = d_pre.sum(axis=0)
        d_feat = d_pre @ params["proj0.weight"].astype(np.float64).T
    hs, ws = cache.spatial
    n_layers = len(arch.conv_widths)
    dh = np.broadcast_to(d_feat[:, None, None, :] / (hs * ws),
                         (cache.batch_size, hs, ws, d_feat.shape[1]))
    for i in reversed(range(n_layers)):
        dz = _act_backward(dh, cache.conv_pre[i], arch.activation)
        w = params[f"conv{i}.weight"].astype(np.float64)
        dh, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = _conv_backward(
            dz, cache.conv_inputs[i], w, arch.stride, need_input_grad=i > 0)
    return grads


def encode(params: ModelParams, batch, output: str = "latent", batch_size: int = 64) -> np.ndarray:
    """Forward pass in chunks, discarding caches."""
    x = _check_batch(params.arch, batch)
    return np.concatenate([forward(params, x[i:i + batch_size], output)[0]
                           for i in range(0, x.shape[0], batch_size)])
