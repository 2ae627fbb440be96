"""Central finite-difference checks for the objective and the encoder.

The finite-difference side only ever evaluates forward values (loss values
or encoder outputs); it never touches the analytic backward code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .objective import loss_grad, loss_value

OBJECTIVE_TOL = 1e-5
MODEL_TOL = 1e-4
KINK_MARGIN = 1e-6


@dataclass
class CheckResult:
    label: str
    errors: dict = field(default_factory=dict)
    tol: float = 0.0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def relative_error(analytic, numeric) -> float:
    """Largest absolute deviation scaled by the larger of the two gradients' max-norms."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f, x, h):
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return g


def check_objective(variant="bt", n=4, m=8, seed=0, lam=0.005, eps=1e-9, reduction="sum",
                    center=False, h=1e-4, low=-2.0, high=2.0) -> CheckResult:
    rng = np.random.default_rng(seed)
    za = rng.uniform(low, high, (n, m))
    zb = rng.uniform(low, high, (n, m))
    ga, gb, _ = loss_grad(za, zb, variant, lam, eps, reduction, center)

    def total(a, b):
        return loss_value(a, b, variant, lam, eps, reduction, center).total

    fa = numeric_grad(lambda a: total(a, zb), za, h)
    fb = numeric_grad(lambda b: total(za, b), zb, h)
    label = f"{variant} reduction={reduction} center={center} seed={seed}"
    return CheckResult(label, {"grad_a": relative_error(ga, fa), "grad_b": relative_error(gb, fb)},
                       OBJECTIVE_TOL)


def _preactivations(params, x, output):
    _, cache = model_mod.forward(params, x, output)
    pre = list(cache.conv_pre)
    if cache.proj_pre is not None:
        pre.append(cache.proj_pre)
    return pre


def kink_distance(params, x, output="latent") -> float:
    """Smallest |pre-activation| over the batch; ReLU is not differentiable at 0."""
    return float(min(np.min(np.abs(p)) for p in _preactivations(params, x, output)))


def _pattern(params, inputs, output):
    if params.arch.activation != "relu":
        return b""
    return b"".join(np.packbits(p > 0).tobytes()
                    for x in inputs for p in _preactivations(params, x, output))


def _with(params, name, tensor):
    tensors = dict(params.tensors)
    tensors[name] = tensor
    return model_mod.ModelParams(params.arch, tensors, params.version)


def _param_fd(params, scalar, h, inputs=(), output="latent"):
    """Central differences over every parameter coordinate (params in float64).

    A coordinate whose +h or -h evaluation flips any ReLU relative to the base
    point straddles a kink; it is returned as NaN and excluded from the check.
    """
    base = _pattern(params, inputs, output)
    out = {}
    for name in params.tensors:
        t = np.array(params[name], dtype=np.float64)
        g = np.empty_like(t)
        flat, gflat = t.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            plus = _with(params, name, t)
            fp = scalar(plus)
            crossed = _pattern(plus, inputs, output) != base
            flat[k] = orig - h
            minus = _with(params, name, t)
            fm = scalar(minus)
            crossed = crossed or _pattern(minus, inputs, output) != base
            flat[k] = orig
            gflat[k] = np.nan if crossed else (fp - fm) / (2 * h)
        out[name] = g
    return out


def _compare(analytic, numeric):
    """Per-tensor max deviation, relative to the largest gradient entry over all
    parameters (a tensor whose true gradient is identically zero, such as the
    last bias under centring, would otherwise divide noise by noise)."""
    analytic = getattr(analytic, "tensors", analytic)
    scale = max(max(np.max(np.abs(g)) for g in analytic.values()),
                max(np.nanmax(np.abs(g)) if np.isfinite(g).any() else 0.0 for g in numeric.values()),
                1e-12)
    errors, skipped = {}, 0
    for name, num in numeric.items():
        ok = np.isfinite(num)
        skipped += int(num.size - ok.sum())
        if ok.any():
            errors[name] = float(np.max(np.abs(np.asarray(analytic[name])[ok] - num[ok])) / scale)
    return errors, skipped


def well_conditioned_params(arch, x, seed, output="latent", margin=KINK_MARGIN, min_latent_norm=0.0,
                            tries=200):
    """First float64 initialisation (from ``seed`` upward) whose pre-activations all
    clear the ReLU kink by ``margin``.

    ``min_latent_norm`` additionally rejects draws with a near-dead latent row or
    column: the normalised objectives curve on the scale of that norm, and a
    fixed finite-difference step is only meaningful well inside it.
    """
    for k in range(tries):
        params = model_mod.init(arch, seed + k, dtype=np.float64)
        for name in params.tensors:
            if name.endswith(".bias"):
                # nonzero biases so that bias gradients are exercised too
                params.tensors[name] = np.random.default_rng([seed, k]).uniform(-0.1, 0.1, params[name].shape)
        if arch.activation == "relu" and kink_distance(params, x, output) <= margin:
            continue
        if min_latent_norm > 0:
            z = model_mod.forward(params, x, output)[0]
            if min(np.linalg.norm(z, axis=0).min(), np.linalg.norm(z, axis=1).min()) < min_latent_norm:
                continue
        return params
    raise RuntimeError("could not find kink-free parameters")


def check_model(arch=None, seed=7, n=2, h=1e-3, output="latent") -> CheckResult:
    """Gradient of ``<U, f(params, x)>`` against finite differences over every parameter."""
    arch = arch or model_mod.Architecture.tiny()
    rng = np.random.default_rng(seed)
    x = rng.normal(-10.0, 6.0, (n,) + arch.input_shape)
    params = well_conditioned_params(arch, x, seed, output)
    out, cache = model_mod.forward(params, x, output)
    upstream = rng.normal(size=out.shape)
    grads = model_mod.backward(cache, upstream)

    def scalar(p):
        return float(np.sum(upstream * model_mod.forward(p, x, output)[0]))

    numeric = _param_fd(params, scalar, h, (x,), output)
    errors, skipped = _compare(grads, numeric)
    return CheckResult(f"encoder output={output} seed={seed}", errors, MODEL_TOL, skipped)


def check_end_to_end(variant="bt", arch=None, seed=7, n=4, lam=0.005, eps=1e-9, reduction="sum",
                     center=False, h=1e-3, min_latent_norm=1.0) -> CheckResult:
    """Loss of two encoded views against finite differences over every encoder parameter."""
    arch = arch or model_mod.Architecture.tiny()
    rng = np.random.default_rng(seed)
    xa = rng.normal(-10.0, 6.0, (n,) + arch.input_shape)
    xb = xa + rng.normal(0.0, 1.0, xa.shape)
    params = well_conditioned_params(arch, np.concatenate([xa, xb]), seed,
                                     min_latent_norm=min_latent_norm)

    za, ca = model_mod.forward(params, xa)
    zb, cb = model_mod.forward(params, xb)
    ga, gb, _ = loss_grad(za, zb, variant, lam, eps, reduction, center)
    grad_a = model_mod.backward(ca, ga)
    grad_b = model_mod.backward(cb, gb)

    def scalar(p):
        return loss_value(model_mod.forward(p, xa)[0], model_mod.forward(p, xb)[0],
                          variant, lam, eps, reduction, center).total

    numeric = _param_fd(params, scalar, h, (xa, xb))
    total = {name: grad_a[name] + grad_b[name] for name in params.tensors}
    errors, skipped = _compare(total, numeric)
    return CheckResult(f"end-to-end {variant} reduction={reduction} center={center} seed={seed}",
                       errors, MODEL_TOL, skipped)
