"""Stage 1 (self-supervised pre-training) and Stage 2 (supervised fine-tuning)."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .augment import AugmentationPolicy, make_views
from .checkpoint import Checkpoint
from .data import FeatureSet, as_feature_set, subsample
from .exceptions import ConfigError, DataError, NumericError, SubsampleError
from .model import Architecture, ModelParams
from .objective import DEFAULT_EPS, DEFAULT_LAMBDA, REDUCTIONS, VARIANTS, loss_grad
from .optim import OptimizerConfig, clip_by_global_norm, init_state, optimizer_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Stage 1 settings. Defaults are the full-scale ones (n=64, m=2048, 50 epochs)."""

    variant: str = "mbt"
    lam: float = DEFAULT_LAMBDA
    reduction: str = "sum"
    center: bool = False
    eps: float = DEFAULT_EPS
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    arch: Architecture = field(default_factory=Architecture.upstream)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy.default)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("pre-training needs batch_size >= 2")

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=10, batch_size=32, arch=Architecture.desk())
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "lambda": self.lam, "reduction": self.reduction,
            "center": self.center, "eps": self.eps, "epochs": self.epochs,
            "batch_size": self.batch_size, "seed": self.seed,
            "arch": self.arch.to_dict(), "optimizer": dataclasses.asdict(self.optimizer),
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        return cls(
            variant=d["variant"], lam=d["lambda"], reduction=d["reduction"], center=d["center"],
            eps=d["eps"], epochs=d["epochs"], batch_size=d["batch_size"], seed=d["seed"],
            arch=Architecture.from_dict(d["arch"]), optimizer=OptimizerConfig(**d["optimizer"]),
            policy=AugmentationPolicy.from_dict(d["policy"]),
        )


@dataclass(frozen=True)
class FinetuneConfig:
    """Stage 2 settings: affine softmax head on the pooled encoder output.

    ``min_steps`` raises the epoch count on small subsamples so that every
    fraction gets at least that many optimizer steps (0 disables it).
    """

    mode: str = "full"
    epochs: int = 30
    batch_size: int = 16
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    min_steps: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "probe"):
            raise ConfigError(f"mode must be 'full' or 'probe', got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.min_steps < 0:
            raise ConfigError("finetune epochs and min_steps must be >= 0 and batch_size >= 1")

    def epochs_for(self, n_items: int) -> int:
        if self.epochs == 0 or self.min_steps == 0:
            return self.epochs
        per_epoch = -(-n_items // self.batch_size)
        return max(self.epochs, -(-self.min_steps // per_epoch))

    def to_dict(self):
        return {"mode": self.mode, "epochs": self.epochs, "batch_size": self.batch_size,
                "optimizer": dataclasses.asdict(self.optimizer), "min_steps": self.min_steps}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.get("mode", "full"), d.get("epochs", 30), d.get("batch_size", 16),
                   OptimizerConfig(**d.get("optimizer", {})), d.get("min_steps", 0))


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class StepRecord:
    epoch: int
    step: int
    invariance: float
    redundancy: float
    total: float
    wall_ms: float = 0.0

    def loss_dict(self):
        return {"epoch": self.epoch, "step": self.step, "invariance": self.invariance,
                "redundancy": self.redundancy, "total": self.total}

    def to_json(self):
        return json.dumps({**self.loss_dict(), "wall_ms": round(self.wall_ms, 3)})


def _batches(n_items, batch_size, rng, drop_last):
    order = rng.permutation(n_items)
    stop = (n_items // batch_size) * batch_size if drop_last else n_items
    return [order[i:i + batch_size] for i in range(0, stop, batch_size)]


def pretrain(config: TrainConfig, data, callback=None, prefetch: bool = False, meta: dict | None = None) -> Checkpoint:
    """Self-supervised pre-training on every item of ``data`` (labels ignored).

    Each step draws ``batch_size`` items, builds two augmented views, encodes
    both, and descends the chosen correlation objective. The last incomplete
    batch of every epoch is dropped. ``callback(record)`` receives a
    :class:`StepRecord` after every step. With ``prefetch`` the views of the
    next step are prepared on a worker thread; results are identical.
    """
    fs = as_feature_set(data)
    if len(fs) == 0:
        raise DataError("pre-training data is empty")
    if len(fs) < config.batch_size:
        raise DataError(f"need at least batch_size={config.batch_size} items, got {len(fs)}")
    rng = np.random.default_rng(config.seed)
    params = model_mod.init(config.arch, config.seed)
    state = init_state(params, config.optimizer)
    history = []
    plan = [(epoch, idx) for epoch in range(config.epochs)
            for idx in _batches(len(fs), config.batch_size, rng, drop_last=True)]

    def views_for(step):
        return make_views(fs.X[plan[step][1]], config.policy, step_seed=step, item_shape=config.arch.input_shape)

    pool = ThreadPoolExecutor(max_workers=1) if prefetch else None
    pending = pool.submit(views_for, 0) if pool else None
    try:
        for step, (epoch, _) in enumerate(plan):
            t0 = time.perf_counter()
            views = pending.result() if pool else views_for(step)
            if pool and step + 1 < len(plan):
                pending = pool.submit(views_for, step + 1)
            try:
                za, cache_a = model_mod.forward(params, views.view_a)
                zb, cache_b = model_mod.forward(params, views.view_b)
                ga, gb, loss = loss_grad(za, zb, config.variant, config.lam, config.eps,
                                         config.reduction, config.center)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(loss.total):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            grads = model_mod.backward(cache_a, ga)
            for name, g in model_mod.backward(cache_b, gb).items():
                grads.tensors[name] += g
            clip_by_global_norm(grads.tensors, config.optimizer.grad_clip)
            optimizer_step(params, grads.tensors, state, config.optimizer)
            record = StepRecord(epoch, step, loss.invariance, loss.redundancy, loss.total,
                                (time.perf_counter() - t0) * 1e3)
            history.append(record.loss_dict())
            if callback:
                callback(record)
    finally:
        if pool:
            pool.shutdown(wait=True)
    return Checkpoint(config.to_dict(), params, state, config.epochs, history, dict(meta or {}))


def epoch_summary(history: list) -> list:
    """Mean invariance / redundancy / total per epoch."""
    out = {}
    for rec in history:
        out.setdefault(rec["epoch"], []).append(rec)
    return [{"epoch": e, "steps": len(rs),
             **{k: float(np.mean([r[k] for r in rs])) for k in ("invariance", "redundancy", "total")}}
            for e, rs in sorted(out.items())]


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class FineTunedModel:
    """Encoder plus classification head on the pooled backbone output.

    The head standardizes features with statistics frozen at the start of
    fine-tuning, then applies an affine map to class logits.
    """

    params: ModelParams
    head_weight: np.ndarray
    head_bias: np.ndarray
    classes: tuple = ()
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.head_weight.shape[1]

    def decision_function(self, X, batch_size: int = 64) -> np.ndarray:
        feats = model_mod.encode(self.params, X, output="features", batch_size=batch_size)
        return self.standardize(feats) @ self.head_weight + self.head_bias

    def standardize(self, feats):
        if self.feature_mean is None:
            return feats
        return (feats - self.feature_mean) / self.feature_scale

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.decision_function(X), axis=1)


def _softmax_xent(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def feature_stats(feats: np.ndarray, min_scale: float = 1e-6):
    """Per-dimension mean and standard deviation; constant dimensions get scale 1."""
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    return mean, np.where(std > min_scale, std, 1.0)


def _train_head(params: ModelParams, fs: FeatureSet, n_classes: int, cfg: FinetuneConfig, seed: int):
    rng = np.random.default_rng([seed, 1])
    params = params.copy()
    head = {"head.weight": np.zeros((params.arch.feature_dim, n_classes), dtype=np.float32),
            "head.bias": np.zeros(n_classes, dtype=np.float32)}
    trainable = dict(head)
    if cfg.mode == "full":
        # the projector is not on the classification path
        trainable.update({k: v for k, v in params.items() if not k.startswith("proj")})
    state = init_state(trainable, cfg.optimizer)
    feats0 = model_mod.encode(params, fs.X, output="features")
    mean, scale = feature_stats(feats0)
    frozen_feats = (feats0 - mean) / scale if cfg.mode == "probe" else None
    log_rows = []
    for epoch in range(cfg.epochs_for(len(fs))):
        losses = []
        for idx in _batches(len(fs), cfg.batch_size, rng, drop_last=False):
            if frozen_feats is not None:
                feats, cache = frozen_feats[idx], None
            else:
                raw, cache = model_mod.forward(params, fs.X[idx], output="features")
                feats = (raw - mean) / scale
            logits = feats @ head["head.weight"] + head["head.bias"]
            loss, dlogits = _softmax_xent(logits, fs.y[idx])
            grads = {"head.weight": feats.T @ dlogits, "head.bias": dlogits.sum(axis=0)}
            if cache is not None:
                dfeat = dlogits @ head["head.weight"].astype(np.float64).T / scale
                enc = model_mod.backward(cache, dfeat)
                grads.update({k: enc[k] for k in trainable if k in enc.tensors})
            clip_by_global_norm(grads, cfg.optimizer.grad_clip)
            optimizer_step(trainable, grads, state, cfg.optimizer)
            if cache is not None:
                params.bump()
            losses.append(loss)
        if not np.isfinite(np.mean(losses)):
            raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
        log_rows.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return FineTunedModel(params, head["head.weight"], head["head.bias"], (), mean, scale), log_rows


def _labeled_train(data, fraction, seed):
    fs = as_feature_set(data)
    n_classes = fs.n_classes
    sub = subsample(fs, fraction, seed).where("train")
    missing = sorted(set(range(n_classes)) - set(np.unique(sub.y).tolist()))
    if missing:
        raise SubsampleError(f"classes {missing} absent from the training subsample at fraction {fraction}")
    return sub, n_classes, fs.classes


def finetune(ckpt: Checkpoint, data, fraction: float = 1.0, mode: str | None = None, seed: int = 0,
             config: FinetuneConfig | None = None):
    """Stage 2: attach a zero-initialised softmax head and train on a stratified
    ``fraction`` of the training split. ``mode="probe"`` freezes the encoder."""
    config = config or FinetuneConfig()
    if mode is not None:
        config = dataclasses.replace(config, mode=mode)
    train, n_classes, classes = _labeled_train(data, fraction, seed)
    model, rows = _train_head(ckpt.params, train, n_classes, config, seed)
    model.classes = classes
    return model, {"fraction": fraction, "seed": seed, "mode": config.mode, "n_train": len(train),
                   "train_indices": train.source.tolist(), "epochs": rows}


def train_scratch_baseline(config: TrainConfig, data, fraction: float = 1.0, seed: int = 0,
                           finetune_config: FinetuneConfig | None = None):
    """Same architecture and head, randomly initialised, trained only on the subsample."""
    finetune_config = finetune_config or FinetuneConfig()
    train, n_classes, classes = _labeled_train(data, fraction, seed)
    params = model_mod.init(config.arch, config.seed)
    model, rows = _train_head(params, train, n_classes, dataclasses.replace(finetune_config, mode="full"), seed)
    model.classes = classes
    return model, {"fraction": fraction, "seed": seed, "mode": "scratch", "n_train": len(train),
                   "train_indices": train.source.tolist(), "epochs": rows}
