"""TOML run configuration: one file carries every tunable default."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import tomli
import tomli_w

from .augment import AugmentationPolicy, AugmentOp
from .dsp import FrontendConfig
from .exceptions import ConfigError
from .model import Architecture
from .optim import OptimizerConfig
from .pipeline import FinetuneConfig, TrainConfig

SECTIONS = ("dsp", "augment", "model", "objective", "train", "eval")
SEED_ENV = "TWIN_SEED"

_DSP_KEYS = ("floor", "resample_quality", "min_fill", "window", "mel_scale")
_TRAIN_KEYS = ("epochs", "batch_size", "seed", "optimizer", "lr", "beta1", "beta2", "adam_eps", "grad_clip")
_OBJECTIVE_KEYS = ("variant", "lambda", "reduction", "center", "eps")
_EVAL_KEYS = ("fractions", "seeds", "mode", "epochs", "min_steps", "batch_size", "lr")


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fractions: tuple = (0.05, 0.10, 0.50, 1.00)
    seeds: tuple = (0, 1, 2)

    def to_toml_dict(self) -> dict:
        t, f = self.train, self.finetune
        return {
            "dsp": {k: getattr(self.frontend, k) for k in _DSP_KEYS},
            "augment": {"rng_seed": t.policy.rng_seed, "ops": [o.to_dict() for o in t.policy.ops]},
            "model": t.arch.to_dict(),
            "objective": {"variant": t.variant, "lambda": t.lam, "reduction": t.reduction,
                          "center": t.center, "eps": t.eps},
            "train": {"epochs": t.epochs, "batch_size": t.batch_size, "seed": t.seed,
                      "optimizer": t.optimizer.name, "lr": t.optimizer.lr, "beta1": t.optimizer.beta1,
                      "beta2": t.optimizer.beta2, "adam_eps": t.optimizer.eps,
                      "grad_clip": t.optimizer.grad_clip},
            "eval": {"fractions": list(self.fractions), "seeds": list(self.seeds), "mode": f.mode,
                     "epochs": f.epochs, "min_steps": f.min_steps, "batch_size": f.batch_size,
                     "lr": f.optimizer.lr},
        }

    @classmethod
    def from_toml_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        base = cls().to_toml_dict()
        merged = {}
        for section in SECTIONS:
            given = doc.get(section, {})
            if not isinstance(given, dict):
                raise ConfigError(f"[{section}] must be a table")
            bad = set(given) - set(base[section])
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
            merged[section] = {**base[section], **given}
        return cls._build(merged)

    @classmethod
    def _build(cls, d) -> "RunConfig":
        try:
            dsp = d["dsp"]
            if dsp["window"] != "hann" or dsp["mel_scale"] != "htk":
                raise ConfigError("only window='hann' and mel_scale='htk' are implemented")
            frontend = FrontendConfig(**dsp)
            policy = AugmentationPolicy(tuple(AugmentOp(**o) for o in d["augment"]["ops"]),
                                        d["augment"]["rng_seed"])
            arch = Architecture.from_dict(d["model"])
            tr, ob = d["train"], d["objective"]
            opt = OptimizerConfig(tr["optimizer"], tr["lr"], tr["beta1"], tr["beta2"], tr["adam_eps"],
                                  tr["grad_clip"])
            train = TrainConfig(variant=ob["variant"], lam=ob["lambda"], reduction=ob["reduction"],
                                center=ob["center"], eps=ob["eps"], epochs=tr["epochs"],
                                batch_size=tr["batch_size"], seed=tr["seed"], arch=arch, optimizer=opt,
                                policy=policy)
            ev = d["eval"]
            ft = FinetuneConfig(ev["mode"], ev["epochs"], ev["batch_size"],
                                dataclasses.replace(opt, lr=ev["lr"]), ev["min_steps"])
            fractions = tuple(float(x) for x in ev["fractions"])
            if not fractions or any(not 0 < x <= 1 for x in fractions):
                raise ConfigError("eval.fractions must be nonempty and lie in (0, 1]")
            return cls(frontend, train, ft, fractions, tuple(int(s) for s in ev["seeds"]))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls(train=TrainConfig.desk(), finetune=FinetuneConfig(epochs=10, min_steps=100),
                   fractions=(0.05, 1.0))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))


def dumps(config: RunConfig) -> str:
    return tomli_w.dumps(config.to_toml_dict())


def loads(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return RunConfig.from_toml_dict(doc)


def load(path=None, env=None) -> RunConfig:
    """Read ``path`` (defaults when ``None``); ``TWIN_SEED`` overrides the training seed."""
    if path is None:
        config = RunConfig()
    else:
        try:
            with open(path) as fh:
                config = loads(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            config = config.with_seed(int(env[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return config
