"""scikit-learn style wrappers around the frontend, pre-training and fine-tuning.

Hyperparameters live in ``__init__`` untouched so ``get_params`` /
``set_params`` / ``clone`` work; everything learned ends in an underscore.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import model as model_mod
from ._validation import as_clip, check_features, check_labels
from .augment import AugmentationPolicy
from .data import FeatureSet
from .dsp import FEATURE_SHAPE, FrontendConfig, featurize_clip
from .exceptions import InvalidAudio
from .model import Architecture
from .optim import OptimizerConfig
from .pipeline import FinetuneConfig, TrainConfig, finetune, pretrain, train_scratch_baseline


class LogMelFeaturizer(TransformerMixin, BaseEstimator):
    """Waveforms to (n, 513, 32) log-mel arrays; one row per input clip.

    Inputs are :class:`AudioClip` objects or 1-D arrays at ``sample_rate_hz``.
    Only the first 1 s segment of each clip is kept so rows stay aligned with
    ``y``; use :func:`twinspeech.dsp.featurize_clip` for every segment.
    """

    def __init__(self, floor=1e-10, sample_rate_hz=16000, resample_quality=10, min_fill=0.5):
        self.floor = floor
        self.sample_rate_hz = sample_rate_hz
        self.resample_quality = resample_quality
        self.min_fill = min_fill

    def fit(self, X, y=None):
        self.n_features_out_ = FEATURE_SHAPE
        return self

    def transform(self, X):
        config = FrontendConfig(floor=self.floor, resample_quality=self.resample_quality, min_fill=self.min_fill)
        out = []
        for i, x in enumerate(X):
            segs = featurize_clip(as_clip(x, self.sample_rate_hz), config)
            if len(segs) == 0:
                raise InvalidAudio(f"clip {i} is shorter than {self.min_fill:g} s")
            out.append(segs[0])
        return np.stack(out)


class TwinEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised encoder: ``fit`` pre-trains with BT or MBT, ``transform`` embeds.

    ``output="features"`` returns the pooled backbone vector instead of the
    projector output.
    """

    def __init__(self, variant="mbt", lam=0.005, reduction="sum", center=False, eps=1e-9,
                 epochs=10, batch_size=32, lr=1e-3, conv_widths=(16, 32, 64), latent_dim=64,
                 projector_hidden=128, policy=None, seed=0, output="latent"):
        self.variant = variant
        self.lam = lam
        self.reduction = reduction
        self.center = center
        self.eps = eps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.conv_widths = conv_widths
        self.latent_dim = latent_dim
        self.projector_hidden = projector_hidden
        self.policy = policy
        self.seed = seed
        self.output = output

    def _train_config(self) -> TrainConfig:
        arch = Architecture(conv_widths=tuple(self.conv_widths), projector_hidden=self.projector_hidden,
                            latent_dim=self.latent_dim)
        policy = self.policy if self.policy is not None else AugmentationPolicy.default()
        if isinstance(policy, dict):
            policy = AugmentationPolicy.from_dict(policy)
        return TrainConfig(variant=self.variant, lam=self.lam, reduction=self.reduction, center=self.center,
                           eps=self.eps, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           arch=arch, optimizer=OptimizerConfig(lr=self.lr), policy=policy)

    def fit(self, X, y=None, callback=None):
        X = check_features(X)
        fs = FeatureSet(X, np.zeros(len(X), dtype=int), np.full(len(X), "train"))
        self.checkpoint_ = pretrain(self._train_config(), fs, callback=callback)
        self.loss_history_ = self.checkpoint_.loss_history
        return self

    @property
    def params_(self):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.params

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        return model_mod.encode(self.checkpoint_.params, check_features(X), output=self.output)


class SpeechClassifier(ClassifierMixin, BaseEstimator):
    """Softmax classifier on top of the encoder backbone.

    With a fitted :class:`TwinEncoder` (or a Checkpoint) as ``encoder`` the
    backbone starts from the pre-trained weights; with ``encoder=None`` it is
    trained from scratch. ``fraction`` < 1 trains on a per-class stratified
    subsample.
    """

    def __init__(self, encoder=None, mode="full", epochs=30, batch_size=16, lr=1e-3, fraction=1.0, seed=0):
        self.encoder = encoder
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.fraction = fraction
        self.seed = seed

    def fit(self, X, y):
        X = check_features(X)
        self.classes_, encoded = check_labels(y, len(X))
        fs = FeatureSet(X, encoded, np.full(len(X), "train"), tuple(str(c) for c in self.classes_))
        ft = FinetuneConfig(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size,
                            optimizer=OptimizerConfig(lr=self.lr))
        enc = self.encoder
        if enc is None:
            model, info = train_scratch_baseline(TrainConfig.desk(seed=self.seed), fs, self.fraction, self.seed, ft)
        else:
            ckpt = enc.checkpoint_ if isinstance(enc, TwinEncoder) else enc
            model, info = finetune(ckpt, fs, self.fraction, seed=self.seed, config=ft)
        self.model_ = model
        self.train_indices_ = np.asarray(info["train_indices"])
        self.history_ = info["epochs"]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_features(X))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
