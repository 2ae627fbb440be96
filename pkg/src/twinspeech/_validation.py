"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .dsp import SAMPLE_RATE, AudioClip
from .exceptions import InvalidInput, NumericError, ShapeError


def check_features(X, item_shape=(513, 32)) -> np.ndarray:
    """Coerce ``X`` to a finite float64 array of shape ``(n, *item_shape)``.

    A single item of shape ``item_shape`` is promoted to a batch of one.
    """
    try:
        X = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"features must be numeric: {exc}") from exc
    if X.shape == tuple(item_shape):
        X = X[None]
    if X.ndim != 1 + len(item_shape) or X.shape[1:] != tuple(item_shape):
        raise ShapeError(f"expected features of shape (n, {', '.join(map(str, item_shape))}), got {X.shape}")
    if X.shape[0] == 0:
        raise InvalidInput("no items in X")
    if not np.all(np.isfinite(X)):
        raise NumericError("features contain NaN or infinity")
    return X


def check_labels(y, n: int):
    """Returns ``(classes, encoded)`` with classes sorted as by ``np.unique``."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise InvalidInput("need at least two classes")
    return classes, encoded


def as_clip(x, sample_rate_hz: int = SAMPLE_RATE) -> AudioClip:
    if isinstance(x, AudioClip):
        return x
    return AudioClip(np.asarray(x, dtype=np.float64), sample_rate_hz)
