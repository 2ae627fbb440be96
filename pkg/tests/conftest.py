import math
import os

import numpy as np
import pytest

from twinspeech import synthetic
from twinspeech.data import FeatureSet
from twinspeech.dsp import log_mel


def brute_bt(za, zb, eps=0.0, center=False):
    """Straight loops over the defining sums, no vectorization."""
    n, m = len(za), len(za[0])
    if center:
        za = [[za[b][i] - sum(za[k][i] for k in range(n)) / n for i in range(m)] for b in range(n)]
        zb = [[zb[b][i] - sum(zb[k][i] for k in range(n)) / n for i in range(m)] for b in range(n)]
    c = [[0.0] * m for _ in range(m)]
    for i in range(m):
        na = math.sqrt(math.fsum(za[b][i] ** 2 for b in range(n)))
        for j in range(m):
            nb = math.sqrt(math.fsum(zb[b][j] ** 2 for b in range(n)))
            num = math.fsum(za[b][i] * zb[b][j] for b in range(n))
            c[i][j] = num / (na + eps) / (nb + eps)
    return c


def brute_mbt(za, zb, eps=0.0, reduction="sum"):
    n, m = len(za), len(za[0])
    c = [[0.0] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            terms = []
            for b in range(n):
                na = math.sqrt(math.fsum(v * v for v in za[b]))
                nb = math.sqrt(math.fsum(v * v for v in zb[b]))
                terms.append(za[b][i] / (na + eps) * zb[b][j] / (nb + eps))
            c[i][j] = math.fsum(terms) / (n if reduction == "mean" else 1)
    return c


def brute_loss(c, lam):
    m = len(c)
    inv = math.fsum((1 - c[i][i]) ** 2 for i in range(m))
    red = math.fsum(c[i][j] ** 2 for i in range(m) for j in range(m) if i != j)
    return inv, red, inv + lam * red


@pytest.fixture(scope="session")
def synthetic_features():
    """The bundled 400-clip fixture as log-mel features (computed once per session)."""
    clips, labels, splits = synthetic.make_corpus()
    X = np.stack([log_mel(c) for c in clips])
    return FeatureSet(X, labels, splits, synthetic.CLASSES)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """A 4-class WAV corpus with 3 train and 1 test clip per class."""
    out = tmp_path_factory.mktemp("fixture")
    return synthetic.write_fixture(str(out), n_per_class=4, test_per_class=1, seed=3)


def tone(freq, seconds=1.0, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def pytest_configure(config):
    os.environ.pop("TWIN_SEED", None)
