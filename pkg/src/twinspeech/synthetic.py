"""Seeded synthetic 4-class audio corpus used for desk-scale experiments.

Classes: harmonic tone, rising chirp, falling chirp, band-limited noise. Pitch,
level, onset, duration and background noise vary per clip so that the class
is carried by spectro-temporal shape rather than by any single band.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.signal import butter, sosfilt

from .dsp import SAMPLE_RATE, AudioClip, write_wav

CLASSES = ("tone", "chirp_up", "chirp_down", "noise_band")


def _envelope(rng, n):
    length = int(rng.uniform(0.45, 0.95) * n)
    start = int(rng.integers(0, n - length + 1))
    ramp = max(int(0.02 * SAMPLE_RATE), 1)
    env = np.zeros(n)
    seg = np.ones(length)
    seg[:ramp] = np.linspace(0, 1, ramp)
    seg[-ramp:] = np.linspace(1, 0, ramp)
    env[start:start + length] = seg
    return env


def _tone(rng, t):
    f0 = rng.uniform(150.0, 900.0)
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 7) * t)
    x = np.zeros_like(t)
    for k in range(1, int(rng.integers(1, 4)) + 1):
        x += rng.uniform(0.3, 1.0) / k * np.sin(2 * np.pi * f0 * k * np.cumsum(vib) / SAMPLE_RATE + rng.uniform(0, 6.3))
    return x


def _chirp(rng, t, rising):
    lo = rng.uniform(200.0, 1500.0)
    hi = lo * rng.uniform(2.0, 4.0)
    f = np.geomspace(lo, hi, t.size) if rising else np.geomspace(hi, lo, t.size)
    return np.sin(2 * np.pi * np.cumsum(f) / SAMPLE_RATE + rng.uniform(0, 6.3))


def _noise_band(rng, t):
    center = rng.uniform(400.0, 4000.0)
    width = rng.uniform(0.2, 0.6) * center
    lo, hi = max(center - width / 2, 50.0), min(center + width / 2, 7900.0)
    sos = butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    x = sosfilt(sos, rng.normal(size=t.size))
    return x / (np.std(x) * np.sqrt(2) + 1e-12)


def make_clip(label: int, rng: np.random.Generator, seconds: float = 1.0) -> AudioClip:
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    if label == 0:
        x = _tone(rng, t)
    elif label in (1, 2):
        x = _chirp(rng, t, rising=label == 1)
    elif label == 3:
        x = _noise_band(rng, t)
    else:
        raise ValueError(f"label must be in 0..3, got {label}")
    x = x / (np.max(np.abs(x)) + 1e-12) * rng.uniform(0.05, 0.6) * _envelope(rng, n)
    x = x + rng.normal(0.0, rng.uniform(0.001, 0.02), n)
    return AudioClip(np.clip(x, -1.0, 1.0), SAMPLE_RATE)


def make_corpus(n_per_class: int = 100, test_per_class: int = 25, seed: int = 0):
    """Returns ``(clips, labels, splits)`` with classes interleaved."""
    rng = np.random.default_rng(seed)
    clips, labels, splits = [], [], []
    for k in range(n_per_class):
        for label in range(len(CLASSES)):
            clips.append(make_clip(label, rng))
            labels.append(label)
            splits.append("test" if k >= n_per_class - test_per_class else "train")
    return clips, np.array(labels), np.array(splits)


def write_fixture(out_dir, n_per_class: int = 100, test_per_class: int = 25, seed: int = 0) -> str:
    """Write the corpus as 16-bit WAV files plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    clips, labels, splits = make_corpus(n_per_class, test_per_class, seed)
    rows = ["path,label,split"]
    for i, (clip, label, split) in enumerate(zip(clips, labels, splits)):
        name = f"{i:04d}_{CLASSES[label]}.wav"
        write_wav(os.path.join(out_dir, name), clip)
        rows.append(f"{name},{CLASSES[label]},{split}")
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return path
