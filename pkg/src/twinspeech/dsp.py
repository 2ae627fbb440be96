"""Audio frontend: resampling, 1 s segmentation and fixed-shape log-mel features.

Every function here is a pure function of its arguments. A log-mel feature is a
``(513, 32)`` float64 array: 513 triangular mel bands (rows) by 32 STFT frames
(columns) computed from a 1 s, 16 kHz segment.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from math import gcd

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .exceptions import FormatError, InvalidAudio, VersionError

SAMPLE_RATE = 16000
SEGMENT_SAMPLES = 16000
N_FFT = 1024  # 64 ms at 16 kHz
HOP = 512  # 32 ms at 16 kHz
N_MELS = 513
N_FRAMES = 1 + SEGMENT_SAMPLES // HOP
FMIN = 0.0
FMAX = 8000.0
FLOOR = 1e-10
FEATURE_SHAPE = (N_MELS, N_FRAMES)

FEATURE_MAGIC = b"TWSFEAT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class AudioClip:
    """A mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidAudio(f"expected mono samples, got shape {samples.shape}")
        if int(self.sample_rate_hz) <= 0:
            raise InvalidAudio(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise InvalidAudio("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FrontendConfig:
    """Frontend constants. Only ``resample_quality``, ``window`` and ``floor``
    are tunable; the shape-defining values are fixed by the feature contract."""

    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    hop: int = HOP
    n_mels: int = N_MELS
    fmin: float = FMIN
    fmax: float = FMAX
    floor: float = FLOOR
    window: str = "hann"
    mel_scale: str = "htk"
    power: float = 2.0
    segment_seconds: float = 1.0
    min_fill: float = 0.5
    resample_quality: int = 10


# ---------------------------------------------------------------------------
# resampling / segmentation


@lru_cache(maxsize=32)
def _polyphase_filter(up: int, down: int, quality: int) -> np.ndarray:
    max_rate = max(up, down)
    h = firwin(2 * quality * max_rate + 1, 1.0 / max_rate, window=("kaiser", 5.0))
    # unit DC gain on every polyphase branch, so constants pass through exactly
    for phase in range(up):
        h[phase::up] /= up * h[phase::up].sum()
    h.setflags(write=False)
    return h


def resample(clip: AudioClip, target_hz: int = SAMPLE_RATE, quality: int = 10) -> AudioClip:
    """Windowed-sinc polyphase resampling to ``target_hz``.

    The identity case returns the very same samples. Output length is
    ``ceil(len * target / source)``.
    """
    if len(clip) == 0:
        raise InvalidAudio("cannot resample an empty clip")
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise InvalidAudio(f"target rate must be positive, got {target_hz}")
    if target_hz == clip.sample_rate_hz:
        return clip
    g = gcd(target_hz, clip.sample_rate_hz)
    up, down = target_hz // g, clip.sample_rate_hz // g
    h = _polyphase_filter(up, down, int(quality))
    out = resample_poly(clip.samples, up, down, window=h, padtype="line")
    return AudioClip(out, target_hz)


def segment(clip: AudioClip, segment_seconds: float = 1.0, min_fill: float = 0.5) -> list[AudioClip]:
    """Split into fixed-length segments.

    A trailing partial segment is zero-padded when it is at least ``min_fill``
    full and dropped otherwise.
    """
    if len(clip) == 0:
        return []
    seg_len = int(round(segment_seconds * clip.sample_rate_hz))
    out = []
    x = clip.samples
    for start in range(0, len(x), seg_len):
        piece = x[start:start + seg_len]
        if len(piece) < seg_len:
            if len(piece) < min_fill * seg_len:
                break
            piece = np.concatenate([piece, np.zeros(seg_len - len(piece))])
        out.append(AudioClip(piece, clip.sample_rate_hz))
    return out


# ---------------------------------------------------------------------------
# log-mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Centre frequency (Hz) of every triangular band; length ``n_mels + 2``
    including the two outer edges."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``.

    Triangles are evaluated on the FFT bin frequencies, so bands narrower than
    the bin spacing at low frequency can carry zero weight.
    """
    edges = mel_center_frequencies(n_mels, fmin, fmax)
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def stft_power(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centred (reflect-padded) Hann STFT power, shape ``(n_fft // 2 + 1, frames)``."""
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(padded) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def log_mel(seg: AudioClip | np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """Log mel power of one 16000-sample, 16 kHz segment, shape ``(513, 32)``."""
    if isinstance(seg, AudioClip):
        if seg.sample_rate_hz != SAMPLE_RATE:
            raise InvalidAudio(f"segment must be at {SAMPLE_RATE} Hz, got {seg.sample_rate_hz}")
        x = seg.samples
    else:
        x = np.asarray(seg, dtype=np.float64)
    if x.shape != (SEGMENT_SAMPLES,):
        raise InvalidAudio(f"segment must hold exactly {SEGMENT_SAMPLES} samples, got shape {x.shape}")
    power = stft_power(x)
    mel = mel_filterbank() @ power
    return np.log(mel + floor)


def featurize_clip(clip: AudioClip, config: FrontendConfig | None = None) -> np.ndarray:
    """Resample, segment and log-mel a whole clip. Returns ``(k, 513, 32)``."""
    config = config or FrontendConfig()
    clip = resample(clip, config.sample_rate, quality=config.resample_quality)
    segs = segment(clip, config.segment_seconds, config.min_fill)
    if not segs:
        return np.empty((0,) + FEATURE_SHAPE)
    return np.stack([log_mel(s, floor=config.floor) for s in segs])


# ---------------------------------------------------------------------------
# file formats


def read_wav(path) -> AudioClip:
    """Read a PCM16 / PCM32 / float WAV file, averaging channels to mono."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError, EOFError, struct.error) as exc:
        raise InvalidAudio(f"{path}: unreadable WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise InvalidAudio(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise InvalidAudio(f"{path}: no samples")
    return AudioClip(x, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate_hz, pcm)


def write_features(path, features: np.ndarray) -> None:
    """Write ``(k, 513, 32)`` features as little-endian float32 after an 8-byte header."""
    features = np.asarray(features)
    if features.ndim == 2:
        features = features[None]
    if features.shape[1:] != FEATURE_SHAPE:
        raise FormatError(f"features must be (k, 513, 32), got {features.shape}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(FEATURE_MAGIC + bytes([FEATURE_VERSION]))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:7] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    if blob[7] != FEATURE_VERSION:
        raise VersionError(blob[7], FEATURE_VERSION)
    payload = blob[8:]
    per_item = N_MELS * N_FRAMES * 4
    if len(payload) % per_item:
        raise FormatError(f"{path}: truncated feature payload")
    return np.frombuffer(payload, dtype="<f4").reshape((-1,) + FEATURE_SHAPE).astype(np.float64)
