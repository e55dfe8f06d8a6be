"""Log-mel frontend and the small frame-wise encoder shared by all tracks."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as tc
from .errors import ShapeError


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 24000
    fft_size: int = 1024
    hop: int = 480
    n_mels: int = 64
    fmin: float = 30.0
    fmax: float = 12000.0
    log_floor: float = 1e-10
    clip_seconds: float = 5.0

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop

    @property
    def clip_samples(self):
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def n_frames(self):
        return self.clip_samples // self.hop

    def frame_centers(self):
        """Center time in seconds of each frame relative to the clip start."""
        return (np.arange(self.n_frames) * self.hop + self.fft_size / 2) / self.sample_rate

    def to_dict(self):
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig = MelConfig()):
    """Triangular (unit peak) filters, shape ``(n_mels, fft_size // 2 + 1)``."""
    freqs = np.fft.rfftfreq(cfg.fft_size, 1.0 / cfg.sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.flags.writeable = False
    return fb


def mel_centers(cfg: MelConfig = MelConfig()):
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


def log_mel(samples, cfg: MelConfig = MelConfig()):
    """Log mel power spectrogram of one clip, shape ``(n_frames, n_mels)``.

    Frame ``t`` analyses samples ``[t*hop, t*hop + fft_size)``; the clip is
    zero-padded on the right so the last frames are complete.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != cfg.clip_samples:
        raise ShapeError(f"log_mel expects {cfg.clip_samples} mono samples, got {x.shape}")
    T = cfg.n_frames
    padded = np.concatenate([x, np.zeros(cfg.fft_size)])
    frames = sliding_window_view(padded, cfg.fft_size)[::cfg.hop][:T]
    window = np.hanning(cfg.fft_size + 1)[:-1]
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    return np.log(power @ mel_filterbank(cfg).T + cfg.log_floor)


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 64
    d_model: int = 64
    n_blocks: int = 2


def init_encoder(cfg: EncoderConfig, rng):
    """Fresh encoder parameters keyed by name (He-style fan-in scaling)."""
    D = cfg.d_model
    p = {
        "encoder.w_in": rng.normal(0.0, 1.0 / np.sqrt(cfg.n_mels), (cfg.n_mels, D)),
        "encoder.b_in": np.zeros(D),
    }
    for i in range(cfg.n_blocks):
        p[f"encoder.block{i}.ln_g"] = np.ones(D)
        p[f"encoder.block{i}.ln_b"] = np.zeros(D)
        p[f"encoder.block{i}.w1"] = rng.normal(0.0, np.sqrt(2.0 / D), (D, D))
        p[f"encoder.block{i}.b1"] = np.zeros(D)
        p[f"encoder.block{i}.w2"] = rng.normal(0.0, 0.5 / np.sqrt(D), (D, D))
        p[f"encoder.block{i}.b2"] = np.zeros(D)
    return p


def encode(mel, params, cfg: EncoderConfig, in_mean=None, in_std=None):
    """Frame-wise encoder: ``(F, n_mels)`` -> ``(F, d_model)``.

    ``params`` maps names to Tensors. The input is standardized with the
    fixed per-mel statistics ``in_mean``/``in_std`` (no gradient), projected,
    then passed through pre-norm residual MLP blocks. No operation mixes
    frames, so any reordering of input rows reorders the output rows.
    """
    x = np.asarray(mel, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.n_mels:
        raise ShapeError(f"encode expects (frames, {cfg.n_mels}), got {x.shape}")
    if in_mean is not None:
        x = (x - in_mean) / in_std
    h = tc.add(tc.matmul(x, params["encoder.w_in"]), params["encoder.b_in"])
    for i in range(cfg.n_blocks):
        z = tc.layer_norm(h, params[f"encoder.block{i}.ln_g"], params[f"encoder.block{i}.ln_b"])
        z = tc.relu(tc.add(tc.matmul(z, params[f"encoder.block{i}.w1"]), params[f"encoder.block{i}.b1"]))
        z = tc.add(tc.matmul(z, params[f"encoder.block{i}.w2"]), params[f"encoder.block{i}.b2"])
        h = tc.add(h, z)
    return h
