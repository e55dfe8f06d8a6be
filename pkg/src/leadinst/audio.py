"""Waveform I/O and the preprocessing chain applied to every track.

Order used by the dataset loader: peak-normalize to -0.1 dBFS, downmix to
mono, resample to 24 kHz, cut into 5 s clips with a 2.5 s hop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import gcd

import numpy as np
import scipy.io.wavfile
from scipy.special import i0

from . import kernels
from .errors import AudioFormatError, ParameterError, SilentAudioError, WavParseError

TARGET_SR = 24000
TARGET_PEAK_DB = -0.1
RESAMPLE_TAPS = 64
KAISER_BETA = 9.0
RESAMPLE_ROLLOFF = 0.92


@dataclass
class Waveform:
    """Audio samples, shape ``(n,)`` for mono or ``(n, channels)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim not in (1, 2):
            raise AudioFormatError(f"samples must be 1-D or 2-D, got {self.samples.ndim}-D")

    @property
    def channels(self):
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def n_frames(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return self.n_frames / self.sample_rate


@dataclass(frozen=True)
class ClipWindow:
    start_sec: float = 0.0
    duration_sec: float = 5.0
    hop_sec: float = 2.5

    def __post_init__(self):
        if not 0 < self.hop_sec <= self.duration_sec:
            raise ParameterError("clip window needs 0 < hop_sec <= duration_sec")


def normalize_peak(w, target_db=TARGET_PEAK_DB):
    """Scale so that ``max|x| == 10**(target_db/20)``."""
    if w.samples.size == 0:
        raise SilentAudioError("cannot normalize empty audio")
    peak = np.max(np.abs(w.samples))
    if peak == 0:
        raise SilentAudioError("cannot normalize all-zero audio")
    target = 10.0 ** (target_db / 20.0)
    if peak == target:
        return Waveform(w.samples.copy(), w.sample_rate)
    # dividing first keeps subnormal peaks finite and makes the new peak exactly ``target``
    return Waveform(w.samples / peak * target, w.sample_rate)


def downmix_mono(w):
    if w.channels == 1:
        return Waveform(w.samples.reshape(-1).copy(), w.sample_rate)
    if w.channels != 2:
        raise AudioFormatError(f"unsupported channel count {w.channels}")
    return Waveform(w.samples.mean(axis=1), w.sample_rate)


def _kaiser_sinc_table(L, cutoff, taps=RESAMPLE_TAPS, beta=KAISER_BETA):
    half = taps // 2
    # phase p sits at fractional input position p/L; tap j at input offset j - (half - 1)
    frac = np.arange(L)[:, None] / L
    x = frac - (np.arange(taps)[None, :] - (half - 1))
    window = i0(beta * np.sqrt(np.clip(1.0 - (x / half) ** 2, 0.0, None))) / i0(beta)
    h = cutoff * np.sinc(cutoff * x) * window
    return h / h.sum(axis=1, keepdims=True)


def resample(w, to_hz=TARGET_SR):
    """Kaiser-windowed sinc rate conversion with 64 taps per output phase."""
    if to_hz <= 0:
        raise ParameterError("target sample rate must be positive")
    from_hz = int(w.sample_rate)
    to_hz = int(to_hz)
    if from_hz == to_hz:
        return Waveform(w.samples.copy(), from_hz)
    if w.channels != 1:
        cols = [resample(Waveform(w.samples[:, c], from_hz), to_hz).samples for c in range(w.channels)]
        return Waveform(np.stack(cols, axis=1), to_hz)
    g = gcd(from_hz, to_hz)
    L, M = to_hz // g, from_hz // g
    n_in = w.n_frames
    n_out = int(round(n_in * L / M))
    table = _kaiser_sinc_table(L, min(1.0, L / M) * RESAMPLE_ROLLOFF)
    half = RESAMPLE_TAPS // 2
    pad = RESAMPLE_TAPS
    x = np.concatenate([np.zeros(pad), w.samples, np.zeros(pad + RESAMPLE_TAPS)])
    pos = np.arange(n_out, dtype=np.int64) * M
    base = pos // L - (half - 1) + pad
    phase = pos % L
    return Waveform(kernels.resample_poly(x, table, base, phase), to_hz)


def segment(w, win=ClipWindow()):
    """Fixed-length clips at ``k * hop``; the incomplete tail is dropped."""
    clip = int(round(win.duration_sec * w.sample_rate))
    hop = int(round(win.hop_sec * w.sample_rate))
    start0 = int(round(win.start_sec * w.sample_rate))
    out = []
    s = start0
    while s + clip <= w.n_frames:
        out.append(Waveform(w.samples[s:s + clip].copy(), w.sample_rate))
        s += hop
    return out


def clip_starts(n_samples, sample_rate, win=ClipWindow()):
    """Start times (seconds) of the clips :func:`segment` would produce."""
    clip = int(round(win.duration_sec * sample_rate))
    hop = int(round(win.hop_sec * sample_rate))
    s = int(round(win.start_sec * sample_rate))
    starts = []
    while s + clip <= n_samples:
        starts.append(s / sample_rate)
        s += hop
    return starts


def preprocess(w, to_hz=TARGET_SR, target_db=TARGET_PEAK_DB):
    """Peak-normalize, downmix to mono and resample."""
    return resample(downmix_mono(normalize_peak(w, target_db)), to_hz)


def read_wav(path):
    """Read PCM-16 (scaled by 1/32768) or IEEE float-32 WAV."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.io.wavfile.WavFileWarning)
            sr, data = scipy.io.wavfile.read(path)
    except (FileNotFoundError, IsADirectoryError):
        raise
    except Exception as exc:  # scipy raises ValueError, EOFError or the promoted warning
        raise WavParseError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavParseError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(sr))


def write_wav(path, w):
    """Write IEEE float-32 WAV."""
    scipy.io.wavfile.write(path, int(w.sample_rate), np.asarray(w.samples, dtype=np.float32))
