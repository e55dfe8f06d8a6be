"""Synthetic multitrack songs with known lead schedules.

Each instrument is an additive-synthesis timbre. Every track plays a quiet
sustained accompaniment line, except during its lead segments where it plays
a louder (+9 dB RMS), faster melodic line with vibrato. Tracks leak into each
other at ``bleed_db`` and the mixture is a gain-weighted sum of the (bled)
tracks.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .audio import TARGET_SR, Waveform, normalize_peak, write_wav
from .errors import AnnotationError, ConfigError, ScheduleGapError
from .frontend import MelConfig, log_mel
from .sample import TRACK, UNKNOWN_INSTRUMENT

LEAD_BOOST_DB = 9.0
GRID_SEC = 2.5
MIN_SEGMENT_SEC = 2.5
MANIFEST_VERSION = 1
TIMBRE_MIN_DISTANCE = 1.0  # RMS log-mel distance; the closest built-in pair sits near 1.5


@dataclass(frozen=True)
class InstrumentTimbre:
    name: str
    harmonics: tuple  # relative amplitude of partial k = 1..K
    register: tuple  # (lowest, highest) MIDI note
    vibrato_hz: float = 0.0
    vibrato_cents: float = 0.0
    attack: float = 0.02
    decay: float = 0.0  # exponential decay rate (1/s); 0 = sustained
    noise: float = 0.0  # breath/bow noise relative level
    inharmonic: float = 0.0  # stiffness coefficient B: f_k = k f0 sqrt(1 + B k^2)


def _profile(kind, n=24, **kw):
    k = np.arange(1, n + 1, dtype=np.float64)
    if kind == "saw":
        a = 1.0 / k ** kw.get("p", 1.0)
    elif kind == "odd":
        a = np.where(k % 2 == 1, 1.0 / k ** kw.get("p", 1.0), kw.get("even", 0.0) / k)
    elif kind == "drawbar":
        a = np.zeros(n)
        for h, amp in kw["bars"].items():
            a[h - 1] = amp
    elif kind == "peak":
        a = (k / kw["at"]) ** 2 * np.exp(-2.0 * (k / kw["at"] - 1.0)) / k ** 0.3
    else:
        raise ValueError(kind)
    return tuple(np.round(a, 6))


# ordered by popularity (used by the lead-frequency skew)
DOMAIN_A = (
    InstrumentTimbre("vocals", _profile("peak", at=3.0), (57, 74), 5.5, 45.0, attack=0.06, noise=0.02),
    InstrumentTimbre("e_guitar", _profile("saw", p=0.8), (52, 79), 0.0, 0.0, attack=0.005, decay=1.5),
    InstrumentTimbre("piano", _profile("saw", p=1.6), (48, 84), attack=0.003, decay=2.5, inharmonic=4e-4),
    InstrumentTimbre("sax", _profile("peak", at=5.0), (49, 75), 4.5, 20.0, attack=0.03, noise=0.03),
    InstrumentTimbre("violin", _profile("saw", p=1.1), (55, 88), 6.0, 30.0, attack=0.08, noise=0.015),
    InstrumentTimbre("trumpet", _profile("peak", at=7.0), (55, 79), 5.0, 12.0, attack=0.04),
    InstrumentTimbre("flute", _profile("saw", p=3.5), (60, 93), 5.0, 20.0, attack=0.06, noise=0.06),
    InstrumentTimbre("bass", _profile("saw", p=2.2), (28, 52), attack=0.005, decay=1.0),
)
HELDOUT = InstrumentTimbre(
    "organ", _profile("drawbar", bars={1: 1.0, 2: 0.8, 3: 0.6, 4: 0.5, 6: 0.4, 8: 0.35}), (48, 79)
)
DOMAIN_B = (
    InstrumentTimbre("clarinet", _profile("odd", p=1.0, even=0.05), (50, 82), 0.0, 0.0, attack=0.04),
    InstrumentTimbre("cello", _profile("saw", p=1.3), (36, 67), 5.5, 35.0, attack=0.09, noise=0.01),
    InstrumentTimbre("synth_lead", _profile("odd", p=0.7, even=0.5), (55, 86), 7.0, 15.0, attack=0.01),
    InstrumentTimbre("oboe", _profile("peak", at=4.0), (58, 89), 5.0, 15.0, attack=0.03),
    InstrumentTimbre("marimba", _profile("drawbar", bars={1: 1.0, 4: 0.35, 10: 0.12}), (45, 84),
                     attack=0.002, decay=6.0),
    InstrumentTimbre("horn", _profile("saw", p=2.6), (41, 72), 4.0, 10.0, attack=0.07),
)
TIMBRES = {t.name: t for t in DOMAIN_A + (HELDOUT,) + DOMAIN_B}
# domain-specific mixture gain ranges
MIX_GAIN = {"A": (0.7, 1.0), "B": (0.35, 1.0)}


def domain_timbres(domain):
    if domain == "A":
        return DOMAIN_A
    if domain == "B":
        return DOMAIN_B
    raise ConfigError(f"unknown domain {domain!r}")


# --------------------------------------------------------------------------- schedules


@dataclass(frozen=True)
class LeadSegment:
    onset_sec: float
    offset_sec: float
    track_id: int
    instrument: str


@dataclass
class LeadSchedule:
    segments: list

    def validate(self, duration=None, min_duration=MIN_SEGMENT_SEC):
        segs = self.segments
        if not segs:
            raise AnnotationError("empty lead schedule")
        for s in segs:
            if not s.offset_sec > s.onset_sec:
                raise AnnotationError(f"segment with non-positive duration at {s.onset_sec}")
            if s.offset_sec - s.onset_sec < min_duration - 1e-9:
                raise AnnotationError(f"segment at {s.onset_sec} shorter than {min_duration} s")
        for a, b in zip(segs, segs[1:]):
            if b.onset_sec < a.offset_sec - 1e-9:
                raise AnnotationError(f"overlapping segments at {b.onset_sec}")
            if b.onset_sec > a.offset_sec + 1e-9:
                raise ScheduleGapError(f"gap between {a.offset_sec} and {b.onset_sec}")
        if duration is not None and (abs(segs[0].onset_sec) > 1e-9 or abs(segs[-1].offset_sec - duration) > 1e-9):
            raise ScheduleGapError("schedule does not cover the whole duration")
        return self

    def lead_at(self, t):
        for s in self.segments:
            if s.onset_sec <= t < s.offset_sec:
                return s
        return None


def labels_from_schedule(sched, start_sec, mel_cfg=MelConfig(), scheme=TRACK, vocab=None):
    """Frame labels for the clip starting at ``start_sec``.

    A frame takes the segment that contains its center time; centers of the
    zero-padded tail frames are clamped to the last sample of the clip. TRACK scheme
    yields track IDs; INSTRUMENT scheme yields ``vocab`` indices (names
    missing from ``vocab`` map to UNKNOWN).
    """
    last = start_sec + (mel_cfg.clip_samples - 1) / mel_cfg.sample_rate
    centers = np.minimum(start_sec + mel_cfg.frame_centers(), last)
    onsets = np.array([s.onset_sec for s in sched.segments])
    offsets = np.array([s.offset_sec for s in sched.segments])
    idx = np.searchsorted(onsets, centers, side="right") - 1
    ok = (idx >= 0) & (centers < offsets[np.clip(idx, 0, None)])
    if not ok.all():
        bad = centers[~ok][0]
        raise ScheduleGapError(f"no lead annotated at {bad:.3f} s")
    if scheme == TRACK:
        return np.array([sched.segments[i].track_id for i in idx], dtype=np.int64)
    lookup = {n: i for i, n in enumerate(vocab)}
    return np.array([lookup.get(sched.segments[i].instrument, UNKNOWN_INSTRUMENT) for i in idx], dtype=np.int64)


def write_annotation(sched, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_sec", "offset_sec", "track_id", "instrument"])
        for s in sched.segments:
            w.writerow([repr(float(s.onset_sec)), repr(float(s.offset_sec)), s.track_id, s.instrument])


def read_annotation(path, duration=None):
    """Read a lead annotation CSV; rows are sorted by onset, then validated."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"onset_sec", "offset_sec", "track_id", "instrument"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise AnnotationError(f"{path}: expected columns {sorted(need)}")
        try:
            segs = [
                LeadSegment(float(r["onset_sec"]), float(r["offset_sec"]), int(r["track_id"]), r["instrument"])
                for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: {exc}") from exc
    segs.sort(key=lambda s: (s.onset_sec, s.offset_sec))
    return LeadSchedule(segs).validate(duration)


# --------------------------------------------------------------------------- synthesis


def midi_to_hz(m):
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=np.float64) - 69.0) / 12.0)


def render_note(timbre, midi, n, sr, rng, vibrato=True):
    """One note of ``n`` samples at unit RMS-ish level (before part scaling)."""
    t = np.arange(n) / sr
    f0 = float(midi_to_hz(midi))
    if vibrato and timbre.vibrato_cents:
        cents = timbre.vibrato_cents * np.sin(2 * np.pi * timbre.vibrato_hz * t + rng.uniform(0, 2 * np.pi))
        inst_f = f0 * 2.0 ** (cents / 1200.0)
    else:
        inst_f = np.full(n, f0)
    phase = 2 * np.pi * np.cumsum(inst_f) / sr
    out = np.zeros(n)
    nyq = 0.45 * sr
    for k, a in enumerate(timbre.harmonics, start=1):
        if a == 0:
            continue
        stretch = np.sqrt(1.0 + timbre.inharmonic * k * k)
        if k * f0 * stretch >= nyq:
            break
        out += a * np.sin(k * stretch * phase)
    if timbre.noise:
        out += timbre.noise * np.sqrt(np.sum(np.square(timbre.harmonics))) * rng.standard_normal(n)
    env = np.minimum(1.0, t / max(timbre.attack, 1.0 / sr))
    if timbre.decay:
        env *= np.exp(-timbre.decay * t)
    release = min(n, int(0.01 * sr))
    env[n - release:] *= np.linspace(1.0, 0.0, release)
    return out * env


def render_line(timbre, n, sr, rng, lead):
    """A monophonic line filling ``n`` samples.

    Accompaniment: long notes in the lower half of the register without
    vibrato. Lead: short notes from a melodic random walk over the whole
    register, with vibrato.
    """
    lo, hi = timbre.register
    out = np.zeros(n)
    pos = 0
    if lead:
        pitch = rng.integers(lo + (hi - lo) // 3, hi + 1)
    while pos < n:
        if lead:
            dur = int(rng.uniform(0.12, 0.45) * sr)
            pitch = int(np.clip(pitch + rng.integers(-4, 5), lo, hi))
        else:
            dur = int(rng.uniform(0.6, 1.6) * sr)
            pitch = int(rng.integers(lo, lo + max(1, (hi - lo) // 2) + 1))
        dur = min(dur, n - pos)
        if dur > 0:
            out[pos:pos + dur] = render_note(timbre, pitch, dur, sr, rng, vibrato=lead)
        pos += max(dur, 1)
    return out


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


def make_schedule(duration, n_tracks, rng, weights=None, min_seg=5.0, max_seg=15.0, forced=None):
    """Lead schedule on the 2.5 s grid; consecutive segments change track.

    Segment lengths are drawn uniformly from the grid values in
    ``[min_seg, max_seg]``; the final segment is truncated to the song end.
    ``forced`` (a track index) is guaranteed at least one segment.
    """
    steps = np.arange(min_seg, max_seg + 1e-9, GRID_SEC)
    w = np.ones(n_tracks) if weights is None else np.asarray(weights, dtype=np.float64)
    segs, t, prev = [], 0.0, -1
    while t < duration - 1e-9:
        length = float(min(rng.choice(steps), duration - t))
        p = w.copy()
        if prev >= 0 and n_tracks > 1:
            p[prev] = 0.0
        p /= p.sum()
        idx = int(rng.choice(n_tracks, p=p))
        segs.append([t, t + length, idx])
        prev, t = idx, t + length
    if forced is not None and all(s[2] != forced for s in segs):
        # hand the longest segment that does not break the alternation to the forced track
        for j in sorted(range(len(segs)), key=lambda j: -(segs[j][1] - segs[j][0])):
            left = segs[j - 1][2] if j > 0 else -1
            right = segs[j + 1][2] if j + 1 < len(segs) else -1
            if forced not in (left, right):
                segs[j][2] = forced
                break
    return segs


@dataclass
class SynthSong:
    parts: np.ndarray  # (N, n) clean per-track performance
    tracks: np.ndarray  # (N, n) with bleed
    gains: np.ndarray  # (N,) mixture gains
    mixture: np.ndarray  # (n,) = gains @ tracks
    schedule: LeadSchedule
    instruments: list
    track_ids: list
    sample_rate: int = TARGET_SR
    domain: str = "A"


def synth_song(seed, n_tracks=4, duration_sec=30.0, bleed_db=-20.0, domain="A", *,
               instruments=None, track_ids=None, lead_weights=None, single_lead=None,
               forced_lead=None, sr=TARGET_SR, acc_level=0.1):
    """Render one multitrack song.

    ``bleed_db=None`` (or 0) disables bleed. ``instruments``/``track_ids`` override the
    seeded band selection; ``single_lead`` pins the lead to one track index
    for the whole song.
    """
    if duration_sec <= 0 or abs(duration_sec / GRID_SEC - round(duration_sec / GRID_SEC)) > 1e-9:
        raise ConfigError(f"duration must be a positive multiple of {GRID_SEC} s, got {duration_sec}")
    if not 1 <= n_tracks:
        raise ConfigError("need at least one track")
    rng = np.random.default_rng(seed)
    pool = domain_timbres(domain)
    if instruments is None:
        instruments = [pool[i].name for i in rng.choice(len(pool), n_tracks, replace=False)]
    if len(instruments) != n_tracks:
        raise ConfigError("instrument list length differs from n_tracks")
    if track_ids is None:
        track_ids = [int(i) + 1 for i in rng.permutation(n_tracks)]
    n = int(round(duration_sec * sr))
    if single_lead is not None:
        segs = [[0.0, float(duration_sec), int(single_lead)]]
    else:
        segs = make_schedule(duration_sec, n_tracks, rng, lead_weights, forced=forced_lead)
    lead_gain = 10.0 ** (LEAD_BOOST_DB / 20.0)
    parts = np.zeros((n_tracks, n))
    for i, name in enumerate(instruments):
        timbre = TIMBRES[name]
        for on, off, lead_idx in segs:
            a, b = int(round(on * sr)), int(round(off * sr))
            is_lead = lead_idx == i
            line = render_line(timbre, b - a, sr, rng, lead=is_lead)
            # level each grid block so the lead sits exactly LEAD_BOOST_DB above accompaniment
            block = int(round(GRID_SEC * sr))
            for s in range(0, b - a, block):
                seg = line[s:s + block]
                r = _rms(seg)
                if r > 0:
                    seg *= acc_level * (lead_gain if is_lead else 1.0) / r
            parts[i, a:b] = line
    if bleed_db is None or bleed_db == 0:
        tracks = parts.copy()
    else:
        leak = 10.0 ** (bleed_db / 20.0)
        tracks = parts + leak * (parts.sum(axis=0, keepdims=True) - parts)
    gains = rng.uniform(*MIX_GAIN[domain], size=n_tracks)
    mixture = gains @ tracks
    schedule = LeadSchedule([
        LeadSegment(float(on), float(off), int(track_ids[idx]), instruments[idx]) for on, off, idx in segs
    ]).validate(duration_sec)
    return SynthSong(parts, tracks, gains, mixture, schedule, list(instruments), list(track_ids), sr, domain)


@lru_cache(maxsize=64)
def timbre_spectrum(timbre, mel_cfg=MelConfig(), seed=0):
    """Long-term log-mel spectrum of a fixed accompaniment+lead excerpt."""
    rng = np.random.default_rng(seed)
    sr = mel_cfg.sample_rate
    n = mel_cfg.clip_samples
    x = render_line(timbre, n, sr, rng, lead=False) + render_line(timbre, n, sr, rng, lead=True)
    x /= np.max(np.abs(x))
    spec = log_mel(x, mel_cfg).mean(axis=0)
    spec.flags.writeable = False
    return spec


def check_timbres_distinct(timbres, threshold=TIMBRE_MIN_DISTANCE):
    """Assert every pair of timbres differs by more than ``threshold`` (RMS log-mel)."""
    names = [t.name for t in timbres]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate timbre names in {names}")
    specs = [timbre_spectrum(t) for t in timbres]
    dmin = np.inf
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            b = names[j]
            d = float(np.sqrt(np.mean((specs[i] - specs[j]) ** 2)))
            if d <= threshold:
                raise ConfigError(f"timbres {a} and {b} too similar (distance {d:.3f})")
            dmin = min(dmin, d)
    return dmin


# --------------------------------------------------------------------------- datasets


@dataclass
class DatasetConfig:
    songs: int = 20
    seed: int = 0
    duration_sec: float = 30.0
    min_tracks: int = 3
    max_tracks: int = 6
    bleed_db: float | None = -20.0
    skew: float = 1.0
    split: tuple = (0.70, 0.15, 0.15)
    unseen_instrument: bool = True
    domain_b_fraction: float = 0.0
    leaky_layout: bool = False

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def split_counts(n, fractions):
    n_valid = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    return n - n_valid - n_test, n_valid, n_test


def _popularity_weights(instruments, pool, skew):
    rank = {t.name: i for i, t in enumerate(pool)}
    return np.array([skew ** rank.get(name, len(pool)) for name in instruments])


def make_dataset(cfg: DatasetConfig, out_dir):
    """Generate songs, write WAVs, annotations and ``manifest.json``.

    Splits are assigned at the song level by a seeded shuffle. When
    ``unseen_instrument`` is set, the held-out timbre is added to every
    domain-A test song (and leads at least one segment there) and never
    appears in train/valid songs. With ``leaky_layout`` every train song has
    a single lead for its whole duration, always on track ID 1; valid and
    test songs keep shuffled IDs so model selection cannot reward the shortcut.
    """
    if cfg.songs < 1:
        raise ConfigError("need at least one song")
    if not 1 <= cfg.min_tracks <= cfg.max_tracks:
        raise ConfigError("invalid track count range")
    if abs(sum(cfg.split) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    pools = [domain_timbres("A")] if cfg.domain_b_fraction <= 0 else [domain_timbres("A"), domain_timbres("B")]
    check_timbres_distinct(sum(pools, ()) + ((HELDOUT,) if cfg.unseen_instrument else ()))
    rng = np.random.default_rng(cfg.seed)
    n_train, n_valid, n_test = split_counts(cfg.songs, cfg.split)
    splits = np.array(["train"] * n_train + ["valid"] * n_valid + ["test"] * n_test)
    splits = splits[rng.permutation(cfg.songs)]
    domains = np.where(rng.random(cfg.songs) < cfg.domain_b_fraction, "B", "A")
    song_seeds = rng.integers(0, 2**31 - 1, size=cfg.songs)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(cfg.songs):
        split, domain = str(splits[i]), str(domains[i])
        srng = np.random.default_rng(int(song_seeds[i]))
        pool = domain_timbres(domain)
        n_tracks = int(srng.integers(cfg.min_tracks, cfg.max_tracks + 1))
        heldout = cfg.unseen_instrument and split == "test" and domain == "A"
        n_pool = n_tracks - 1 if heldout else n_tracks
        names = [pool[j].name for j in srng.choice(len(pool), min(n_pool, len(pool)), replace=False)]
        forced = None
        if heldout:
            forced = int(srng.integers(0, len(names) + 1))
            names.insert(forced, HELDOUT.name)
        n_tracks = len(names)
        ids = [int(j) + 1 for j in srng.permutation(n_tracks)]
        single = None
        if cfg.leaky_layout and split == "train":
            single = int(srng.integers(n_tracks))
            others = iter(int(j) + 2 for j in srng.permutation(n_tracks - 1))
            ids = [1 if j == single else next(others) for j in range(n_tracks)]
        song = synth_song(
            int(srng.integers(0, 2**31 - 1)), n_tracks, cfg.duration_sec, cfg.bleed_db, domain,
            instruments=names, track_ids=ids,
            lead_weights=_popularity_weights(names, pool, cfg.skew),
            single_lead=single, forced_lead=forced,
        )
        entries.append(write_song(song, out_dir, f"song{i:03d}", split))
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate": TARGET_SR,
        "config": cfg.to_dict(),
        "heldout_instrument": HELDOUT.name if cfg.unseen_instrument else None,
        "songs": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def write_song(song, out_dir, song_id, split):
    """Peak-normalize and write one song; returns its manifest entry."""
    rel = os.path.join("songs", song_id)
    os.makedirs(os.path.join(out_dir, rel), exist_ok=True)
    tracks = []
    for i, (tid, name) in enumerate(zip(song.track_ids, song.instruments)):
        path = os.path.join(rel, f"track{tid}_{name}.wav")
        write_wav(os.path.join(out_dir, path), normalize_peak(Waveform(song.tracks[i], song.sample_rate)))
        tracks.append({"path": path, "track_id": int(tid), "instrument": name})
    mix_path = os.path.join(rel, "mix.wav")
    write_wav(os.path.join(out_dir, mix_path), normalize_peak(Waveform(song.mixture, song.sample_rate)))
    ann_path = os.path.join(rel, "lead.csv")
    write_annotation(song.schedule, os.path.join(out_dir, ann_path))
    return {
        "song_id": song_id,
        "duration": song.tracks.shape[1] / song.sample_rate,
        "split": split,
        "domain": song.domain,
        "mix": mix_path,
        "annotation": ann_path,
        "tracks": tracks,
    }
