"""Manifest loading and conversion of songs into feature clips."""

from __future__ import annotations

import json
import os

import numpy as np

from .audio import ClipWindow, clip_starts, preprocess, read_wav
from .datagen import MANIFEST_VERSION, labels_from_schedule, read_annotation
from .errors import ConfigError, CorruptSampleError
from .frontend import MelConfig, log_mel
from .model import pseudo_mix
from .sample import MIX_INSTRUMENT, UNKNOWN_INSTRUMENT, MultitrackSample, TrackMeta

SPECIAL_INSTRUMENTS = ("MIX", "UNKNOWN")


def load_manifest(path):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    manifest["_root"] = os.path.dirname(os.path.abspath(path))
    return manifest


def songs_in(manifest, split=None, domain=None):
    return [
        s for s in manifest["songs"]
        if (split is None or s["split"] == split) and (domain is None or s["domain"] == domain)
    ]


def build_vocab(manifest, split="train"):
    """MIX, UNKNOWN, then every instrument name seen in ``split`` (sorted)."""
    names = sorted({t["instrument"] for s in songs_in(manifest, split) for t in s["tracks"]})
    return SPECIAL_INSTRUMENTS + tuple(names)


def instrument_index(vocab, name):
    try:
        idx = vocab.index(name)
    except ValueError:
        return UNKNOWN_INSTRUMENT
    return UNKNOWN_INSTRUMENT if idx == MIX_INSTRUMENT else idx


def song_clips(tracks, mix, metas, schedule, mel_cfg=MelConfig(), win=ClipWindow(), names=None,
               song_id="", domain="A"):
    """Cut preprocessed waveforms into clips and compute their features.

    ``tracks`` is a list of mono Waveforms at ``mel_cfg.sample_rate``; ``mix``
    may be None (only the pseudo-mix is then available). ``schedule`` may be
    None for unlabeled inference.
    """
    if not tracks:
        raise CorruptSampleError(f"{song_id}: no tracks")
    n = tracks[0].n_frames
    if any(w.n_frames != n for w in tracks) or (mix is not None and mix.n_frames != n):
        raise CorruptSampleError(f"{song_id}: tracks differ in length")
    pmix = pseudo_mix(tracks)
    cs = mel_cfg.clip_samples
    clips = []
    for start in clip_starts(n, mel_cfg.sample_rate, win):
        a = int(round(start * mel_cfg.sample_rate))
        feats = np.stack([log_mel(w.samples[a:a + cs], mel_cfg) for w in tracks])
        pm = log_mel(pmix.samples[a:a + cs], mel_cfg)
        mx = log_mel(mix.samples[a:a + cs], mel_cfg) if mix is not None else pm
        if schedule is not None:
            labels = labels_from_schedule(schedule, start, mel_cfg)
        else:
            labels = np.zeros(mel_cfg.n_frames, dtype=np.int64)
        clips.append(MultitrackSample(
            tracks=feats, mix=mx, pseudo_mix=pm, metas=tuple(metas), labels=labels,
            song_id=song_id, start_sec=start, domain=domain,
            extra={"names": tuple(names) if names else ()},
        ))
    return clips


def load_song(manifest, entry, vocab, mel_cfg=MelConfig(), win=ClipWindow()):
    root = manifest["_root"]
    waves = [preprocess(read_wav(os.path.join(root, t["path"])), mel_cfg.sample_rate) for t in entry["tracks"]]
    mix = preprocess(read_wav(os.path.join(root, entry["mix"])), mel_cfg.sample_rate)
    schedule = read_annotation(os.path.join(root, entry["annotation"]))
    metas = [TrackMeta(int(t["track_id"]), instrument_index(vocab, t["instrument"])) for t in entry["tracks"]]
    ids = {m.track_id for m in metas}
    if len(ids) != len(metas) or 0 in ids:
        raise CorruptSampleError(f"{entry['song_id']}: track ids must be distinct and non-zero")
    if any(s.track_id not in ids for s in schedule.segments):
        raise CorruptSampleError(f"{entry['song_id']}: annotation names a track id with no audio")
    names = [t["instrument"] for t in entry["tracks"]]
    return song_clips(waves, mix, metas, schedule, mel_cfg, win, names, entry["song_id"], entry["domain"])


def load_split(manifest, split, vocab, mel_cfg=MelConfig(), domain=None):
    clips = []
    for entry in songs_in(manifest, split, domain):
        clips.extend(load_song(manifest, entry, vocab, mel_cfg))
    return clips


def feature_stats(clips):
    """Per-mel mean and std over every track frame in ``clips``."""
    stack = np.concatenate([c.tracks.reshape(-1, c.tracks.shape[-1]) for c in clips]
                           + [c.mix for c in clips], axis=0)
    return stack.mean(axis=0), stack.std(axis=0) + 1e-6


def load_waveforms(paths, sample_rate=MelConfig().sample_rate):
    return [preprocess(read_wav(p), sample_rate) for p in paths]

