"""``leadinst`` command line: synth-data, train, eval, infer, attn-dump.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
abort (non-finite loss or gradient).

Run configuration is a JSON document with up to three sections::

    {"data": {...DatasetConfig...},
     "train": {...TrainConfig...},
     "model": {"d_model": 64, "heads": 4, "dropout": 0.8, ...}}

Flags override file values. Unknown sections or keys are rejected. The
effective configuration is written to ``config.json`` in the output directory
and can be fed back through ``--config`` unchanged.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as tc
from .audio import ClipWindow, read_wav, preprocess
from .datagen import DatasetConfig, make_dataset
from .dataset import build_vocab, instrument_index, load_manifest, load_song, load_split, song_clips, songs_in
from .errors import ConfigError, LeadInstError, NumericError
from .frontend import MelConfig
from .metrics import evaluate
from .model import VARIANTS, forward
from .sample import INSTRUMENT, TRACK, TrackMeta
from .training import Trainer, TrainConfig, load_checkpoint, model_config_for, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# ModelConfig fields a run config may set; the rest follow from TrainConfig and the data
MODEL_KEYS = ("d_model", "heads", "dropout", "max_tracks", "segment_level", "mask_absent", "n_mels", "enc_blocks")
SCHEME_ALIASES = {"inst": INSTRUMENT, "instrument": INSTRUMENT, "track": TRACK}


class UsageError(Exception):
    pass


def _from_dict(cls, d, section):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


def _dataset_config(d):
    d = dict(d)
    if "split" in d:
        d["split"] = tuple(d["split"])
    return _from_dict(DatasetConfig, d, "data")


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")

    def to_dict(self):
        return {"data": self.data.to_dict(), "train": self.train.to_dict(), "model": dict(self.model)}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"data", "train", "model"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            data=_dataset_config(d.get("data", {})),
            train=_from_dict(TrainConfig, d.get("train", {}), "train"),
            model=dict(d.get("model", {})),
        )

    def merged(self, data=None, train=None, model=None):
        """Copy with flag overrides applied (``None`` values are ignored)."""
        d = self.to_dict()
        for name, over in (("data", data), ("train", train), ("model", model)):
            d[name].update({k: v for k, v in (over or {}).items() if v is not None})
        return RunConfig.from_dict(d)


def read_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(d)


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    return path


# --------------------------------------------------------------------------- commands


def _bleed(text):
    if text.lower() in ("off", "none"):
        return "off"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--bleed expects dB or 'off', got {text!r}")


def cmd_synth_data(args):
    over = {
        "songs": args.songs, "seed": args.seed, "skew": args.skew, "duration_sec": args.duration,
        "unseen_instrument": args.unseen_instrument, "leaky_layout": args.leaky_layout,
        "domain_b_fraction": args.domain_b_fraction,
    }
    cfg = read_config(args.config).merged(data=over)
    if args.bleed is not None:
        d = cfg.to_dict()
        d["data"]["bleed_db"] = None if args.bleed == "off" else args.bleed
        cfg = RunConfig.from_dict(d)
    manifest = make_dataset(cfg.data, args.out)
    echo_config(cfg, args.out)
    counts = {s: len(songs_in(manifest, s)) for s in ("train", "valid", "test")}
    print(f"wrote {len(manifest['songs'])} songs to {args.out} "
          f"(train {counts['train']} / valid {counts['valid']} / test {counts['test']})")
    return EXIT_OK


def _train_overrides(args):
    scheme = SCHEME_ALIASES[args.scheme] if args.scheme else None
    return {
        "variant": args.variant, "scheme": scheme, "seed": args.seed, "epochs": args.epochs,
        "no_track_perm": args.no_track_perm, "no_inst_emb": args.no_inst_emb,
        "no_track_emb": args.no_track_emb, "no_oracle_mix": args.no_oracle_mix,
        "freeze_encoder": args.freeze_encoder,
    }


def cmd_train(args):
    model_over = {"d_model": args.d_model, "dropout": args.dropout, "max_tracks": args.max_tracks}
    cfg = read_config(args.config).merged(train=_train_overrides(args), model=model_over)
    manifest = load_manifest(args.data)
    vocab = build_vocab(manifest)
    train_clips = load_split(manifest, "train", vocab)
    valid_clips = load_split(manifest, "valid", vocab)
    if not train_clips:
        raise ConfigError("training split is empty")
    os.makedirs(args.out, exist_ok=True)
    echo_config(cfg, args.out)
    log_path = os.path.join(args.out, "train_log.jsonl")
    heldout = manifest.get("heldout_instrument")

    with open(log_path, "a" if args.resume else "w") as log_fh:
        def log(rec):
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
            if "val_inst_macro_f1" in rec:
                print(f"step {rec['step']:5d}  loss {rec['loss']:.4f}  val inst F1 {100 * rec['val_inst_macro_f1']:.2f}")

        if args.resume:
            trainer = Trainer.resume(load_checkpoint(args.resume), train_clips, valid_clips, log, heldout)
        else:
            mcfg = model_config_for(cfg.train, vocab, **cfg.model)
            trainer = Trainer(mcfg, cfg.train, train_clips, valid_clips, log, heldout)
        n_before = len(trainer.history)
        best = trainer.run(args.max_steps)
    save_checkpoint(os.path.join(args.out, "last.npz"), trainer.checkpoint())
    improved = any(h.get("best") for h in trainer.history[n_before:])
    best_path = os.path.join(args.out, "best.npz")
    if improved or not os.path.exists(best_path):
        save_checkpoint(best_path, best)
    print(f"best validation instrument macro-F1 {100 * trainer.best_f1:.2f}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    clips = load_split(manifest, args.split, ckpt.model_config.instruments)
    if not clips:
        raise ConfigError(f"split {args.split!r} is empty")
    report = evaluate(clips, ckpt.model_config, ckpt.params, manifest.get("heldout_instrument"))
    print(report.table())
    if args.report:
        os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
        report.write_json(args.report)
        stem = os.path.splitext(args.report)[0]
        report.write_confusion_csv(stem + "_confusion.csv")
    return EXIT_OK


def read_meta(path):
    """``track_id,instrument`` rows, in the order of the ``--tracks`` files."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"track_id", "instrument"}:
        raise ConfigError(f"{path}: expected columns track_id,instrument")
    try:
        return [(int(r["track_id"]), r["instrument"].strip()) for r in rows]
    except ValueError as exc:
        raise ConfigError(f"{path}: bad track_id ({exc})") from exc


def frame_logits(clips, cfg, params, mel_cfg=MelConfig(), win=ClipWindow()):
    """Clip logits placed on the song's frame grid and averaged where clips overlap."""
    T = mel_cfg.n_frames
    hop = int(round(win.hop_sec * mel_cfg.frame_rate))
    total = hop * (len(clips) - 1) + T
    acc = np.zeros((total, cfg.n_classes))
    count = np.zeros(total)
    for k, clip in enumerate(clips):
        with tc.no_grad():
            logits, _ = forward(clip, cfg, params, training=False)
        lg = np.broadcast_to(logits.data, (T, cfg.n_classes)) if cfg.segment_level else logits.data
        acc[k * hop:k * hop + T] += lg
        count[k * hop:k * hop + T] += 1
    return acc / count[:, None]


def merge_segments(labels, frame_rate):
    """Runs of equal labels as ``(onset_sec, offset_sec, label)``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [labels.size]])
    return [(a / frame_rate, b / frame_rate, int(labels[a])) for a, b in zip(starts, stops)]


def cmd_infer(args):
    ckpt = load_checkpoint(args.ckpt)
    cfg, mel_cfg = ckpt.model_config, MelConfig()
    meta = read_meta(args.meta)
    if len(meta) != len(args.tracks):
        raise ConfigError(f"{len(args.tracks)} track files but {len(meta)} metadata rows")
    ids = [m[0] for m in meta]
    if len(set(ids)) != len(ids) or min(ids) < 1 or max(ids) > cfg.max_tracks:
        raise ConfigError(f"track ids must be distinct and within 1..{cfg.max_tracks}")
    waves = [preprocess(read_wav(p), mel_cfg.sample_rate) for p in args.tracks]
    mix = preprocess(read_wav(args.mix), mel_cfg.sample_rate) if args.mix else None
    metas = [TrackMeta(tid, instrument_index(cfg.instruments, name)) for tid, name in meta]
    names = [name for _, name in meta]
    clips = song_clips(waves, mix, metas, None, mel_cfg, ClipWindow(), names, "infer")
    if not clips:
        raise ConfigError("input shorter than one clip")
    if mix is None:
        cfg = replace(cfg, use_oracle_mix=False)
    labels = np.argmax(frame_logits(clips, cfg, ckpt.params, mel_cfg), axis=1)

    id2name = dict(meta)

    def describe(label):
        if cfg.scheme == TRACK:
            return label, id2name.get(label, "")
        return -1, cfg.instruments[label]

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "frames.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "time_sec", "track_id", "instrument"])
        for t, lab in enumerate(labels):
            tid, name = describe(int(lab))
            w.writerow([t, f"{t / mel_cfg.frame_rate:.3f}", tid, name])
    segs = merge_segments(labels, mel_cfg.frame_rate)
    with open(os.path.join(args.out, "segments.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_sec", "offset_sec", "track_id", "instrument"])
        for a, b, lab in segs:
            tid, name = describe(lab)
            w.writerow([f"{a:.3f}", f"{b:.3f}", tid, name])
    print(f"{len(labels)} frames, {len(segs)} segments written to {args.out}")
    return EXIT_OK


def _parse_clip(text):
    song, sep, k = text.rpartition(":")
    if not sep or not song:
        raise argparse.ArgumentTypeError(f"--clip expects SONG:INDEX, got {text!r}")
    try:
        return song, int(k)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--clip expects SONG:INDEX, got {text!r}")


def cmd_attn_dump(args):
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.model_config
    if cfg.variant != "track_attn":
        raise ConfigError(f"checkpoint variant {cfg.variant!r} has no track attention")
    manifest = load_manifest(args.data)
    song, k = args.clip
    entry = next((s for s in manifest["songs"] if s["song_id"] == song), None)
    if entry is None:
        raise ConfigError(f"song {song!r} not in manifest")
    clips = load_song(manifest, entry, cfg.instruments)
    if not 0 <= k < len(clips):
        raise ConfigError(f"{song} has {len(clips)} clips; index {k} out of range")
    clip = clips[k]
    with tc.no_grad():
        _, trace = forward(clip, cfg, ckpt.params, training=False)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "frame", "track_id", "weight"])
        for h, t, tid, wt in trace.rows():
            w.writerow([h, t, tid, repr(wt)])
    if args.summary:
        dom = trace.dominant()
        with open(args.summary, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "dominant_track_id", "reference_track_id"])
            for t, (d, r) in enumerate(zip(dom, clip.labels)):
                w.writerow([t, int(d), int(r)])
        print(f"dominant track agrees with the reference lead on {100 * np.mean(dom == clip.labels):.1f}% of frames")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="leadinst", description="Lead instrument detection from multitrack audio.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-data", help="generate a synthetic multitrack dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--songs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--bleed", type=_bleed, help="bleed level in dB, or 'off'")
    s.add_argument("--skew", type=float)
    s.add_argument("--duration", type=float, help="song length in seconds (multiple of 2.5)")
    s.add_argument("--unseen-instrument", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--leaky-layout", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--domain-b-fraction", type=float)
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="manifest.json")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--scheme", choices=sorted(SCHEME_ALIASES))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=float)
    t.add_argument("--d-model", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--max-tracks", type=int)
    for flag in ("--no-track-perm", "--no-inst-emb", "--no-track-emb", "--no-oracle-mix", "--freeze-encoder"):
        t.add_argument(flag, action="store_true", default=None)
    t.add_argument("--resume", help="continue from a last.npz checkpoint")
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "valid", "train"), default="test")
    e.add_argument("--report", help="metrics JSON path; a confusion CSV is written next to it")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="label the lead track of a multitrack recording")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--tracks", nargs="+", required=True)
    i.add_argument("--meta", required=True, help="CSV with track_id,instrument per --tracks file")
    i.add_argument("--mix", help="mixture WAV; the track average is used when omitted")
    i.add_argument("--out", required=True, help="directory for frames.csv and segments.csv")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("attn-dump", help="write track attention weights of one clip")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--clip", required=True, type=_parse_clip, help="SONG_ID:CLIP_INDEX")
    a.add_argument("--out", required=True)
    a.add_argument("--summary", help="optional per-frame dominant-track CSV")
    a.set_defaults(func=cmd_attn_dump)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LeadInstError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
