import csv
import json
import os

import numpy as np
import pytest

from leadinst import cli
from leadinst.audio import read_wav
from leadinst.datagen import labels_from_schedule, read_annotation
from leadinst.dataset import build_vocab, load_manifest, load_song, songs_in
from leadinst.errors import NumericError
from leadinst.frontend import MelConfig
from leadinst.training import Trainer, TrainConfig, load_checkpoint, model_config_for, save_checkpoint

TINY = {"model": {"d_model": 8, "heads": 2, "enc_blocks": 1, "dropout": 0.0, "max_tracks": 4},
        "train": {"epochs": 1, "batch_size": 2, "grad_accum": 1, "lr_classifier": 1e-2}}


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "data"
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(dict(TINY, data={"max_tracks": 4})))
    assert run("synth-data", "--out", out, "--config", cfg, "--songs", 8, "--seed", 2, "--duration", 10,
               "--no-unseen-instrument") == 0
    return out / "manifest.json", cfg


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    manifest, cfg = data
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", manifest, "--config", cfg, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def overfit(data, tmp_path_factory):
    """Checkpoint fitted to one song with a lead change, plus that song's manifest entry."""
    manifest_path, _ = data
    m = load_manifest(manifest_path)
    vocab = build_vocab(m)
    entry = next(e for e in songs_in(m, "train")
                 if len(read_annotation(os.path.join(m["_root"], e["annotation"])).segments) > 1)
    clips = load_song(m, entry, vocab)
    tcfg = TrainConfig(epochs=200, batch_size=len(clips), grad_accum=1, lr_encoder=2e-3, lr_attention=2e-3,
                       lr_classifier=2e-3)
    mcfg = model_config_for(tcfg, vocab, d_model=16, heads=2, enc_blocks=1, dropout=0.0, max_tracks=4)
    tr = Trainer(mcfg, tcfg, clips)
    tr.run(max_steps=300)
    path = tmp_path_factory.mktemp("of") / "of.npz"
    save_checkpoint(path, tr.checkpoint())
    return path, m, entry


# --------------------------------------------------------------------------- usage and exit codes


def test_usage_errors_exit_1(capsys):
    assert run() == 1
    assert run("train") == 1
    assert run("synth-data", "--out", "x", "--bleed", "loud") == 1
    assert run("train", "--data", "m", "--out", "o", "--scheme", "bogus") == 1
    assert run("attn-dump", "--ckpt", "c", "--data", "d", "--clip", "nocolon", "--out", "o") == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, data):
    manifest, _ = data
    assert run("eval", "--ckpt", tmp_path / "missing.npz", "--data", manifest) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert run("train", "--data", manifest, "--config", bad, "--out", tmp_path / "o") == 2
    bad.write_text(json.dumps({"optimizer": {}}))
    assert run("train", "--data", manifest, "--config", bad, "--out", tmp_path / "o") == 2
    bad.write_text("{")
    assert run("train", "--data", manifest, "--config", bad, "--out", tmp_path / "o") == 2
    assert run("synth-data", "--out", tmp_path / "d", "--duration", 7) == 2


def test_numeric_abort_exit_3(monkeypatch, data, tmp_path):
    manifest, cfg = data

    def boom(self, max_steps=None):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(Trainer, "run", boom)
    assert run("train", "--data", manifest, "--config", cfg, "--out", tmp_path) == 3


# --------------------------------------------------------------------------- synth-data


def test_synth_data_split_and_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth-data", "--out", a, "--songs", 20, "--seed", 1, "--duration", 5) == 0
    assert "train 14 / valid 3 / test 3" in capsys.readouterr().out
    assert run("synth-data", "--out", b, "--songs", 20, "--seed", 1, "--duration", 5) == 0
    files = sorted(os.path.relpath(os.path.join(d, f), a) for d, _, fs in os.walk(a) for f in fs)
    assert files == sorted(os.path.relpath(os.path.join(d, f), b) for d, _, fs in os.walk(b) for f in fs)
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def _explained_by_others(song_dir):
    tracks = np.stack([read_wav(os.path.join(song_dir, f)).samples
                       for f in sorted(os.listdir(song_dir)) if f.startswith("track")])
    out = []
    for i in range(len(tracks)):
        others = np.delete(tracks, i, 0).T
        coef, *_ = np.linalg.lstsq(others, tracks[i], rcond=None)
        out.append(np.sum((others @ coef) ** 2) / np.sum(tracks[i] ** 2))
    return max(out)


def test_bleed_off_gives_clean_tracks(tmp_path):
    for bleed, check in (("off", lambda r: r < 0.02), ("-20", lambda r: r > 0.05)):
        out = tmp_path / bleed
        assert run("synth-data", "--out", out, "--songs", 1, "--seed", 4, "--duration", 10,
                   "--bleed", bleed, "--no-unseen-instrument") == 0
        assert check(_explained_by_others(out / "songs" / "song000"))
    assert json.loads((tmp_path / "off" / "config.json").read_text())["data"]["bleed_db"] is None


# --------------------------------------------------------------------------- train and eval


def test_train_defaults_and_outputs(trained, data):
    ckpt = load_checkpoint(trained / "best.npz")
    assert (ckpt.model_config.variant, ckpt.model_config.scheme) == ("track_attn", "track")
    assert (trained / "last.npz").exists()
    log = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert log and all(np.isfinite(r["loss"]) for r in log)
    assert any("val_inst_macro_f1" in r for r in log)


def test_config_echo_round_trip(trained, data, tmp_path):
    manifest, _ = data
    echoed = trained / "config.json"
    assert run("train", "--data", manifest, "--config", echoed, "--out", tmp_path, "--max-steps", 1) == 0
    assert (tmp_path / "config.json").read_text() == echoed.read_text()
    cfg = cli.read_config(echoed)
    assert cli.RunConfig.from_dict(cfg.to_dict()) == cfg


def test_flags_override_config(data, tmp_path):
    manifest, cfg = data
    assert run("train", "--data", manifest, "--config", cfg, "--out", tmp_path, "--max-steps", 1,
               "--variant", "from_mix", "--scheme", "inst", "--seed", 9, "--no-track-emb") == 0
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert echoed["train"]["variant"] == "from_mix" and echoed["train"]["scheme"] == "instrument"
    assert echoed["train"]["seed"] == 9 and echoed["train"]["no_track_emb"]
    assert echoed["model"]["d_model"] == 8


@pytest.mark.parametrize("flag", ["--no-track-emb", "--no-inst-emb", "--no-track-perm", "--no-oracle-mix",
                                  "--freeze-encoder"])
def test_ablation_flags_run(flag, data, tmp_path):
    manifest, cfg = data
    assert run("train", "--data", manifest, "--config", cfg, "--out", tmp_path, "--max-steps", 2, flag) == 0


def test_resume_appends_log(data, tmp_path):
    manifest, cfg = data
    assert run("train", "--data", manifest, "--config", cfg, "--out", tmp_path, "--max-steps", 2) == 0
    assert run("train", "--data", manifest, "--config", cfg, "--out", tmp_path,
               "--resume", tmp_path / "last.npz", "--max-steps", 4) == 0
    steps = [json.loads(line)["step"] for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4]


def test_eval_report(trained, data, tmp_path, capsys):
    manifest, _ = data
    rep = tmp_path / "r" / "report.json"
    assert run("eval", "--ckpt", trained / "best.npz", "--data", manifest, "--split", "valid",
               "--report", rep) == 0
    assert "Inst F1" in capsys.readouterr().out
    d = json.loads(rep.read_text())
    for key in ("scheme", "n_clips", "accuracy", "macro_f1", "inst_accuracy", "inst_macro_f1",
                "track_macro_f1", "per_sample", "per_class", "confusion", "confusion_labels"):
        assert key in d
    assert 0.0 <= d["inst_macro_f1"] <= 1.0
    rows = list(csv.reader(open(tmp_path / "r" / "report_confusion.csv")))
    assert len(rows) == len(d["confusion_labels"]) + 1


# --------------------------------------------------------------------------- infer


def _infer_inputs(manifest, entry, tmp_path):
    root = manifest["_root"]
    tracks = [os.path.join(root, t["path"]) for t in entry["tracks"]]
    meta = tmp_path / "meta.csv"
    with open(meta, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "instrument"])
        for t in entry["tracks"]:
            w.writerow([t["track_id"], t["instrument"]])
    return tracks, meta


@pytest.mark.parametrize("with_mix", [True, False])
def test_infer_recovers_schedule_boundaries(overfit, tmp_path, with_mix):
    ckpt, m, entry = overfit
    tracks, meta = _infer_inputs(m, entry, tmp_path)
    extra = ["--mix", os.path.join(m["_root"], entry["mix"])] if with_mix else []
    assert run("infer", "--ckpt", ckpt, "--tracks", *tracks, "--meta", meta, "--out", tmp_path, *extra) == 0
    frames = read_csv(tmp_path / "frames.csv")
    assert len(frames) == 500  # 10 s at 50 frames per second
    pred = np.array([int(r["track_id"]) for r in frames])
    cfg = MelConfig()
    sched = read_annotation(os.path.join(m["_root"], entry["annotation"]))
    ref = np.concatenate([labels_from_schedule(sched, 0.0, cfg)[:125],
                          labels_from_schedule(sched, 2.5, cfg)[:125],
                          labels_from_schedule(sched, 5.0, cfg)])
    ref_edges = np.flatnonzero(np.diff(ref)) + 1
    pred_edges = np.flatnonzero(np.diff(pred)) + 1
    assert len(ref_edges) >= 1 and len(pred_edges) == len(ref_edges)
    assert np.all(np.abs(pred_edges - ref_edges) <= 1)
    segs = read_csv(tmp_path / "segments.csv")
    assert len(segs) == len(ref_edges) + 1
    assert float(segs[0]["onset_sec"]) == 0.0 and float(segs[-1]["offset_sec"]) == 10.0
    for a, b in zip(segs, segs[1:]):
        assert a["offset_sec"] == b["onset_sec"] and a["track_id"] != b["track_id"]
    names = {t["track_id"]: t["instrument"] for t in entry["tracks"]}
    assert all(names[int(s["track_id"])] == s["instrument"] for s in segs)


def test_infer_input_errors(overfit, tmp_path):
    ckpt, m, entry = overfit
    tracks, meta = _infer_inputs(m, entry, tmp_path)
    assert run("infer", "--ckpt", ckpt, "--tracks", *tracks[:-1], "--meta", meta, "--out", tmp_path) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("id,name\n1,piano\n")
    assert run("infer", "--ckpt", ckpt, "--tracks", tracks[0], "--meta", bad, "--out", tmp_path) == 2
    bad.write_text("track_id,instrument\n9,piano\n")
    assert run("infer", "--ckpt", ckpt, "--tracks", tracks[0], "--meta", bad, "--out", tmp_path) == 2


def test_merge_segments():
    assert cli.merge_segments([], 50) == []
    assert cli.merge_segments([1, 1, 2, 2, 2, 1], 50) == [(0.0, 0.04, 1), (0.04, 0.1, 2), (0.1, 0.12, 1)]


# --------------------------------------------------------------------------- attn-dump


def test_attn_dump_shape_and_normalization(overfit, tmp_path, capsys):
    ckpt, m, entry = overfit
    out, summ = tmp_path / "attn.csv", tmp_path / "dom.csv"
    assert run("attn-dump", "--ckpt", ckpt, "--data", os.path.join(m["_root"], "manifest.json"),
               "--clip", f"{entry['song_id']}:1", "--out", out, "--summary", summ) == 0
    rows = read_csv(out)
    H, T, N = load_checkpoint(ckpt).model_config.heads, 250, len(entry["tracks"])
    assert len(rows) == H * T * N
    sums = {}
    for r in rows:
        key = (r["head"], r["frame"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
    assert all(abs(s - 1.0) <= 1e-9 for s in sums.values())
    dom = read_csv(summ)
    agree = np.mean([d["dominant_track_id"] == d["reference_track_id"] for d in dom])
    assert agree >= 0.6
    assert "agrees with the reference lead" in capsys.readouterr().out


def test_attn_dump_errors(trained, data, tmp_path):
    manifest, cfg = data
    assert run("attn-dump", "--ckpt", trained / "best.npz", "--data", manifest,
               "--clip", "nosuchsong:0", "--out", tmp_path / "a.csv") == 2
    assert run("attn-dump", "--ckpt", trained / "best.npz", "--data", manifest,
               "--clip", "song000:99", "--out", tmp_path / "a.csv") == 2
    assert run("train", "--data", manifest, "--config", cfg, "--out", tmp_path, "--max-steps", 1,
               "--variant", "track_avg") == 0
    assert run("attn-dump", "--ckpt", tmp_path / "last.npz", "--data", manifest,
               "--clip", "song000:0", "--out", tmp_path / "a.csv") == 2
