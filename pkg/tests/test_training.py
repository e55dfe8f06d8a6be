import numpy as np
import pytest

from leadinst import tensor as tc
from leadinst.errors import CheckpointError, ConfigError, NumericError
from leadinst.metrics import evaluate
from leadinst.model import GROUPS, forward, param_group
from leadinst.training import (
    TrainConfig,
    Trainer,
    adamw_step,
    load_checkpoint,
    save_checkpoint,
    train,
    zero_moments,
)
from _util import VOCAB, fresh_params, random_sample, synth_clips, tiny_config


def _cfg(**kw):
    base = dict(batch_size=2, grad_accum=1, lr_encoder=1e-2, lr_attention=1e-2, lr_classifier=1e-2, epochs=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def rand_clips():
    rng = np.random.default_rng(0)
    return [random_sample(rng, n_tracks=int(rng.integers(1, 4)), T=6) for _ in range(16)]


@pytest.fixture(scope="module")
def song():
    return synth_clips(0, 3, 10.0)


# --------------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_encoder=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(grad_accum=0)
    with pytest.raises(ConfigError):
        TrainConfig(validate_every=1.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 1, "learning_rate": 3})
    c = TrainConfig(seed=7, no_track_perm=True)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_defaults():
    c = TrainConfig()
    assert (c.batch_size * c.grad_accum, c.weight_decay, c.lr_classifier, c.lr_encoder) == (16, 0.01, 1e-3, 1e-5)


# --------------------------------------------------------------------------- optimizer


def _scalar_params(value, name="cls.w"):
    params = fresh_params(tiny_config())
    for n, t in params.tensors.items():
        t.requires_grad = n == name
    params[name].data[...] = value
    return params


def test_adamw_zero_grad_no_decay_is_identity():
    params = fresh_params(tiny_config())
    before = {n: t.data.copy() for n, t in params.tensors.items()}
    params.zero_grad()
    adamw_step(params, zero_moments(params), 1, _cfg(weight_decay=0.0))
    for n, t in params.tensors.items():
        assert t.data.tobytes() == before[n].tobytes()


def test_adamw_decay_is_multiplicative():
    params = fresh_params(tiny_config())
    before = {n: t.data.copy() for n, t in params.tensors.items()}
    params.zero_grad()
    cfg = _cfg(weight_decay=0.1, lr_encoder=1e-3, lr_attention=2e-3, lr_classifier=5e-3)
    adamw_step(params, zero_moments(params), 1, cfg)
    for n, t in params.tensors.items():
        if t.requires_grad:
            lr = cfg.lr(param_group(n))
            np.testing.assert_allclose(t.data, before[n] * (1 - lr * 0.1), rtol=0, atol=1e-15)


def test_adamw_first_step_moves_by_lr():
    params = fresh_params(tiny_config())
    params.zero_grad()
    w = params["cls.w"]
    w.grad = np.ones_like(w.data)
    start = w.data.copy()
    cfg = _cfg(weight_decay=0.0, lr_classifier=1e-3)
    adamw_step(params, zero_moments(params), 1, cfg)
    expected = -1e-3 * (1 / (1 - 0.9)) * 0.1 / (np.sqrt(0.001 / (1 - 0.999)) + 1e-8)
    np.testing.assert_allclose(w.data - start, expected, rtol=1e-12)
    assert expected == pytest.approx(-1e-3, rel=1e-7)


def test_adamw_rejects_nonfinite_and_step_zero():
    params = fresh_params(tiny_config())
    params.zero_grad()
    params["cls.w"].grad = np.full_like(params["cls.w"].data, np.nan)
    with pytest.raises(NumericError, match="cls.w"):
        adamw_step(params, zero_moments(params), 1, _cfg())
    with pytest.raises(ConfigError):
        adamw_step(params, zero_moments(params), 0, _cfg())


def test_groups_total_and_disjoint():
    params = fresh_params(tiny_config())
    for n in params.names():
        assert param_group(n) in GROUPS
    emb = [n for n in params.names() if n.startswith("emb.")]
    assert emb and all(param_group(n) == "classifier" for n in emb)
    assert all(param_group(n, "attention") == "attention" for n in emb)


# --------------------------------------------------------------------------- loop


def _run(clips, tcfg, mcfg=None, steps=None):
    tr = Trainer(mcfg or tiny_config(), tcfg, clips)
    tr.run(max_steps=steps)
    return tr


def test_grad_accum_equivalence(rand_clips):
    a = _run(rand_clips, _cfg(batch_size=8, grad_accum=1, epochs=1))
    b = _run(rand_clips, _cfg(batch_size=2, grad_accum=4, epochs=1))
    assert a.step == b.step == 2
    for n in a.params.names():
        np.testing.assert_allclose(a.params[n].data, b.params[n].data, rtol=0, atol=1e-10)


def test_same_seed_same_curve(rand_clips):
    a = _run(rand_clips, _cfg(seed=3))
    b = _run(rand_clips, _cfg(seed=3))
    c = _run(rand_clips, _cfg(seed=4))
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert [h["loss"] for h in a.history] != [h["loss"] for h in c.history]


def test_empty_split_rejected():
    with pytest.raises(ConfigError):
        Trainer(tiny_config(), _cfg(), [])


def test_freeze_encoder_keeps_encoder_bit_exact(rand_clips):
    tr = Trainer(tiny_config(), _cfg(freeze_encoder=True), rand_clips)
    before = {n: tr.params[n].data.copy() for n in tr.params.names()}
    tr.run(max_steps=5)
    moved = False
    for n in tr.params.names():
        if param_group(n) == "encoder":
            assert tr.params[n].data.tobytes() == before[n].tobytes()
            assert tr.params[n].grad is None or not np.any(tr.params[n].grad)
        else:
            moved |= not np.array_equal(tr.params[n].data, before[n])
    assert moved


def test_validation_schedule_and_best(rand_clips):
    tr = Trainer(tiny_config(), _cfg(epochs=2, batch_size=2), rand_clips[:8], rand_clips[8:])
    best = tr.run()
    validated = [h["step"] for h in tr.history if "val_inst_macro_f1" in h]
    assert tr.steps_per_epoch == 4 and validated == list(range(1, 9))
    assert best.best_f1 == max(h["val_inst_macro_f1"] for h in tr.history)
    assert best.step == max(h["step"] for h in tr.history if h.get("best"))


def test_overfit_single_song(song):
    mcfg = tiny_config(n_mels=64, d_model=16)
    tr = Trainer(mcfg, _cfg(batch_size=len(song), epochs=200, lr_encoder=2e-3, lr_attention=2e-3,
                            lr_classifier=2e-3), song)
    tr.run(max_steps=200)
    assert evaluate(song, mcfg, tr.params).accuracy >= 0.99
    smooth = np.array([h["loss"] for h in tr.history]).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(smooth) <= 0)


def test_train_wrapper_builds_model_config(rand_clips):
    best, tr = train(rand_clips[:4], rand_clips[4:6], _cfg(epochs=1, no_inst_emb=True), VOCAB[:4],
                     d_model=8, heads=2, n_mels=6, enc_blocks=1, max_tracks=3)
    assert not best.model_config.use_inst_emb and best.model_config.instruments == VOCAB[:4]
    assert tr.step == 2


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_forward_bit_exact(rand_clips, tmp_path):
    tr = _run(rand_clips, _cfg(), steps=3)
    ckpt = tr.checkpoint()
    save_checkpoint(tmp_path / "c.npz", ckpt)
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.model_config == ckpt.model_config and back.train_config == ckpt.train_config
    assert back.step == 3
    with tc.no_grad():
        for clip in rand_clips[:3]:
            a, _ = forward(clip, ckpt.model_config, ckpt.params)
            b, _ = forward(clip, back.model_config, back.params)
            assert a.data.tobytes() == b.data.tobytes()


def test_resume_reproduces_unbroken_run(rand_clips, tmp_path):
    cfg = _cfg(epochs=2.5, batch_size=3)
    mcfg = tiny_config(dropout=0.3)
    full = _run(rand_clips, cfg, mcfg)
    part = _run(rand_clips, cfg, mcfg, steps=7)
    save_checkpoint(tmp_path / "p.npz", part.checkpoint())
    resumed = Trainer.resume(load_checkpoint(tmp_path / "p.npz"), rand_clips)
    resumed.run()
    assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history]
    for n in full.params.names():
        assert resumed.params[n].data.tobytes() == full.params[n].data.tobytes()


def test_checkpoint_errors(rand_clips, tmp_path):
    p = tmp_path / "c.npz"
    save_checkpoint(p, _run(rand_clips, _cfg(), steps=1).checkpoint())
    data = p.read_bytes()
    (tmp_path / "t.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.npz")
    (tmp_path / "g.npz").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "g.npz")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")


def test_checkpoint_version_checked(rand_clips, tmp_path, monkeypatch):
    import leadinst.training as training

    p = tmp_path / "c.npz"
    monkeypatch.setattr(training, "CHECKPOINT_VERSION", 99)
    save_checkpoint(p, _run(rand_clips, _cfg(), steps=1).checkpoint())
    monkeypatch.setattr(training, "CHECKPOINT_VERSION", 1)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
