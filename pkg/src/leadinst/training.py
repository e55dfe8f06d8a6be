"""Training loop: AdamW with per-group learning rates, gradient accumulation,
quarter-epoch validation and best-macro-F1 checkpoint retention.

Random draws all come from one ``numpy.random.Generator`` seeded with
``TrainConfig.seed``, in this order: parameter initialization; then per epoch
one permutation of the training clips; then per training clip one track
permutation (unless disabled) followed by the dropout mask(s) of its forward
pass. Validation draws nothing.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tc
from .augment import apply_permutation, sample_permutation
from .dataset import feature_stats
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import evaluate
from .model import GROUPS, ModelConfig, ModelParams, forward, init_params, param_group, segment_label

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: float = 2
    batch_size: int = 4
    grad_accum: int = 4
    weight_decay: float = 0.01
    lr_encoder: float = 1e-5
    lr_attention: float = 1e-5
    lr_classifier: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validate_every: float = 0.25
    embedding_group: str = "classifier"
    no_track_perm: bool = False
    no_inst_emb: bool = False
    no_track_emb: bool = False
    no_oracle_mix: bool = False
    freeze_encoder: bool = False
    variant: str = "track_attn"
    scheme: str = "track"

    def __post_init__(self):
        for name in ("lr_encoder", "lr_attention", "lr_classifier"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ConfigError("batch_size and grad_accum must be >= 1")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if not 0 < self.validate_every <= 1:
            raise ConfigError("validate_every must be a fraction of an epoch in (0, 1]")
        if self.embedding_group not in GROUPS:
            raise ConfigError(f"embedding_group must be one of {GROUPS}")

    def lr(self, group):
        return {"encoder": self.lr_encoder, "attention": self.lr_attention,
                "classifier": self.lr_classifier}[group]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def model_config_for(tcfg, vocab, **overrides):
    """ModelConfig reflecting the ablation flags of ``tcfg``."""
    kw = dict(
        instruments=tuple(vocab), scheme=tcfg.scheme, variant=tcfg.variant,
        use_inst_emb=not tcfg.no_inst_emb, use_track_emb=not tcfg.no_track_emb,
        use_oracle_mix=not tcfg.no_oracle_mix,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


# --------------------------------------------------------------------------- optimizer


def adamw_step(params, moments, step, tcfg):
    """One decoupled-weight-decay Adam update of every trainable tensor.

    ``moments`` maps names to ``(m, v)`` arrays and is updated in place.
    Tensors with ``requires_grad=False`` are left untouched. A missing
    gradient counts as zero.
    """
    if step < 1:
        raise ConfigError("optimizer step counter starts at 1")
    bad = [n for n, t in params.tensors.items()
           if t.requires_grad and t.grad is not None and not np.all(np.isfinite(t.grad))]
    if bad:
        raise NumericError(f"non-finite gradient at step {step} in: {', '.join(bad)}")
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, t in params.tensors.items():
        if not t.requires_grad:
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = tcfg.lr(param_group(name, tcfg.embedding_group))
        t.data *= 1.0 - lr * tcfg.weight_decay
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)


def zero_moments(params):
    return {n: (np.zeros_like(t.data), np.zeros_like(t.data)) for n, t in params.tensors.items()}


# --------------------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    moments: dict
    step: int = 0
    epoch: int = 0
    pos: int = 0
    order: np.ndarray | None = None
    rng_state: dict | None = None
    best_f1: float = -1.0
    history: list | None = None


def save_checkpoint(path, ckpt):
    arrays = dict(ckpt.params.state_dict())
    for name, (m, v) in ckpt.moments.items():
        arrays[f"m/{name}"] = m
        arrays[f"v/{name}"] = v
    if ckpt.order is not None:
        arrays["order"] = np.asarray(ckpt.order, dtype=np.int64)
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step, "epoch": ckpt.epoch, "pos": ckpt.pos,
        "rng_state": ckpt.rng_state, "best_f1": ckpt.best_f1,
        "history": ckpt.history or [],
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile, EOFError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION}")
    params = ModelParams.from_state_dict({k: v for k, v in arrays.items() if k.split("/")[0] in ("param", "buffer")})
    moments = {}
    for name in params.names():
        if f"m/{name}" in arrays:
            moments[name] = (arrays[f"m/{name}"].copy(), arrays[f"v/{name}"].copy())
    mcfg = ModelConfig.from_dict(meta["model_config"])
    tcfg = TrainConfig.from_dict(meta["train_config"])
    if tcfg.freeze_encoder:
        params.set_frozen("encoder", True, tcfg.embedding_group)
    return Checkpoint(
        mcfg, tcfg, params, moments, meta["step"], meta["epoch"], meta["pos"],
        arrays.get("order"), meta["rng_state"], meta["best_f1"], meta["history"],
    )


# --------------------------------------------------------------------------- loop


def sample_loss(clip, mcfg, params, tcfg, rng):
    """Loss of one training clip, including its permutation augmentation."""
    if not tcfg.no_track_perm:
        clip = apply_permutation(clip, sample_permutation(clip.track_ids, mcfg.max_tracks, rng))
    logits, _ = forward(clip, mcfg, params, training=True, rng=rng)
    targets = clip.targets(mcfg.scheme)
    if mcfg.segment_level:
        return tc.cross_entropy(tc.reshape(logits, (1, -1)), [segment_label(targets)])
    return tc.cross_entropy(logits, targets)


class Trainer:
    """Stateful training run that can stop and resume at optimizer-step boundaries."""

    def __init__(self, mcfg, tcfg, train_clips, valid_clips=(), log=None, heldout=None):
        if not train_clips:
            raise ConfigError("training split is empty")
        self.mcfg, self.tcfg = mcfg, tcfg
        self.train_clips, self.valid_clips = list(train_clips), list(valid_clips)
        self.log = log
        self.heldout = heldout
        self.rng = np.random.default_rng(tcfg.seed)
        self.params = init_params(mcfg, self.rng)
        mean, std = feature_stats(self.train_clips)
        self.params.buffers.update(in_mean=mean, in_std=std)
        if tcfg.freeze_encoder:
            self.params.set_frozen("encoder", True, tcfg.embedding_group)
        self.moments = zero_moments(self.params)
        self.step, self.epoch, self.pos = 0, 0, 0
        self.order = None
        self.best_f1 = -1.0
        self.best = None
        self.history = []

    @property
    def samples_per_step(self):
        return self.tcfg.batch_size * self.tcfg.grad_accum

    @property
    def steps_per_epoch(self):
        return math.ceil(len(self.train_clips) / self.samples_per_step)

    @property
    def total_steps(self):
        return math.ceil(self.tcfg.epochs * self.steps_per_epoch)

    @property
    def validate_interval(self):
        return max(1, math.ceil(self.steps_per_epoch * self.tcfg.validate_every))

    def train_step(self):
        """One optimizer step over the next ``batch_size * grad_accum`` clips."""
        if self.order is None or self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.train_clips))
            self.pos = 0
        chunk = self.order[self.pos:self.pos + self.samples_per_step]
        self.pos += len(chunk)
        micro = [chunk[i:i + self.tcfg.batch_size] for i in range(0, len(chunk), self.tcfg.batch_size)]
        self.params.zero_grad()
        total = 0.0
        for mb in micro:
            losses = [sample_loss(self.train_clips[j], self.mcfg, self.params, self.tcfg, self.rng) for j in mb]
            loss = losses[0] if len(losses) == 1 else tc.mean(tc.stack(losses))
            tc.mul(loss, 1.0 / len(micro)).backward()
            total += loss.item() * len(mb)
        self.step += 1
        adamw_step(self.params, self.moments, self.step, self.tcfg)
        if self.pos >= len(self.order):
            self.epoch += 1
        return total / len(chunk)

    def validate(self):
        if not self.valid_clips:
            return None
        return evaluate(self.valid_clips, self.mcfg, self.params, self.heldout)

    def run(self, max_steps=None):
        """Train until the configured epochs are done (or ``max_steps`` reached)."""
        stop = self.total_steps if max_steps is None else min(max_steps, self.total_steps)
        while self.step < stop:
            loss = self.train_step()
            rec = {"step": self.step, "epoch": self.epoch, "loss": loss,
                   "lr": {g: self.tcfg.lr(g) for g in GROUPS}}
            in_epoch = (self.step - 1) % self.steps_per_epoch + 1
            if (in_epoch % self.validate_interval == 0 or in_epoch == self.steps_per_epoch
                    or self.step == self.total_steps):
                report = self.validate()
                if report is not None:
                    rec["val_inst_macro_f1"] = report.inst_macro_f1
                    rec["val_inst_accuracy"] = report.inst_accuracy
                    if report.track_macro_f1 is not None:
                        rec["val_track_macro_f1"] = report.track_macro_f1
                    if report.inst_macro_f1 > self.best_f1:
                        self.best_f1 = report.inst_macro_f1
                        rec["best"] = True
                        self.best = self.checkpoint()
            self.history.append(rec)
            if self.log is not None:
                self.log(rec)
        if self.best is None:
            self.best = self.checkpoint()
        return self.best

    def checkpoint(self):
        return Checkpoint(
            self.mcfg, self.tcfg, self.params.copy(),
            {n: (m.copy(), v.copy()) for n, (m, v) in self.moments.items()},
            self.step, self.epoch, self.pos,
            None if self.order is None else self.order.copy(),
            self.rng.bit_generator.state, self.best_f1, [dict(h) for h in self.history],
        )

    @classmethod
    def resume(cls, ckpt, train_clips, valid_clips=(), log=None, heldout=None):
        self = cls.__new__(cls)
        self.mcfg, self.tcfg = ckpt.model_config, ckpt.train_config
        self.train_clips, self.valid_clips = list(train_clips), list(valid_clips)
        self.log, self.heldout = log, heldout
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.rng_state
        self.params = ckpt.params.copy()
        if self.tcfg.freeze_encoder:
            self.params.set_frozen("encoder", True, self.tcfg.embedding_group)
        self.moments = {n: (m.copy(), v.copy()) for n, (m, v) in ckpt.moments.items()}
        self.step, self.epoch, self.pos = ckpt.step, ckpt.epoch, ckpt.pos
        self.order = None if ckpt.order is None else np.asarray(ckpt.order).copy()
        self.best_f1 = ckpt.best_f1
        self.best = None
        self.history = [dict(h) for h in (ckpt.history or [])]
        return self


def train(train_clips, valid_clips, tcfg, vocab, log=None, heldout=None, **model_overrides):
    """Train from scratch; returns ``(best_checkpoint, trainer)``."""
    mcfg = model_config_for(tcfg, vocab, **model_overrides)
    trainer = Trainer(mcfg, tcfg, train_clips, valid_clips, log=log, heldout=heldout)
    return trainer.run(), trainer
