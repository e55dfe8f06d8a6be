"""Lead-instrument classifier with track-wise frame-level attention.

Every track (and the mixture) is encoded by the same frame-wise encoder,
instrument and track-ID embeddings are added, and at each frame the mixture
features act as the attention query over the instrument tracks. The
attention output is layer-normalized, passed through dropout and classified
frame by frame. ``FROM_MIX`` and ``TRACK_AVG`` replace the attention with
"mixture only" and "unweighted mean over tracks" respectively.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .audio import Waveform
from .errors import AlignmentError, ConfigError, EmptyTrackSetError, ShapeError
from .frontend import EncoderConfig, encode, init_encoder
from .sample import INSTRUMENT, MIX_INSTRUMENT, MIX_TRACK_ID, TRACK, UNKNOWN_INSTRUMENT

FROM_MIX = "from_mix"
TRACK_AVG = "track_avg"
TRACK_ATTN = "track_attn"
VARIANTS = (FROM_MIX, TRACK_AVG, TRACK_ATTN)
SCHEMES = (TRACK, INSTRUMENT)

GROUPS = ("encoder", "attention", "classifier")


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    dropout: float = 0.8
    max_tracks: int = 8
    instruments: tuple = ("MIX", "UNKNOWN")
    scheme: str = TRACK
    variant: str = TRACK_ATTN
    use_inst_emb: bool = True
    use_track_emb: bool = True
    use_oracle_mix: bool = True
    segment_level: bool = False
    mask_absent: bool = False
    n_mels: int = 64
    enc_blocks: int = 2

    def __post_init__(self):
        self.instruments = tuple(self.instruments)
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_tracks < 1:
            raise ConfigError("max_tracks must be >= 1")
        if len(self.instruments) < 2:
            raise ConfigError("instrument vocabulary needs at least MIX and UNKNOWN")

    @property
    def n_classes(self):
        # class 0 (the mixture id) exists in the TRACK scheme but is never a target
        return self.max_tracks + 1 if self.scheme == TRACK else len(self.instruments)

    @property
    def encoder(self):
        return EncoderConfig(n_mels=self.n_mels, d_model=self.d_model, n_blocks=self.enc_blocks)

    def to_dict(self):
        d = asdict(self)
        d["instruments"] = list(self.instruments)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_group(name, embedding_group="classifier"):
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith(("attn.", "post.")):
        return "attention"
    if name.startswith("emb."):
        return embedding_group
    if name.startswith("cls."):
        return "classifier"
    raise KeyError(name)


@dataclass
class ModelParams:
    """Named learnable tensors plus fixed input-normalization buffers."""

    tensors: dict
    buffers: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def count(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self):
        out = {f"param/{k}": t.data.copy() for k, t in self.tensors.items()}
        out.update({f"buffer/{k}": np.array(v, copy=True) for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_state_dict(cls, state):
        tensors, buffers = {}, {}
        for key, arr in state.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                tensors[name] = tc.tensor(arr, requires_grad=True, name=name)
            elif kind == "buffer":
                buffers[name] = np.array(arr)
        return cls(tensors, buffers)

    def copy(self):
        return ModelParams.from_state_dict(self.state_dict())

    def set_frozen(self, group, frozen=True, embedding_group="classifier"):
        for name, t in self.tensors.items():
            if param_group(name, embedding_group) == group:
                t.requires_grad = not frozen


def init_params(cfg: ModelConfig, rng):
    """Initialize every tensor the configured architecture uses, and no others."""
    D = cfg.d_model
    arrays = init_encoder(cfg.encoder, rng)
    if cfg.use_inst_emb:
        arrays["emb.instrument"] = rng.normal(0.0, 1.0, (len(cfg.instruments), D))
        # UNKNOWN never occurs in training, so a random row would stay pure noise
        arrays["emb.instrument"][UNKNOWN_INSTRUMENT] = 0.0
    if cfg.use_track_emb:
        arrays["emb.track"] = rng.normal(0.0, 1.0, (cfg.max_tracks + 1, D))
    if cfg.variant == TRACK_ATTN:
        for key in ("wq", "wk", "wv", "wo"):
            arrays[f"attn.{key}"] = rng.normal(0.0, 1.0 / np.sqrt(D), (D, D))
    arrays["post.ln_g"] = np.ones(D)
    arrays["post.ln_b"] = np.zeros(D)
    arrays["cls.w"] = rng.normal(0.0, 1.0 / np.sqrt(D), (D, cfg.n_classes))
    arrays["cls.b"] = np.zeros(cfg.n_classes)
    tensors = {k: tc.tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    buffers = {"in_mean": np.zeros(cfg.n_mels), "in_std": np.ones(cfg.n_mels)}
    return ModelParams(tensors, buffers)


def _meta_embedding(params, cfg, instrument, track_id):
    """Sum of the enabled embedding rows; ``None`` when both are disabled."""
    parts = []
    if cfg.use_inst_emb:
        parts.append(tc.embedding(params["emb.instrument"], instrument))
    if cfg.use_track_emb:
        parts.append(tc.embedding(params["emb.track"], track_id))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else tc.add(parts[0], parts[1])


def embed_meta(feat, meta, cfg, params):
    """Add the track's instrument and track-ID embeddings to every frame."""
    emb = _meta_embedding(params, cfg, meta.instrument, meta.track_id)
    return feat if emb is None else tc.add(feat, emb)


def embed_tracks(feats, metas, cfg, params):
    """Vectorized :func:`embed_meta` over an ``(N, T, D)`` stack."""
    inst = np.array([m.instrument for m in metas], dtype=np.int64)
    ids = np.array([m.track_id for m in metas], dtype=np.int64)
    emb = _meta_embedding(params, cfg, inst, ids)
    if emb is None:
        return feats
    return tc.add(feats, tc.expand(emb, 1, feats.shape[1]))


@dataclass
class AttentionTrace:
    weights: np.ndarray  # (H, T, N)
    track_ids: np.ndarray  # (N,)

    def rows(self):
        """(head, frame, track_id, weight) tuples in head-major order."""
        H, T, N = self.weights.shape
        for h in range(H):
            for t in range(T):
                for i in range(N):
                    yield h, t, int(self.track_ids[i]), float(self.weights[h, t, i])

    def dominant(self):
        """Per-frame track ID with the largest head-averaged weight."""
        return self.track_ids[np.argmax(self.weights.mean(axis=0), axis=1)]


def _post(x, cfg, params, training, rng):
    x = tc.layer_norm(x, params["post.ln_g"], params["post.ln_b"])
    return tc.dropout(x, cfg.dropout, training, rng)


def track_attention(mix_feat, track_feats, cfg, params, training=False, rng=None, track_ids=None):
    """Mixture-queried attention over instrument tracks, frame by frame.

    ``mix_feat`` is ``(T, D)``, ``track_feats`` ``(N, T, D)``. Returns the
    aggregated ``(T, D)`` map (after output projection, layer norm and
    dropout) and the attention weights.
    """
    if track_feats.shape[0] == 0:
        raise EmptyTrackSetError("track attention needs at least one instrument track")
    N, T, D = track_feats.shape
    if mix_feat.shape != (T, D):
        raise ShapeError(f"mixture features {mix_feat.shape} vs tracks {track_feats.shape}")
    flat = tc.reshape(track_feats, (N * T, D))
    q = tc.matmul(mix_feat, params["attn.wq"])
    k = tc.reshape(tc.matmul(flat, params["attn.wk"]), (N, T, D))
    v = tc.reshape(tc.matmul(flat, params["attn.wv"]), (N, T, D))
    heads_out, weights = tc.frame_attention(q, k, v, cfg.heads)
    agg = _post(tc.matmul(heads_out, params["attn.wo"]), cfg, params, training, rng)
    ids = np.arange(1, N + 1) if track_ids is None else np.asarray(track_ids)
    return agg, AttentionTrace(weights, ids)


def classify_frames(agg, params):
    return tc.add(tc.matmul(agg, params["cls.w"]), params["cls.b"])


def segment_head(agg, params):
    """Average over frames, then the linear classifier; returns ``(C,)``."""
    pooled = tc.reshape(tc.mean(agg, axis=0), (1, agg.shape[1]))
    return tc.reshape(classify_frames(pooled, params), (params["cls.b"].shape[0],))


def forward(sample, cfg, params, training=False, rng=None):
    """Logits for one clip: ``(T, C)``, or ``(C,)`` with ``segment_level``.

    Returns ``(logits, trace)``; ``trace`` is None except for TRACK_ATTN.
    """
    mix_mel = sample.mix if cfg.use_oracle_mix else sample.pseudo_mix
    if mix_mel is None:
        raise ConfigError("pseudo-mix features requested but not present in the sample")
    T = mix_mel.shape[0]
    enc = cfg.encoder
    mean, std = params.buffers.get("in_mean"), params.buffers.get("in_std")
    trace = None
    if cfg.variant == FROM_MIX:
        feats = encode(mix_mel, params, enc, mean, std)
        mix_emb = _meta_embedding(params, cfg, MIX_INSTRUMENT, MIX_TRACK_ID)
        mix_feat = feats if mix_emb is None else tc.add(feats, mix_emb)
        agg = _post(mix_feat, cfg, params, training, rng)
    else:
        N = sample.n_tracks
        if N == 0:
            raise EmptyTrackSetError("sample has no instrument tracks")
        if sample.tracks.shape[1] != T:
            raise ShapeError("mixture and track feature maps differ in length")
        if cfg.variant == TRACK_AVG:
            feats = encode(sample.tracks.reshape(N * T, -1), params, enc, mean, std)
            tracks = embed_tracks(tc.reshape(feats, (N, T, cfg.d_model)), sample.metas, cfg, params)
            agg = _post(tc.mean(tracks, axis=0), cfg, params, training, rng)
        else:
            stacked = np.concatenate([mix_mel, sample.tracks.reshape(N * T, -1)], axis=0)
            feats = encode(stacked, params, enc, mean, std)
            mix_feat = feats[:T]
            mix_emb = _meta_embedding(params, cfg, MIX_INSTRUMENT, MIX_TRACK_ID)
            if mix_emb is not None:
                mix_feat = tc.add(mix_feat, mix_emb)
            tracks = embed_tracks(tc.reshape(feats[T:], (N, T, cfg.d_model)), sample.metas, cfg, params)
            agg, trace = track_attention(mix_feat, tracks, cfg, params, training, rng, sample.track_ids)
    logits = segment_head(agg, params) if cfg.segment_level else classify_frames(agg, params)
    if cfg.mask_absent and cfg.scheme == TRACK:
        mask = np.full(cfg.n_classes, -1e9)
        mask[sample.track_ids] = 0.0
        logits = tc.add(logits, mask)
    return logits, trace


def predict(logits):
    """Per-frame argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits.data if isinstance(logits, tc.Tensor) else logits), axis=-1)


def segment_label(labels):
    """Most frequent frame label (lowest index on ties) for segment-level training."""
    vals, counts = np.unique(np.asarray(labels), return_counts=True)
    return int(vals[np.argmax(counts)])


def pseudo_mix(tracks):
    """Waveform-level average of single-instrument tracks."""
    if not tracks:
        raise EmptyTrackSetError("pseudo mix needs at least one track")
    sr = tracks[0].sample_rate
    n = tracks[0].n_frames
    for w in tracks:
        if w.sample_rate != sr or w.n_frames != n:
            raise AlignmentError("pseudo mix needs tracks of equal length and sample rate")
    return Waveform(np.mean([w.samples for w in tracks], axis=0), sr)
