"""Track permutation augmentation.

Track IDs are reassigned by a random bijection of ``1..max_tracks`` (the
mixture ID 0 stays fixed) and the frame labels are remapped with it, so a
track keeps its audio and instrument but may move to a previously unused ID.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CorruptSampleError, ParameterError
from .sample import MIX_TRACK_ID, TrackMeta


@dataclass(frozen=True)
class TrackPermutation:
    """``mapping[i]`` is the new ID of track ID ``i``; ``mapping[0] == 0``."""

    mapping: tuple

    def __post_init__(self):
        m = np.asarray(self.mapping)
        if m.size == 0 or m[0] != MIX_TRACK_ID or sorted(m.tolist()) != list(range(m.size)):
            raise ParameterError("track permutation must be a bijection fixing 0")

    def __call__(self, ids):
        m = np.asarray(self.mapping)
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= m.size):
            raise CorruptSampleError(f"track id outside permutation domain [0, {m.size})")
        return m[ids]

    def inverse(self):
        inv = np.empty(len(self.mapping), dtype=np.int64)
        inv[np.asarray(self.mapping)] = np.arange(len(self.mapping))
        return TrackPermutation(tuple(int(i) for i in inv))

    @classmethod
    def identity(cls, max_tracks):
        return cls(tuple(range(max_tracks + 1)))


def sample_permutation(track_ids, max_tracks, rng):
    """Uniform random bijection over ``1..max_tracks``.

    Consumes exactly one ``rng.permutation(max_tracks)`` draw.
    """
    track_ids = np.asarray(track_ids)
    if track_ids.size < 1:
        raise ParameterError("need at least one instrument track")
    if track_ids.max() > max_tracks or track_ids.min() < 1:
        raise ParameterError(f"track ids must lie in [1, {max_tracks}]")
    perm = rng.permutation(max_tracks) + 1
    return TrackPermutation((0,) + tuple(int(p) for p in perm))


def apply_permutation(sample, perm):
    """New sample with every track ID and every frame label mapped by ``perm``."""
    metas = tuple(TrackMeta(int(perm(m.track_id)), m.instrument) for m in sample.metas)
    present = {m.track_id for m in sample.metas}
    if not set(np.unique(sample.labels).tolist()) <= present:
        raise CorruptSampleError("frame label names a track that is not in the sample")
    return replace(sample, metas=metas, labels=perm(sample.labels).astype(np.int64))
