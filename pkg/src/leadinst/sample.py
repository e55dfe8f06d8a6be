"""Per-track metadata and the multitrack clip consumed by the model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MappingError

MIX_TRACK_ID = 0
MIX_INSTRUMENT = 0
UNKNOWN_INSTRUMENT = 1

TRACK = "track"
INSTRUMENT = "instrument"


@dataclass(frozen=True)
class TrackMeta:
    track_id: int
    instrument: int


@dataclass
class MultitrackSample:
    """One analysis clip: features of every instrument track plus the mixture.

    ``tracks`` is ``(N, T, n_mels)`` in the order of ``metas``; ``labels``
    holds the lead's track ID per frame.
    """

    tracks: np.ndarray
    mix: np.ndarray
    metas: tuple
    labels: np.ndarray
    pseudo_mix: np.ndarray | None = None
    song_id: str = ""
    start_sec: float = 0.0
    domain: str = "A"
    extra: dict = field(default_factory=dict)

    @property
    def n_tracks(self):
        return len(self.metas)

    @property
    def track_ids(self):
        return np.array([m.track_id for m in self.metas], dtype=np.int64)

    @property
    def instruments(self):
        return np.array([m.instrument for m in self.metas], dtype=np.int64)

    def id_to_instrument(self):
        return {m.track_id: m.instrument for m in self.metas}

    def instrument_labels(self):
        return map_ids(self.labels, self.id_to_instrument())

    def targets(self, scheme):
        return self.labels if scheme == TRACK else self.instrument_labels()

    def reorder(self, order):
        """Same clip with instrument tracks listed in ``order``."""
        order = list(order)
        return replace(self, tracks=self.tracks[order], metas=tuple(self.metas[i] for i in order))


def map_ids(ids, table, missing=None):
    """Map each entry of ``ids`` through ``table``.

    Unknown entries raise :class:`MappingError` unless ``missing`` is given,
    in which case they map to ``missing``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty_like(ids)
    for i, v in enumerate(ids.tolist()):
        if v in table:
            out[i] = table[v]
        elif missing is not None:
            out[i] = missing
        else:
            raise MappingError(f"track id {v} has no metadata")
    return out
