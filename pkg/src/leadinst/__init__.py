"""Lead instrument detection from multitrack audio.

Given the separate instrument tracks of a song (and optionally the mixture),
a model labels every 20 ms frame with the track (or instrument) carrying the
lead. Tracks are compared with the mixture through frame-wise multi-head
attention, so the model accepts any number of tracks in any order.

Modules: ``audio`` (WAV I/O and preprocessing), ``frontend`` (log-mel
features and encoder), ``model`` (LeadNet variants), ``augment`` (track
permutation), ``datagen`` (synthetic multitrack songs), ``training``,
``metrics`` and ``cli``. Hot kernels live in ``kernels``, which picks the
compiled backend when available.
"""

from .errors import LeadInstError
from .kernels import BACKEND
from .model import ModelConfig, forward, predict
from .sample import INSTRUMENT, TRACK, MultitrackSample, TrackMeta
from .training import TrainConfig, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "INSTRUMENT",
    "LeadInstError",
    "ModelConfig",
    "MultitrackSample",
    "TRACK",
    "TrackMeta",
    "TrainConfig",
    "forward",
    "load_checkpoint",
    "predict",
    "train",
]
