"""Frame-level accuracy and macro-F1, averaged per clip then over clips."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from . import tensor as tc
from .errors import AlignmentError, LabelError, UndefinedMetricError
from .model import forward, predict, segment_label
from .sample import TRACK, map_ids

NO_INSTRUMENT = -1  # predicted track ID with no metadata in the clip


def _check(pred, ref):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    ref = np.asarray(ref, dtype=np.int64).reshape(-1)
    if pred.shape != ref.shape:
        raise AlignmentError(f"prediction length {pred.size} != reference length {ref.size}")
    if pred.size == 0:
        raise UndefinedMetricError("metric undefined on empty sequences")
    return pred, ref


def frame_accuracy(pred, ref):
    pred, ref = _check(pred, ref)
    return float(np.mean(pred == ref))


def confusion(pred, ref, classes):
    """Confusion matrix ``cm[i, j]`` = frames with reference ``classes[i]`` predicted as ``classes[j]``."""
    pred, ref = _check(pred, ref)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    order = np.argsort(classes, kind="stable")
    ranked = classes[order]

    def index(v):
        at = np.clip(np.searchsorted(ranked, v), 0, max(len(ranked) - 1, 0))
        missing = v if len(ranked) == 0 else v[ranked[at] != v]
        if missing.size:
            raise LabelError(f"labels {sorted(set(missing.tolist()))} not among the confusion classes")
        return order[at]

    return kernels.confusion_matrix(index(ref), index(pred), len(classes))


def _nonzero(d):
    return np.where(d > 0, d, 1.0)


def per_class_scores(cm):
    """Precision, recall, F1 and support per class from a confusion matrix.

    F1 is computed as ``2 tp / (2 tp + fp + fn)`` (0 when that is 0/0), which
    equals ``2PR / (P + R)`` but is one correctly rounded division.
    """
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    ref_tot = cm.sum(axis=1).astype(np.float64)
    denom = pred_tot + ref_tot  # = 2 tp + fp + fn
    precision = np.where(pred_tot > 0, tp / _nonzero(pred_tot), 0.0)
    recall = np.where(ref_tot > 0, tp / _nonzero(ref_tot), 0.0)
    f1 = np.where(denom > 0, 2.0 * tp / _nonzero(denom), 0.0)
    return precision, recall, f1, ref_tot.astype(np.int64)


def macro_f1(pred, ref, classes=None):
    """Unweighted mean F1 over ``classes`` (default: labels in ref ∪ pred)."""
    pred, ref = _check(pred, ref)
    if classes is None:
        classes = np.union1d(np.unique(ref), np.unique(pred))
    cm = confusion(pred, ref, classes)
    return float(per_class_scores(cm)[2].mean())


def track_to_instrument(pred_tracks, id_to_instrument, missing=None):
    """Replace each predicted track ID by the instrument of that track."""
    return map_ids(pred_tracks, id_to_instrument, missing)


@dataclass
class MetricsReport:
    scheme: str
    n_clips: int
    accuracy: float
    macro_f1: float
    inst_accuracy: float
    inst_macro_f1: float
    track_macro_f1: float | None = None
    per_sample: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)
    confusion_labels: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    per_instrument_accuracy: dict = field(default_factory=dict)
    heldout: dict | None = None

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_confusion_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["reference\\predicted"] + self.confusion_labels)
            for name, row in zip(self.confusion_labels, self.confusion):
                w.writerow([name] + list(row))

    def table(self):
        lines = [f"scheme: {self.scheme}   clips: {self.n_clips}"]
        if self.track_macro_f1 is not None:
            lines.append(f"Track F1  {100 * self.track_macro_f1:6.2f}")
        lines.append(f"Inst F1   {100 * self.inst_macro_f1:6.2f}")
        lines.append(f"Inst Acc  {100 * self.inst_accuracy:6.2f}")
        if self.per_class:
            lines.append("")
            lines.append(f"{'instrument':<14}{'prec':>8}{'rec':>8}{'f1':>8}{'support':>9}")
            for name, s in self.per_class.items():
                lines.append(f"{name:<14}{s['precision']:8.3f}{s['recall']:8.3f}{s['f1']:8.3f}{s['support']:9d}")
        if self.heldout:
            h = self.heldout
            lines.append("")
            lines.append(f"held-out '{h['instrument']}': accuracy {100 * h['accuracy']:.2f} over {h['frames']} frames")
        return "\n".join(lines)


def clip_predictions(clip, cfg, params):
    """Eval-mode prediction for one clip (per frame, or one label per clip)."""
    with tc.no_grad():
        logits, _ = forward(clip, cfg, params, training=False)
    return predict(logits)


def _names_by_id(clip):
    names = clip.extra.get("names") or ()
    return {m.track_id: (names[i] if i < len(names) else str(m.instrument)) for i, m in enumerate(clip.metas)}


def summarize(clips, preds, cfg, heldout=None):
    """Build a :class:`MetricsReport` from per-clip predictions.

    ``preds[i]`` holds track IDs (TRACK scheme) or instrument indices
    (INSTRUMENT scheme) for ``clips[i]``. Instrument-level metrics compare
    instrument vocabulary indices; the per-instrument and held-out breakdowns
    compare instrument names, so an instrument absent from the vocabulary can
    never be matched by an INSTRUMENT-scheme model.
    """
    if not clips:
        raise UndefinedMetricError("no clips to evaluate")
    vocab = list(cfg.instruments)
    rows, all_ref, all_pred = [], [], []
    name_ref, name_pred = [], []
    track_f1s = []
    for clip, pred in zip(clips, preds):
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        id2inst = clip.id_to_instrument()
        id2name = _names_by_id(clip)
        ref_tracks = clip.labels
        if cfg.segment_level:
            ref_tracks = np.array([segment_label(ref_tracks)])
        ref_inst = map_ids(ref_tracks, id2inst)
        if cfg.scheme == TRACK:
            pred_inst = track_to_instrument(pred, id2inst, missing=NO_INSTRUMENT)
            pred_names = [id2name.get(int(p), "<none>") for p in pred]
        else:
            pred_inst = pred
            pred_names = [vocab[int(p)] if 0 <= p < len(vocab) else "<none>" for p in pred]
        ref_names = [id2name[int(r)] for r in ref_tracks]
        row = {
            "song_id": clip.song_id,
            "start_sec": clip.start_sec,
            "inst_accuracy": frame_accuracy(pred_inst, ref_inst),
            "inst_macro_f1": macro_f1(pred_inst, ref_inst),
        }
        if cfg.scheme == TRACK:
            row["track_accuracy"] = frame_accuracy(pred, ref_tracks)
            row["track_macro_f1"] = macro_f1(pred, ref_tracks)
            track_f1s.append(row["track_macro_f1"])
        rows.append(row)
        all_ref.append(ref_inst)
        all_pred.append(pred_inst)
        name_ref.extend(ref_names)
        name_pred.extend(pred_names)

    inst_acc = float(np.mean([r["inst_accuracy"] for r in rows]))
    inst_f1 = float(np.mean([r["inst_macro_f1"] for r in rows]))
    if cfg.scheme == TRACK:
        acc = float(np.mean([r["track_accuracy"] for r in rows]))
        f1 = track_f1 = float(np.mean(track_f1s))
    else:
        acc, f1, track_f1 = inst_acc, inst_f1, None

    ref_cat, pred_cat = np.concatenate(all_ref), np.concatenate(all_pred)
    labels = np.union1d(np.unique(ref_cat), np.unique(pred_cat))
    cm = confusion(pred_cat, ref_cat, labels)
    precision, recall, f1s, support = per_class_scores(cm)

    def label_name(i):
        return vocab[i] if 0 <= i < len(vocab) else "<none>"

    label_names = [label_name(int(i)) for i in labels]
    per_class = {
        n: {"precision": float(p), "recall": float(r), "f1": float(s), "support": int(k)}
        for n, p, r, s, k in zip(label_names, precision, recall, f1s, support)
    }
    name_ref, name_pred = np.array(name_ref), np.array(name_pred)
    per_inst = {str(n): float(np.mean(name_pred[name_ref == n] == n)) for n in np.unique(name_ref)}
    held = None
    if heldout:
        mask = name_ref == heldout
        held = {
            "instrument": heldout,
            "frames": int(mask.sum()),
            "accuracy": float(np.mean(name_pred[mask] == heldout)) if mask.any() else float("nan"),
        }
    return MetricsReport(
        scheme=cfg.scheme, n_clips=len(clips), accuracy=acc, macro_f1=f1,
        inst_accuracy=inst_acc, inst_macro_f1=inst_f1, track_macro_f1=track_f1,
        per_sample=rows, per_class=per_class, confusion_labels=label_names,
        confusion=cm.tolist(), per_instrument_accuracy=per_inst, heldout=held,
    )


def evaluate(clips, cfg, params, heldout=None):
    """Run the model over ``clips`` and report metrics."""
    preds = [clip_predictions(c, cfg, params) for c in clips]
    return summarize(clips, preds, cfg, heldout)
