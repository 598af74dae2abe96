"""Segmentation quality (mIoU) and temporal consistency of predictions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imagery import ClassMask, ColorImage, VideoSequence
from .models import (PixelFeatures, StudentParams, TeacherConfig, TeacherMemory,
                     extract_features, make_teacher_builder, propagate,
                     soft_to_hard, student_forward)

__all__ = [
    "METRIC_TEACHER",
    "MiouResult",
    "TcResult",
    "EvalReport",
    "miou",
    "temporal_consistency",
    "evaluate",
    "save_report",
    "load_report",
]

# Teacher used to carry the previous frame's prediction forward when scoring
# temporal consistency: pixel-granular and sharply peaked, so propagating a
# mask from an identical frame reproduces it exactly.
METRIC_TEACHER = TeacherConfig(patch_size=1, tau=1e-5)

TeacherBuilder = Callable[[Sequence[tuple[ColorImage, ClassMask]]], TeacherMemory]


@dataclass(frozen=True)
class MiouResult:
    """Per-class IoU (NaN where the union is empty) and their mean."""

    per_class: np.ndarray
    mean: float


def miou(pred: ClassMask, truth: ClassMask) -> MiouResult:
    """Mean intersection-over-union between two label masks.

    Classes absent from both masks (empty union) are excluded from the
    mean. Symmetric in its arguments and invariant under any relabeling
    applied to both masks at once.
    """
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValueError("mask dimensions differ")
    if pred.classes != truth.classes:
        raise ValueError(f"class counts differ: {pred.classes} vs {truth.classes}")
    c = pred.classes
    confusion = np.bincount(pred.data.reshape(-1) * c + truth.data.reshape(-1),
                            minlength=c * c).reshape(c, c)
    inter = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - inter
    per_class = np.full(c, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    return MiouResult(per_class, float(per_class[present].mean()))


@dataclass(frozen=True)
class TcResult:
    """Per-pair consistency trace (frames 1..N-1) and its mean."""

    trace: tuple[float, ...]
    mean: float


def temporal_consistency(frames: Sequence[ColorImage], preds: Sequence[ClassMask],
                         teacher_builder: TeacherBuilder | None = None) -> TcResult:
    """Mean frame-pair mIoU between the teacher-propagated previous
    prediction and the current prediction.

    For each t in 1..N-1 the previous frame together with its prediction
    forms a one-entry memory; the propagated mask is hardened and scored
    against the current prediction with :func:`miou`.
    """
    if len(frames) != len(preds):
        raise ValueError(f"{len(frames)} frames but {len(preds)} predictions")
    if len(frames) < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    if teacher_builder is None:
        teacher_builder = make_teacher_builder(METRIC_TEACHER)
    trace = []
    for t in range(1, len(frames)):
        memory = teacher_builder([(frames[t - 1], preds[t - 1])])
        carried = soft_to_hard(propagate(frames[t], memory))
        trace.append(miou(carried, preds[t]).mean)
    return TcResult(tuple(trace), float(np.mean(trace)))


@dataclass(frozen=True)
class EvalReport:
    """Validation summary for a student on a sequence.

    per_class_iou uses None for classes whose union is empty across the
    whole sequence; temporal_consistency is None for single-frame input.
    """

    classes: int
    num_frames: int
    per_class_iou: tuple[float | None, ...]
    miou: float
    temporal_consistency: float | None
    trace: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "classes": self.classes,
            "num_frames": self.num_frames,
            "per_class_iou": list(self.per_class_iou),
            "miou": self.miou,
            "temporal_consistency": self.temporal_consistency,
            "trace": list(self.trace),
        }

    @staticmethod
    def from_json(data: dict) -> "EvalReport":
        return EvalReport(
            classes=int(data["classes"]),
            num_frames=int(data["num_frames"]),
            per_class_iou=tuple(None if v is None else float(v)
                                for v in data["per_class_iou"]),
            miou=float(data["miou"]),
            temporal_consistency=(None if data["temporal_consistency"] is None
                                  else float(data["temporal_consistency"])),
            trace=tuple(float(v) for v in data["trace"]),
        )


def evaluate(seq: VideoSequence, params: StudentParams,
             teacher_builder: TeacherBuilder | None = None,
             features: Sequence[PixelFeatures] | None = None) -> EvalReport:
    """Run the student on every frame; report micro-averaged mIoU against
    ground truth plus the temporal consistency of the predictions.

    The mIoU is micro-averaged: per-class intersections and unions are
    accumulated over all frames before dividing. Deterministic for fixed
    inputs; the report round-trips through JSON.
    """
    if params.classes != seq.classes:
        raise ValueError(f"student has {params.classes} classes, sequence has {seq.classes}")
    if features is not None and len(features) != seq.num_frames:
        raise ValueError("feature cache length does not match sequence")
    c = seq.classes
    preds = []
    inter = np.zeros(c, dtype=np.int64)
    union = np.zeros(c, dtype=np.int64)
    for i, frame in enumerate(seq.frames):
        feats = features[i] if features is not None else extract_features(frame)
        pred = soft_to_hard(student_forward(params, feats))
        preds.append(pred)
        confusion = np.bincount(pred.data.reshape(-1) * c + seq.masks[i].data.reshape(-1),
                                minlength=c * c).reshape(c, c)
        d = np.diag(confusion)
        inter += d
        union += confusion.sum(axis=0) + confusion.sum(axis=1) - d

    present = union > 0
    per_class = [float(inter[k] / union[k]) if present[k] else None for k in range(c)]
    micro = float(np.mean([inter[k] / union[k] for k in range(c) if present[k]]))

    if seq.num_frames >= 2:
        tc = temporal_consistency(list(seq.frames), preds, teacher_builder)
        tc_mean: float | None = tc.mean
        trace = tc.trace
    else:
        tc_mean = None
        trace = ()
    return EvalReport(c, seq.num_frames, tuple(per_class), micro, tc_mean, trace)


def save_report(report: EvalReport, path: Path | str) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def load_report(path: Path | str) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text()))
