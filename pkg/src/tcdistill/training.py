"""Distillation training loop with pseudo-label promotion.

The student trains on an alpha-weighted blend of the key-frame loss (against
manual or pseudo hard labels) and the temporal-consistency loss (against the
frozen teacher's propagated soft masks). After each round, temporal frames
whose student prediction agrees with the teacher beyond a strict mIoU gate
are promoted into the key-frame set with the student's hard prediction as
their pseudo label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .imagery import ClassMask, SoftMask, VideoSequence
from .metrics import TeacherBuilder, miou
from .models import (NUM_FEATURES, StudentParams, extract_features,
                     mask_to_onehot, propagate, soft_to_hard)
from .models import _backward_arrays, _forward_probs

__all__ = [
    "MANUAL",
    "PSEUDO",
    "TrainConfig",
    "KeyFrameStore",
    "build_temporal_set",
    "kf_loss",
    "tc_loss",
    "total_loss",
    "train_supervised",
    "train_round",
    "run_training",
    "save_history",
    "load_history",
    "save_store",
    "load_store",
]

MANUAL = "manual"
PSEUDO = "pseudo"

_REL_LOSS_STOP = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the distillation loop."""

    alpha: float = 0.5
    tc_s: float = 0.9
    learning_rate: float = 0.5
    epochs_per_round: int = 50
    max_rounds: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.tc_s < 1.0:
            raise ValueError(f"tc_s must lie in (0, 1), got {self.tc_s}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs_per_round < 1:
            raise ValueError(f"epochs_per_round must be >= 1, got {self.epochs_per_round}")
        if self.max_rounds < 0:
            raise ValueError(f"max_rounds must be >= 0, got {self.max_rounds}")


def build_temporal_set(key_indices, num_frames: int) -> tuple[int, ...]:
    """Successors of key frames that are not keys themselves: sorted
    {k + 1 : k in K, k + 1 < N} minus K."""
    keys = set(int(k) for k in key_indices)
    return tuple(sorted({k + 1 for k in keys if k + 1 < num_frames} - keys))


def kf_loss(pred: SoftMask, target: ClassMask) -> float:
    """Mean per-pixel squared L2 distance to the one-hot of a hard label.

    Bounded by 2 (disjoint one-hots).
    """
    if (pred.height, pred.width) != (target.height, target.width):
        raise ValueError("prediction and target dimensions differ")
    if pred.classes != target.classes:
        raise ValueError(f"class counts differ: {pred.classes} vs {target.classes}")
    diff = pred.data - mask_to_onehot(target).data
    return float((diff * diff).sum(axis=2).mean())


def tc_loss(pred: SoftMask, target: SoftMask) -> float:
    """Mean per-pixel squared L2 distance between two soft masks."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"soft mask shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    return float((diff * diff).sum(axis=2).mean())


def total_loss(j_kf: float, j_tc: float, alpha: float) -> float:
    """alpha-weighted blend alpha * j_kf + (1 - alpha) * j_tc."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * j_kf + (1.0 - alpha) * j_tc


class KeyFrameStore:
    """Labeled key frames plus the temporal working set.

    Invariants, maintained across every operation: the key and temporal sets
    are disjoint; every key frame has a label with manual or pseudo
    provenance; manual labels are never overwritten; and every key frame's
    in-range successor is either a key frame or in the temporal set.
    """

    def __init__(self, num_frames: int, manual_labels: Mapping[int, ClassMask]):
        if num_frames < 1:
            raise ValueError(f"num_frames must be >= 1, got {num_frames}")
        if not manual_labels:
            raise ValueError("store needs at least one manual label")
        items = sorted((int(i), lab) for i, lab in manual_labels.items())
        classes = items[0][1].classes
        dims = (items[0][1].height, items[0][1].width)
        for i, lab in items:
            if not 0 <= i < num_frames:
                raise ValueError(f"label index {i} out of range for {num_frames} frames")
            if lab.classes != classes or (lab.height, lab.width) != dims:
                raise ValueError(f"label {i} disagrees on dimensions or class count")
        self._num_frames = num_frames
        self._classes = classes
        self._dims = dims
        self._labels: dict[int, ClassMask] = {i: lab for i, lab in items}
        self._provenance: dict[int, str] = {i: MANUAL for i, _ in items}
        self._temporal: set[int] = set(build_temporal_set(self._labels, num_frames))
        self._promotion_log: list[dict] = []

    @property
    def num_frames(self) -> int:
        return self._num_frames

    @property
    def classes(self) -> int:
        return self._classes

    @property
    def key_indices(self) -> tuple[int, ...]:
        return tuple(sorted(self._labels))

    @property
    def temporal_indices(self) -> tuple[int, ...]:
        return tuple(sorted(self._temporal))

    @property
    def promotion_log(self) -> tuple[dict, ...]:
        return tuple(dict(e) for e in self._promotion_log)

    def label(self, frame: int) -> ClassMask:
        return self._labels[frame]

    def provenance(self, frame: int) -> str:
        return self._provenance[frame]

    def promote(self, frame: int, pseudo_label: ClassMask, round_index: int,
                gate_value: float) -> None:
        """Move a temporal frame into the key set with a pseudo label.

        The frame's successor (if in range and not already a key) joins the
        temporal set. Raises on a second promotion of the same frame and on
        any attempt to relabel an existing key frame.
        """
        frame = int(frame)
        if frame in self._labels:
            kind = self._provenance[frame]
            raise ValueError(f"frame {frame} is already a {kind} key frame")
        if frame not in self._temporal:
            raise ValueError(f"frame {frame} is not in the temporal set")
        if pseudo_label.classes != self._classes or \
                (pseudo_label.height, pseudo_label.width) != self._dims:
            raise ValueError("pseudo label disagrees on dimensions or class count")
        self._temporal.discard(frame)
        self._labels[frame] = pseudo_label
        self._provenance[frame] = PSEUDO
        nxt = frame + 1
        if nxt < self._num_frames and nxt not in self._labels:
            self._temporal.add(nxt)
        self._promotion_log.append({"round": int(round_index), "frame": frame,
                                    "gate": float(gate_value)})

    def check_invariants(self) -> None:
        keys = set(self._labels)
        if keys & self._temporal:
            raise AssertionError("key and temporal sets overlap")
        if set(self._provenance) != keys:
            raise AssertionError("provenance does not cover the key set")
        for k in keys:
            nxt = k + 1
            if nxt < self._num_frames and nxt not in keys and nxt not in self._temporal:
                raise AssertionError(f"successor {nxt} of key {k} is untracked")

    def to_json(self) -> dict:
        return {
            "num_frames": self._num_frames,
            "classes": self._classes,
            "height": self._dims[0],
            "width": self._dims[1],
            "keys": list(self.key_indices),
            "temporal": list(self.temporal_indices),
            "provenance": {str(i): self._provenance[i] for i in self.key_indices},
            "labels": {str(i): self._labels[i].data.reshape(-1).tolist()
                       for i in self.key_indices},
            "promotion_log": [dict(e) for e in self._promotion_log],
        }

    @staticmethod
    def from_json(data: dict) -> "KeyFrameStore":
        h, w = int(data["height"]), int(data["width"])
        classes = int(data["classes"])
        labels = {}
        for key, flat in data["labels"].items():
            arr = np.asarray(flat, dtype=np.int64).reshape(h, w)
            labels[int(key)] = ClassMask(arr, classes)
        manual = {i: labels[i] for i in labels if data["provenance"][str(i)] == MANUAL}
        store = KeyFrameStore(int(data["num_frames"]), manual)
        # Replay promotions in logged order to rebuild pseudo state.
        for entry in data["promotion_log"]:
            store.promote(int(entry["frame"]), labels[int(entry["frame"])],
                          int(entry["round"]), float(entry["gate"]))
        expected = set(int(i) for i in data["keys"])
        if set(store.key_indices) != expected:
            raise ValueError("store keys do not match replayed promotions")
        if set(store.temporal_indices) != set(int(i) for i in data["temporal"]):
            raise ValueError("store temporal set does not match replayed promotions")
        return store


def _gather_features(seq: VideoSequence, indices, cache: dict[int, np.ndarray]) -> np.ndarray:
    rows = []
    for i in indices:
        if i not in cache:
            cache[i] = extract_features(seq.frames[i]).data
        rows.append(cache[i].reshape(-1, NUM_FEATURES))
    return np.concatenate(rows) if rows else np.empty((0, NUM_FEATURES))


def _mean_sq_loss(probs: np.ndarray, target: np.ndarray) -> float:
    diff = probs - target
    return float((diff * diff).sum(axis=1).mean())


def train_supervised(seq: VideoSequence, labels: Mapping[int, ClassMask],
                     params: StudentParams, cfg: TrainConfig,
                     epochs: int | None = None) -> tuple[StudentParams, list[float]]:
    """Plain full-batch gradient descent on the key-frame loss only.

    Trains on the labeled frames for ``epochs`` passes (default
    epochs_per_round * max_rounds). Returns the trained parameters and the
    per-epoch loss trace (evaluated before each update).
    """
    if not labels:
        raise ValueError("supervised training needs at least one labeled frame")
    if epochs is None:
        epochs = cfg.epochs_per_round * max(cfg.max_rounds, 1)
    indices = sorted(int(i) for i in labels)
    cache: dict[int, np.ndarray] = {}
    feats = _gather_features(seq, indices, cache)
    onehots = np.concatenate([mask_to_onehot(labels[i]).data.reshape(-1, params.classes)
                              for i in indices])
    trace = []
    for _ in range(epochs):
        probs = _forward_probs(params, feats)
        trace.append(_mean_sq_loss(probs, onehots))
        dw, db = _backward_arrays(params, feats, onehots, 1.0)
        params = StudentParams(params.weights - cfg.learning_rate * dw,
                               params.bias - cfg.learning_rate * db)
    return params, trace


def train_round(seq: VideoSequence, store: KeyFrameStore, params: StudentParams,
                teacher_builder: TeacherBuilder, cfg: TrainConfig,
                round_index: int = 0) -> tuple[StudentParams, dict]:
    """One distillation round: freeze teacher targets, descend, promote.

    First the teacher propagates to every temporal frame from the key frames
    that precede it (memory never contains indices >= the target frame);
    those targets stay fixed for the round. Then epochs_per_round full-batch
    steps descend the blended loss. Finally every temporal frame from the
    round's snapshot whose hardened student prediction agrees with the
    hardened teacher target above tc_s (strictly) is promoted in ascending
    order. Deterministic for fixed inputs.
    """
    if store.classes != seq.classes or store.num_frames != seq.num_frames:
        raise ValueError("store does not match the sequence")
    keys_start = store.key_indices
    temporal_start = store.temporal_indices
    cache: dict[int, np.ndarray] = {}

    teacher_soft: dict[int, np.ndarray] = {}
    for t in temporal_start:
        entries = [(seq.frames[k], store.label(k)) for k in keys_start if k < t]
        memory = teacher_builder(entries)
        teacher_soft[t] = propagate(seq.frames[t], memory).data

    kf_feats = _gather_features(seq, keys_start, cache)
    kf_target = np.concatenate([mask_to_onehot(store.label(k)).data.reshape(-1, seq.classes)
                                for k in keys_start])
    if temporal_start:
        tc_feats = _gather_features(seq, temporal_start, cache)
        tc_target = np.concatenate([teacher_soft[t].reshape(-1, seq.classes)
                                    for t in temporal_start])

    epoch_loss = []
    for _ in range(cfg.epochs_per_round):
        j_kf = _mean_sq_loss(_forward_probs(params, kf_feats), kf_target)
        dw, db = _backward_arrays(params, kf_feats, kf_target, cfg.alpha)
        if temporal_start:
            j_tc = _mean_sq_loss(_forward_probs(params, tc_feats), tc_target)
            dw2, db2 = _backward_arrays(params, tc_feats, tc_target, 1.0 - cfg.alpha)
            dw = dw + dw2
            db = db + db2
        else:
            j_tc = 0.0
        epoch_loss.append(total_loss(j_kf, j_tc, cfg.alpha))
        params = StudentParams(params.weights - cfg.learning_rate * dw,
                               params.bias - cfg.learning_rate * db)

    j_kf_end = _mean_sq_loss(_forward_probs(params, kf_feats), kf_target)
    if temporal_start:
        j_tc_end = _mean_sq_loss(_forward_probs(params, tc_feats), tc_target)
    else:
        j_tc_end = 0.0

    promotions = []
    for t in temporal_start:
        feats_t = cache[t]
        student_soft = SoftMask(_forward_probs(params, feats_t))
        student_hard = soft_to_hard(student_soft)
        teacher_hard = soft_to_hard(SoftMask(teacher_soft[t]))
        gate = miou(teacher_hard, student_hard).mean
        if gate > cfg.tc_s:
            store.promote(t, student_hard, round_index, gate)
            promotions.append({"frame": int(t), "gate": float(gate)})

    stats = {
        "round": int(round_index),
        "j_kf": j_kf_end,
        "j_tc": j_tc_end,
        "j_total": total_loss(j_kf_end, j_tc_end, cfg.alpha),
        "epoch_loss": epoch_loss,
        "promotions": promotions,
        "keys_start": list(keys_start),
        "temporal_start": list(temporal_start),
        "num_keys_end": len(store.key_indices),
        "num_temporal_end": len(store.temporal_indices),
    }
    return params, stats


def run_training(seq: VideoSequence, store: KeyFrameStore, params: StudentParams,
                 teacher_builder: TeacherBuilder, cfg: TrainConfig) -> tuple[StudentParams, list[dict]]:
    """Iterate rounds until max_rounds, or until a round promotes nothing and
    the total loss improves by less than 1e-4 relative to the previous round.

    max_rounds = 0 returns the parameters untouched with an empty history.
    """
    history: list[dict] = []
    prev_total: float | None = None
    for r in range(cfg.max_rounds):
        params, stats = train_round(seq, store, params, teacher_builder, cfg, round_index=r)
        history.append(stats)
        if not stats["promotions"] and prev_total is not None:
            rel = abs(prev_total - stats["j_total"]) / max(abs(prev_total), 1e-12)
            if rel < _REL_LOSS_STOP:
                break
        prev_total = stats["j_total"]
    return params, history


def save_history(history: list[dict], path: Path | str) -> None:
    Path(path).write_text(json.dumps({"rounds": history}, indent=2, sort_keys=True) + "\n")


def load_history(path: Path | str) -> list[dict]:
    return json.loads(Path(path).read_text())["rounds"]


def save_store(store: KeyFrameStore, path: Path | str) -> None:
    Path(path).write_text(json.dumps(store.to_json(), indent=2, sort_keys=True) + "\n")


def load_store(path: Path | str) -> KeyFrameStore:
    return KeyFrameStore.from_json(json.loads(Path(path).read_text()))
