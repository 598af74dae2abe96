"""Student classifier and frozen propagation teacher.

The student is a per-pixel linear-softmax classifier over 7 handcrafted
features. The teacher propagates labels from memory frames to a query frame
by similarity-softmax attention over patch keys; it has no trainable state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .imagery import ClassMask, ColorImage, SoftMask, to_gray

__all__ = [
    "NUM_FEATURES",
    "PixelFeatures",
    "StudentParams",
    "StudentGrad",
    "TeacherConfig",
    "TeacherMemory",
    "extract_features",
    "init_student",
    "student_forward",
    "student_backward",
    "build_memory",
    "make_teacher_builder",
    "propagate",
    "mask_to_onehot",
    "soft_to_hard",
    "save_student",
    "load_student",
]

NUM_FEATURES = 7

# Population std of values in [0, 255] is at most 127.5 (half the range).
_STD_SCALE = 127.5

# exp(-x) underflows to exactly 0.0 in float64 near x = 745; pairs beyond
# this shifted-exponent cutoff contribute nothing to the attention sums.
_EXP_CUTOFF = 760.0


@dataclass(frozen=True)
class PixelFeatures:
    """Per-pixel feature vectors; ``data`` is (height, width, 7) in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != NUM_FEATURES:
            raise ValueError(f"features must be (h, w, {NUM_FEATURES}), got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("feature values must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StudentParams:
    """Linear-softmax parameters: ``weights`` (classes, 7), ``bias`` (classes,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != NUM_FEATURES:
            raise ValueError(f"weights must be (classes, {NUM_FEATURES}), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} classes")
        if w.shape[0] < 2:
            raise ValueError("student needs at least 2 classes")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("parameters must be finite")
        w = np.ascontiguousarray(w)
        b = np.ascontiguousarray(b)
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def classes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class StudentGrad:
    """Gradient with the same shapes as :class:`StudentParams`."""

    weights: np.ndarray
    bias: np.ndarray


def init_student(classes: int, seed: int = 0) -> StudentParams:
    """Small seeded random weights, zero bias."""
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return StudentParams(rng.normal(0.0, 0.01, size=(classes, NUM_FEATURES)),
                         np.zeros(classes))


def _box3(img: np.ndarray) -> np.ndarray:
    # 3x3 sums with edge replication.
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + h, dx:dx + w]
    return out


def extract_features(frame: ColorImage) -> PixelFeatures:
    """The 7 per-pixel features, all normalized to [0, 1].

    Channels: R, G, B scaled by 1/255; x and y positions scaled so the
    corners map to (0, 0) and (1, 1); mean and population std of luma over
    a 3x3 neighborhood (edge-replicated), scaled by 1/255 and 1/127.5.
    """
    h, w = frame.height, frame.width
    feats = np.empty((h, w, NUM_FEATURES), dtype=np.float64)
    feats[..., 0:3] = frame.data / 255.0
    xs = np.arange(w, dtype=np.float64) / (w - 1) if w > 1 else np.zeros(w)
    ys = np.arange(h, dtype=np.float64) / (h - 1) if h > 1 else np.zeros(h)
    feats[..., 3] = xs[None, :]
    feats[..., 4] = ys[:, None]
    luma = to_gray(frame).data
    mean = _box3(luma) / 9.0
    var = _box3(luma * luma) / 9.0 - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    feats[..., 5] = mean / 255.0
    feats[..., 6] = np.minimum(std / _STD_SCALE, 1.0)
    return PixelFeatures(feats)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_probs(params: StudentParams, feats: np.ndarray) -> np.ndarray:
    flat = feats.reshape(-1, NUM_FEATURES)
    logits = flat @ params.weights.T + params.bias
    return _softmax_rows(logits).reshape(*feats.shape[:-1], params.classes)


def student_forward(params: StudentParams, features: PixelFeatures) -> SoftMask:
    """Per-pixel class distributions softmax(W phi + b)."""
    return SoftMask(_forward_probs(params, features.data))


def _backward_arrays(params: StudentParams, feats: np.ndarray, target: np.ndarray,
                     weight: float) -> tuple[np.ndarray, np.ndarray]:
    flat = feats.reshape(-1, NUM_FEATURES)
    n = flat.shape[0]
    probs = _forward_probs(params, feats).reshape(n, params.classes)
    g = (2.0 * weight / n) * (probs - target.reshape(n, params.classes))
    # Chain through softmax: dz_k = p_k * (g_k - sum_c g_c p_c).
    dz = probs * (g - (g * probs).sum(axis=1, keepdims=True))
    return dz.T @ flat, dz.sum(axis=0)


def student_backward(params: StudentParams, features: PixelFeatures, target: SoftMask,
                     weight: float = 1.0) -> StudentGrad:
    """Gradient of weight * (1/I) * sum_pixels ||softmax(W phi + b) - target||^2.

    Matches central finite differences to 1e-4 relative error.
    """
    if (target.height, target.width) != (features.height, features.width):
        raise ValueError("feature and target dimensions differ")
    if target.classes != params.classes:
        raise ValueError(f"target has {target.classes} classes, student has {params.classes}")
    dw, db = _backward_arrays(params, features.data, target.data, weight)
    return StudentGrad(dw, db)


def mask_to_onehot(mask: ClassMask) -> SoftMask:
    """Hard labels as one-hot distributions."""
    return SoftMask(np.eye(mask.classes)[mask.data])


def soft_to_hard(soft: SoftMask) -> ClassMask:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return ClassMask(np.argmax(soft.data, axis=2), soft.classes)


@dataclass(frozen=True)
class TeacherConfig:
    """Patch geometry and similarity temperature of the propagation teacher."""

    patch_size: int = 4
    tau: float = 0.05

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


def _patch_starts(dim: int, patch: int) -> np.ndarray:
    return np.arange(0, dim, patch)


def _pool_keys(frame: ColorImage, patch: int) -> np.ndarray:
    """Per-patch 6-dim keys: mean RGB / 255, normalized patch center, luma std / 127.5.

    Patches tile the frame; edge patches are clipped to the image.
    """
    h, w = frame.height, frame.width
    ys = _patch_starts(h, patch)
    xs = _patch_starts(w, patch)
    luma = to_gray(frame).data
    keys = np.empty((len(ys) * len(xs), 6), dtype=np.float64)
    i = 0
    for y0 in ys:
        y1 = min(y0 + patch, h)
        for x0 in xs:
            x1 = min(x0 + patch, w)
            block = frame.data[y0:y1, x0:x1]
            keys[i, 0:3] = block.reshape(-1, 3).mean(axis=0) / 255.0
            cy = (y0 + y1 - 1) / 2.0
            cx = (x0 + x1 - 1) / 2.0
            keys[i, 3] = cx / (w - 1) if w > 1 else 0.0
            keys[i, 4] = cy / (h - 1) if h > 1 else 0.0
            lb = luma[y0:y1, x0:x1]
            keys[i, 5] = min(float(lb.std()) / _STD_SCALE, 1.0)
            i += 1
    return keys


def _pool_keys_fast(frame: ColorImage, patch: int) -> np.ndarray:
    """Vectorized pooling; exact blocked reductions when patches divide evenly."""
    h, w = frame.height, frame.width
    if patch == 1:
        luma = to_gray(frame).data
        keys = np.empty((h * w, 6), dtype=np.float64)
        keys[:, 0:3] = frame.data.reshape(-1, 3) / 255.0
        xs = np.arange(w, dtype=np.float64) / (w - 1) if w > 1 else np.zeros(w)
        ys = np.arange(h, dtype=np.float64) / (h - 1) if h > 1 else np.zeros(h)
        keys[:, 3] = np.broadcast_to(xs[None, :], (h, w)).reshape(-1)
        keys[:, 4] = np.broadcast_to(ys[:, None], (h, w)).reshape(-1)
        keys[:, 5] = 0.0
        return keys
    if h % patch or w % patch:
        return _pool_keys(frame, patch)
    ph, pw = h // patch, w // patch
    blocks = frame.data.reshape(ph, patch, pw, patch, 3)
    luma = to_gray(frame).data.reshape(ph, patch, pw, patch)
    keys = np.empty((ph * pw, 6), dtype=np.float64)
    keys[:, 0:3] = blocks.mean(axis=(1, 3)).reshape(-1, 3) / 255.0
    cx = (np.arange(pw) * patch + (patch - 1) / 2.0) / (w - 1)
    cy = (np.arange(ph) * patch + (patch - 1) / 2.0) / (h - 1)
    keys[:, 3] = np.broadcast_to(cx[None, :], (ph, pw)).reshape(-1)
    keys[:, 4] = np.broadcast_to(cy[:, None], (ph, pw)).reshape(-1)
    mean = luma.mean(axis=(1, 3))
    var = (luma**2).mean(axis=(1, 3)) - mean * mean
    keys[:, 5] = np.minimum(np.sqrt(np.maximum(var, 0.0)) / _STD_SCALE, 1.0).reshape(-1)
    return keys


def _pool_values(mask: ClassMask, patch: int) -> np.ndarray:
    """Per-patch one-hot of the majority label; ties go to the lowest class."""
    h, w = mask.height, mask.width
    c = mask.classes
    if patch == 1:
        return np.eye(c)[mask.data.reshape(-1)]
    if h % patch == 0 and w % patch == 0:
        ph, pw = h // patch, w // patch
        blocks = mask.data.reshape(ph, patch, pw, patch).transpose(0, 2, 1, 3).reshape(-1, patch * patch)
        counts = np.zeros((blocks.shape[0], c), dtype=np.int64)
        for cls in range(c):
            counts[:, cls] = (blocks == cls).sum(axis=1)
        return np.eye(c)[counts.argmax(axis=1)]
    ys = _patch_starts(h, patch)
    xs = _patch_starts(w, patch)
    labels = []
    for y0 in ys:
        for x0 in xs:
            block = mask.data[y0:min(y0 + patch, h), x0:min(x0 + patch, w)]
            labels.append(int(np.bincount(block.reshape(-1), minlength=c).argmax()))
    return np.eye(c)[np.asarray(labels)]


@dataclass(frozen=True)
class TeacherMemory:
    """Stacked patch keys and one-hot patch values from labeled frames.

    keys is (patches, 6); values is (patches, classes) with one-hot rows.
    """

    keys: np.ndarray
    values: np.ndarray
    classes: int
    patch_size: int
    tau: float

    def __post_init__(self) -> None:
        k = np.asarray(self.keys, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if k.ndim != 2 or k.shape[1] != 6 or k.shape[0] == 0:
            raise ValueError(f"memory keys must be (patches, 6), got {k.shape}")
        if v.shape != (k.shape[0], self.classes):
            raise ValueError(f"memory values must be ({k.shape[0]}, {self.classes}), got {v.shape}")
        if not ((v == 0.0) | (v == 1.0)).all() or not (v.sum(axis=1) == 1.0).all():
            raise ValueError("memory values must be one-hot rows")
        if self.patch_size < 1 or self.tau <= 0.0:
            raise ValueError("invalid patch_size or tau")
        k = np.ascontiguousarray(k)
        v = np.ascontiguousarray(v)
        k.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "keys", k)
        object.__setattr__(self, "values", v)

    @property
    def num_patches(self) -> int:
        return self.keys.shape[0]


def build_memory(entries: Sequence[tuple[ColorImage, ClassMask]],
                 cfg: TeacherConfig = TeacherConfig()) -> TeacherMemory:
    """Pool labeled frames into a memory bank.

    Every entry's key/value grids tile its own frame; entries must agree on
    the class count. Raises on an empty entry list.
    """
    if not entries:
        raise ValueError("memory must contain at least one labeled frame")
    classes = entries[0][1].classes
    keys = []
    values = []
    for frame, mask in entries:
        if (frame.height, frame.width) != (mask.height, mask.width):
            raise ValueError("entry frame and mask dimensions differ")
        if mask.classes != classes:
            raise ValueError(f"entry declares {mask.classes} classes, expected {classes}")
        keys.append(_pool_keys_fast(frame, cfg.patch_size))
        values.append(_pool_values(mask, cfg.patch_size))
    return TeacherMemory(np.concatenate(keys), np.concatenate(values),
                         classes, cfg.patch_size, cfg.tau)


def make_teacher_builder(cfg: TeacherConfig) -> Callable[[Sequence[tuple[ColorImage, ClassMask]]], TeacherMemory]:
    """Builder closure handed to training and metrics code."""
    def builder(entries: Sequence[tuple[ColorImage, ClassMask]]) -> TeacherMemory:
        return build_memory(entries, cfg)
    return builder


def _attend_dense(q_keys: np.ndarray, memory: TeacherMemory) -> np.ndarray:
    """Numerator sums of exp(-d^2/tau)-weighted values, query-chunked.

    Uses the standard max-shifted evaluation of the similarity softmax; the
    shift cancels in the normalized output.
    """
    mk = memory.keys
    mv = memory.values
    mk_sq = (mk * mk).sum(axis=1)
    out = np.empty((q_keys.shape[0], memory.classes), dtype=np.float64)
    chunk = max(1, int(2**22 // max(mk.shape[0], 1)))
    for s in range(0, q_keys.shape[0], chunk):
        q = q_keys[s:s + chunk]
        d2 = (q * q).sum(axis=1)[:, None] - 2.0 * (q @ mk.T) + mk_sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        d2 -= d2.min(axis=1, keepdims=True)
        w = np.exp(-d2 / memory.tau)
        out[s:s + chunk] = w @ mv
    return out


def _attend_sparse(q_keys: np.ndarray, memory: TeacherMemory) -> np.ndarray:
    """Same sums as :func:`_attend_dense`, restricted to candidate neighbors.

    Every excluded pair sits more than _EXP_CUTOFF * tau beyond the query's
    minimum squared distance, so its shifted weight underflows to exactly
    zero and the restriction loses nothing.
    """
    mk = memory.keys
    labels = memory.values.argmax(axis=1)
    tree = cKDTree(mk)
    dmin, _ = tree.query(q_keys, k=1)
    radius = np.sqrt(dmin * dmin + _EXP_CUTOFF * memory.tau)
    balls = tree.query_ball_point(q_keys, r=radius, return_sorted=True)
    counts = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(balls))
    idx = np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])
    seg = np.repeat(np.arange(len(balls)), counts)
    diff = q_keys[seg] - mk[idx]
    d2 = (diff * diff).sum(axis=1)
    # Per-query shift by its own minimum, mirroring the dense path.
    shift = np.minimum.reduceat(d2, np.concatenate(([0], np.cumsum(counts)[:-1])))
    w = np.exp(-(d2 - shift[seg]) / memory.tau)
    num = np.bincount(seg * memory.classes + labels[idx], weights=w,
                      minlength=len(balls) * memory.classes)
    return num.reshape(len(balls), memory.classes)


def propagate(frame: ColorImage, memory: TeacherMemory) -> SoftMask:
    """Propagate memory labels to a frame by similarity-softmax attention.

    Each query patch key attends to every memory patch key with weight
    exp(-||kq - km||^2 / tau); its class distribution is the weight-normalized
    convex combination of the one-hot memory values, broadcast to the patch's
    pixels. A class absent from every memory value gets probability exactly 0.
    """
    q_keys = _pool_keys_fast(frame, memory.patch_size)
    # The sparse path pays off only for big low-temperature problems where
    # the candidate balls stay small.
    if (memory.patch_size == 1 and memory.tau <= 1e-3
            and q_keys.shape[0] * memory.num_patches > 4_000_000):
        num = _attend_sparse(q_keys, memory)
    else:
        num = _attend_dense(q_keys, memory)
    probs = num / num.sum(axis=1, keepdims=True)

    h, w = frame.height, frame.width
    p = memory.patch_size
    if p == 1:
        grid = probs.reshape(h, w, memory.classes)
    else:
        ny = len(_patch_starts(h, p))
        nx = len(_patch_starts(w, p))
        patch_grid = probs.reshape(ny, nx, memory.classes)
        grid = np.repeat(np.repeat(patch_grid, p, axis=0), p, axis=1)[:h, :w]
    return SoftMask(grid)


def save_student(params: StudentParams, path: Path | str) -> None:
    """Write student.json with explicit dimensions and row-major weights."""
    payload = {
        "classes": params.classes,
        "features": NUM_FEATURES,
        "weights": [[float(v) for v in row] for row in params.weights],
        "bias": [float(v) for v in params.bias],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_student(path: Path | str) -> StudentParams:
    """Read student.json back; round-trips exactly."""
    path = Path(path)
    data = json.loads(path.read_text())
    for key in ("classes", "features", "weights", "bias"):
        if key not in data:
            raise ValueError(f"{path}: missing field {key!r}")
    if int(data["features"]) != NUM_FEATURES:
        raise ValueError(f"{path}: expected {NUM_FEATURES} features, got {data['features']}")
    w = np.asarray(data["weights"], dtype=np.float64)
    b = np.asarray(data["bias"], dtype=np.float64)
    if w.shape != (int(data["classes"]), NUM_FEATURES):
        raise ValueError(f"{path}: weight shape {w.shape} does not match declared dims")
    return StudentParams(w, b)
