"""Image and video types, synthetic sequence generation, and dataset I/O.

Images are real-valued internally (float64 in [0, 255]); quantization to
8-bit happens only when a sequence is written to or read from disk.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "GrayImage",
    "ColorImage",
    "ClassMask",
    "SoftMask",
    "VideoSequence",
    "SynthSpec",
    "to_gray",
    "class_palette",
    "generate_synthetic",
    "save_sequence",
    "load_sequence",
]

# BT.601 luma weights for RGB -> gray.
_LUMA = (0.299, 0.587, 0.114)

_SOFTMASK_SUM_TOL = 1e-6


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image; ``data`` is (height, width) float64 in [0, 255]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"gray image must be 2-d and non-empty, got shape {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 255.0:
            raise ValueError("gray image values must lie in [0, 255]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ColorImage:
    """RGB image; ``data`` is (height, width, 3) float64 in [0, 255]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"color image must be (h, w, 3) and non-empty, got shape {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 255.0:
            raise ValueError("color image values must lie in [0, 255]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClassMask:
    """Per-pixel class labels; ``data`` is (height, width) int64 in [0, classes)."""

    data: np.ndarray
    classes: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"class mask must be 2-d and non-empty, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"class mask must be integer-typed, got {arr.dtype}")
        if self.classes < 1:
            raise ValueError(f"classes must be >= 1, got {self.classes}")
        arr = arr.astype(np.int64, copy=False)
        if arr.min() < 0 or arr.max() >= self.classes:
            raise ValueError(f"mask labels must lie in [0, {self.classes}), got range "
                             f"[{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SoftMask:
    """Per-pixel class distributions; ``data`` is (height, width, classes) float64.

    Each pixel's vector is a probability distribution: entries in [0, 1],
    summing to 1 within 1e-6.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] < 1 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"soft mask must be (h, w, classes), got shape {arr.shape}")
        if arr.min() < -0.0 or arr.max() > 1.0 + _SOFTMASK_SUM_TOL:
            raise ValueError("soft mask entries must lie in [0, 1]")
        sums = arr.sum(axis=2)
        err = np.abs(sums - 1.0).max()
        if err > _SOFTMASK_SUM_TOL:
            raise ValueError(f"soft mask pixel sums deviate from 1 by {err:.3g}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class VideoSequence:
    """Frames with aligned ground-truth masks and a shared class count."""

    frames: tuple[ColorImage, ...]
    masks: tuple[ClassMask, ...]
    classes: int

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        masks = tuple(self.masks)
        if not frames:
            raise ValueError("sequence must contain at least one frame")
        if len(frames) != len(masks):
            raise ValueError(f"{len(frames)} frames but {len(masks)} masks")
        if self.classes < 1:
            raise ValueError(f"classes must be >= 1, got {self.classes}")
        h, w = frames[0].height, frames[0].width
        for i, (f, m) in enumerate(zip(frames, masks)):
            if (f.height, f.width) != (h, w) or (m.height, m.width) != (h, w):
                raise ValueError(f"frame/mask {i} dimensions differ from frame 0")
            if m.classes != self.classes:
                raise ValueError(f"mask {i} declares {m.classes} classes, sequence has {self.classes}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "masks", masks)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for the deterministic synthetic sequence generator."""

    width: int = 64
    height: int = 64
    num_frames: int = 40
    classes: int = 3
    num_blobs: int = 3
    drift_px_per_frame: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError(f"frame dimensions must be >= 8, got {self.width}x{self.height}")
        if self.num_frames < 1:
            raise ValueError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.num_blobs < 1:
            raise ValueError(f"num_blobs must be >= 1, got {self.num_blobs}")
        if self.drift_px_per_frame < 0.0:
            raise ValueError("drift_px_per_frame must be >= 0")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")


def to_gray(image: ColorImage) -> GrayImage:
    """Convert RGB to gray with BT.601 luma weights, clamped to [0, 255].

    Parameters
    ----------
    image : ColorImage

    Returns
    -------
    GrayImage
    """
    r, g, b = image.data[..., 0], image.data[..., 1], image.data[..., 2]
    luma = _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b
    return GrayImage(np.clip(luma, 0.0, 255.0))


_BACKGROUND_RGB = (40.0, 44.0, 52.0)
_LADDER_BASE = (170.0, 150.0, 110.0)
# Foreground classes contrast strongly with the background but only
# moderately with each other, and the neighbor step is nearly proportional
# to gray: separating neighbors is easy on a clean frame, but the rule has
# to ride the exposure wander because no chromatic shortcut cancels it.
_LADDER_MINOR = (10.0, 9.0, 8.0)
_LADDER_MAJOR = (-20.0, -8.0, 25.0)
_MAX_PALETTE_CLASSES = 65

# Frame-to-frame autocorrelation of the shared exposure offset.
_FLICKER_RHO = 0.9


def class_palette(classes: int) -> np.ndarray:
    """Fixed (classes, 3) float64 palette; row 0 is the dark background color.

    Foreground colors sit on a bright two-step ladder: pairwise distinct
    mean colors, with adjacent class indices only a few RGB units apart.
    Supports up to 65 classes.
    """
    if classes < 1:
        raise ValueError(f"classes must be >= 1, got {classes}")
    if classes > _MAX_PALETTE_CLASSES:
        raise ValueError(f"palette supports at most {_MAX_PALETTE_CLASSES} classes, got {classes}")
    pal = np.zeros((classes, 3), dtype=np.float64)
    pal[0] = _BACKGROUND_RGB
    for c in range(1, classes):
        a, b = (c - 1) % 16, (c - 1) // 16
        for ch in range(3):
            pal[c, ch] = _LADDER_BASE[ch] + a * _LADDER_MINOR[ch] + b * _LADDER_MAJOR[ch]
    return pal


def generate_synthetic(spec: SynthSpec) -> VideoSequence:
    """Generate a deterministic sequence of drifting elliptical blobs.

    Each blob is an axis-aligned ellipse of one foreground class over a
    class-0 background; later blobs paint on top of earlier ones. Blob
    centers translate by ``drift_px_per_frame`` along a per-blob axis and
    wrap at the borders (torus geometry), so integer drift preserves each
    blob's pixel footprint exactly.

    Additive Gaussian noise models a camera with exposure wander: each
    frame carries one shared gray offset (equal across pixels and channels)
    that follows a stationary AR(1) process with per-frame std
    0.8 * noise_std and autocorrelation 0.9, plus independent per-pixel
    noise of std 0.6 * noise_std, so the per-pixel marginal std is exactly
    ``noise_std``. Brightness therefore drifts slowly between distant
    frames while staying nearly continuous between adjacent ones, the way
    exposure does in real footage. Identical specs yield bit-identical
    sequences.
    """
    w, h = spec.width, spec.height
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    ax_min = max(3.0, min(w, h) / 8.0)
    ax_max = min(w, h) / 4.5
    if ax_max < ax_min:
        raise ValueError(f"{w}x{h} frame too small for blob axes in [{ax_min}, {ax_max}]")

    # All blob parameters are drawn up front, then per-frame noise, so the
    # draw order (and therefore the output) is fixed.
    blobs = []
    for b in range(spec.num_blobs):
        cx = rng.uniform(0.0, w)
        cy = rng.uniform(0.0, h)
        sx = rng.uniform(ax_min, ax_max)
        sy = rng.uniform(ax_min, ax_max)
        rng.integers(1, spec.classes)  # consumed to keep the stream position stable
        # Round-robin labels: every foreground class appears whenever
        # num_blobs >= classes - 1, and blob counts per class stay balanced.
        label = 1 + b % (spec.classes - 1)
        axis = int(rng.integers(0, 2))
        sign = 1.0 if int(rng.integers(0, 2)) == 0 else -1.0
        vx = spec.drift_px_per_frame * sign if axis == 0 else 0.0
        vy = spec.drift_px_per_frame * sign if axis == 1 else 0.0
        blobs.append((cx, cy, sx, sy, label, vx, vy))

    palette = class_palette(spec.classes)
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]

    # Stationary AR(1) exposure offset: marginal std is 0.8 * noise_std at
    # every frame, autocorrelation _FLICKER_RHO between neighbors.
    shared_std = 0.8 * spec.noise_std
    offset = 0.0
    frames = []
    masks = []
    for t in range(spec.num_frames):
        mask = np.zeros((h, w), dtype=np.int64)
        rgb = np.empty((h, w, 3), dtype=np.float64)
        rgb[:] = palette[0]
        for cx, cy, sx, sy, label, vx, vy in blobs:
            # Nearest-wrap deltas put the ellipse on a torus.
            dx = (xs - (cx + t * vx) + w / 2.0) % w - w / 2.0
            dy = (ys - (cy + t * vy) + h / 2.0) % h - h / 2.0
            inside = (dx / sx) ** 2 + (dy / sy) ** 2 <= 1.0
            if not inside.any():
                raise ValueError("degenerate zero-area blob")
            mask[inside] = label
            rgb[inside] = palette[label]
        if spec.noise_std > 0.0:
            # Shared offset first, then the pixel grid: fixed draw order.
            if t == 0:
                offset = rng.normal(0.0, shared_std)
            else:
                step = math.sqrt(1.0 - _FLICKER_RHO ** 2) * shared_std
                offset = _FLICKER_RHO * offset + rng.normal(0.0, step)
            rgb = rgb + offset + rng.normal(0.0, 0.6 * spec.noise_std, size=(h, w, 3))
            rgb = np.clip(rgb, 0.0, 255.0)
        frames.append(ColorImage(rgb))
        masks.append(ClassMask(mask, spec.classes))

    return VideoSequence(tuple(frames), tuple(masks), spec.classes)


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(arr, 0.0, 255.0)).astype(np.uint8)


def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    """Read a binary PPM (P6) or PGM (P5) file with maxval 255."""
    raw = path.read_bytes()
    if not raw.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} header")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines.
    pos = len(magic)
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in b"\r\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise ValueError(f"{path}: malformed header")
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=-1, offset=pos)
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} pixel bytes, got {data.size}")
    if channels == 3:
        return data.reshape(height, width, 3)
    return data.reshape(height, width)


def _write_netpbm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + arr.tobytes())


def save_sequence(seq: VideoSequence, root: Path | str) -> None:
    """Write ``<root>/frames/%06d.ppm``, ``<root>/masks/%06d.pgm`` and meta.json.

    Frames are quantized to 8-bit (round half away from zero, clamped);
    masks are written as raw class indices, which requires classes <= 255.
    """
    if seq.classes > 255:
        raise ValueError(f"cannot store {seq.classes} classes in 8-bit masks")
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(seq.frames, seq.masks)):
        _write_netpbm(root / "frames" / f"{i:06d}.ppm", b"P6", _quantize(frame.data))
        _write_netpbm(root / "masks" / f"{i:06d}.pgm", b"P5", mask.data.astype(np.uint8))
    meta = {
        "classes": seq.classes,
        "num_frames": seq.num_frames,
        "width": seq.width,
        "height": seq.height,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_sequence(root: Path | str) -> VideoSequence:
    """Load a sequence written by :func:`save_sequence`.

    Raises ValueError naming the offending file for a missing frame index, a
    dimension mismatch against meta.json, or a mask label >= the declared
    class count. Save followed by load round-trips the 8-bit data exactly.
    """
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise ValueError(f"{meta_path}: missing dataset metadata")
    meta = json.loads(meta_path.read_text())
    for key in ("classes", "num_frames", "width", "height"):
        if key not in meta:
            raise ValueError(f"{meta_path}: missing field {key!r}")
    classes = int(meta["classes"])
    num_frames = int(meta["num_frames"])
    width, height = int(meta["width"]), int(meta["height"])
    if num_frames < 1 or classes < 1 or width < 1 or height < 1:
        raise ValueError(f"{meta_path}: invalid metadata values")

    frames = []
    masks = []
    for i in range(num_frames):
        fpath = root / "frames" / f"{i:06d}.ppm"
        mpath = root / "masks" / f"{i:06d}.pgm"
        if not fpath.is_file():
            raise ValueError(f"{fpath}: missing frame {i}")
        if not mpath.is_file():
            raise ValueError(f"{mpath}: missing mask {i}")
        rgb = _read_netpbm(fpath, b"P6")
        if rgb.shape[:2] != (height, width):
            raise ValueError(f"{fpath}: dimensions {rgb.shape[1]}x{rgb.shape[0]} "
                             f"do not match meta {width}x{height}")
        lab = _read_netpbm(mpath, b"P5")
        if lab.shape != (height, width):
            raise ValueError(f"{mpath}: dimensions {lab.shape[1]}x{lab.shape[0]} "
                             f"do not match meta {width}x{height}")
        if int(lab.max(initial=0)) >= classes:
            raise ValueError(f"{mpath}: mask label {int(lab.max())} >= declared classes {classes}")
        frames.append(ColorImage(rgb.astype(np.float64)))
        masks.append(ClassMask(lab.astype(np.int64), classes))

    return VideoSequence(tuple(frames), tuple(masks), classes)
