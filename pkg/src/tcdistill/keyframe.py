"""Key-frame selection: greedy SSIM threshold scan and a uniform baseline."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .imagery import VideoSequence, to_gray
from .ssim import SsimParams, compute_ssim

__all__ = [
    "SelectionResult",
    "select_keyframes",
    "select_uniform",
    "save_selection",
    "load_selection",
]


@dataclass(frozen=True)
class SelectionResult:
    """Chosen key-frame indices for a sequence.

    key_indices is strictly increasing and always starts at frame 0;
    threshold is the SSIM threshold used, or None for uniform selection.
    """

    key_indices: tuple[int, ...]
    num_frames: int
    threshold: float | None = None

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.key_indices)
        if not idx or idx[0] != 0:
            raise ValueError(f"selection must start at frame 0, got {idx[:1]}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("key indices must be strictly increasing")
        if idx[-1] >= self.num_frames:
            raise ValueError(f"key index {idx[-1]} out of range for {self.num_frames} frames")
        object.__setattr__(self, "key_indices", idx)

    @property
    def count(self) -> int:
        return len(self.key_indices)


def select_keyframes(seq: VideoSequence, threshold: float,
                     params: SsimParams = SsimParams()) -> SelectionResult:
    """Greedy anchor scan: frame t stays unlabeled while SSIM(anchor, t)
    meets the threshold; otherwise t becomes a key frame and the new anchor.

    Frame 0 is always a key frame. Equality with the threshold counts as
    similar enough (non-key). The comparison runs on gray conversions.
    """
    if not math.isfinite(threshold) or not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [-1, 1], got {threshold}")
    grays = [to_gray(f) for f in seq.frames]
    keys = [0]
    anchor = 0
    for t in range(1, seq.num_frames):
        if compute_ssim(grays[anchor], grays[t], params) >= threshold:
            continue
        keys.append(t)
        anchor = t
    return SelectionResult(tuple(keys), seq.num_frames, threshold=threshold)


def select_uniform(num_frames: int, n: int) -> SelectionResult:
    """Evenly spaced selection of n indices over [0, num_frames).

    Indices are round(i * (N - 1) / (n - 1)) for i in [0, n), with half-up
    rounding; duplicates collapse, so fewer than n frames may come back.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if n < 1 or n > num_frames:
        raise ValueError(f"n must lie in [1, {num_frames}], got {n}")
    if n == 1:
        return SelectionResult((0,), num_frames)
    step = (num_frames - 1) / (n - 1)
    idx = sorted({int(math.floor(i * step + 0.5)) for i in range(n)})
    return SelectionResult(tuple(idx), num_frames)


def save_selection(result: SelectionResult, path: Path | str) -> None:
    """Write selection.json: {"threshold": s, "key_indices": [...], "count": k}."""
    payload = {
        "threshold": result.threshold,
        "key_indices": list(result.key_indices),
        "count": result.count,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_selection(path: Path | str, num_frames: int) -> SelectionResult:
    """Read selection.json back; num_frames comes from the dataset it applies to."""
    path = Path(path)
    data = json.loads(path.read_text())
    if "key_indices" not in data:
        raise ValueError(f"{path}: missing key_indices")
    threshold = data.get("threshold")
    return SelectionResult(tuple(int(i) for i in data["key_indices"]), num_frames,
                           threshold=None if threshold is None else float(threshold))
