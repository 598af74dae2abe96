"""Greedy threshold selection traces and the uniform baseline."""
from __future__ import annotations

import numpy as np
import pytest

from tcdistill.imagery import ColorImage, ClassMask, SynthSpec, VideoSequence, generate_synthetic, to_gray
from tcdistill.keyframe import SelectionResult, load_selection, save_selection, select_keyframes, select_uniform
from tcdistill.ssim import SsimParams, compute_ssim


def _solid_seq(levels, size=16):
    frames = []
    masks = []
    for v in levels:
        arr = np.full((size, size, 3), float(v))
        frames.append(ColorImage(arr))
        masks.append(ClassMask(np.zeros((size, size), dtype=np.int64), 2))
    return VideoSequence(tuple(frames), tuple(masks), 2)


def test_single_frame_selects_frame_zero():
    seq = _solid_seq([128])
    sel = select_keyframes(seq, 0.5)
    assert sel.key_indices == (0,)


def test_identical_frames_select_only_first():
    seq = _solid_seq([128] * 6)
    sel = select_keyframes(seq, 0.5)
    assert sel.key_indices == (0,)


def test_alternating_black_white_selects_every_frame():
    # SSIM between constant 0 and constant 255 is about 1e-4, far below 0.5,
    # so every frame breaks from its anchor and resets it.
    seq = _solid_seq([0, 255, 0, 255])
    sel = select_keyframes(seq, 0.5)
    assert sel.key_indices == (0, 1, 2, 3)


def test_threshold_equality_counts_as_similar():
    seq = _solid_seq([0, 255])
    s = compute_ssim(to_gray(seq.frames[0]), to_gray(seq.frames[1]))
    assert select_keyframes(seq, s).key_indices == (0,)
    assert select_keyframes(seq, s + 1e-9).key_indices == (0, 1)


def test_anchor_resets_on_new_key():
    """After a break the comparison baseline moves to the breaking frame."""
    seq = _solid_seq([0, 255, 255, 255])
    sel = select_keyframes(seq, 0.5)
    # Frame 1 breaks from frame 0; frames 2 and 3 then match the new anchor.
    assert sel.key_indices == (0, 1)


def test_anchor_property_holds_on_synthetic():
    spec = SynthSpec(width=32, height=32, num_frames=12, num_blobs=2,
                     drift_px_per_frame=3.0, noise_std=6.0, seed=13)
    seq = generate_synthetic(spec)
    params = SsimParams()
    thr = 0.8
    sel = select_keyframes(seq, thr, params)
    keys = set(sel.key_indices)
    grays = [to_gray(f) for f in seq.frames]
    for t in range(seq.num_frames):
        if t in keys:
            continue
        anchor = max(k for k in keys if k < t)
        assert compute_ssim(grays[anchor], grays[t], params) >= thr


def test_selection_partition():
    spec = SynthSpec(width=32, height=32, num_frames=10, drift_px_per_frame=2.0,
                     noise_std=8.0, seed=21)
    seq = generate_synthetic(spec)
    sel = select_keyframes(seq, 0.6)
    assert sel.key_indices[0] == 0
    assert len(set(sel.key_indices)) == sel.count
    assert all(0 <= i < seq.num_frames for i in sel.key_indices)


def test_rejects_invalid_threshold():
    seq = _solid_seq([0, 255])
    with pytest.raises(ValueError):
        select_keyframes(seq, float("nan"))
    with pytest.raises(ValueError):
        select_keyframes(seq, 1.5)


def test_uniform_single():
    assert select_uniform(9, 1).key_indices == (0,)


def test_uniform_all_frames():
    assert select_uniform(5, 5).key_indices == (0, 1, 2, 3, 4)


def test_uniform_n4_of_10():
    assert select_uniform(10, 4).key_indices == (0, 3, 6, 9)


def test_uniform_rounding_half_up():
    # N=8, n=4: ideal positions 0, 7/3=2.33, 14/3=4.67, 7 -> 0, 2, 5, 7.
    assert select_uniform(8, 4).key_indices == (0, 2, 5, 7)


def test_uniform_count_when_enough_frames():
    for n in range(1, 12):
        sel = select_uniform(40, n)
        assert sel.count == n


def test_uniform_rejects_out_of_range():
    with pytest.raises(ValueError):
        select_uniform(5, 0)
    with pytest.raises(ValueError):
        select_uniform(5, 6)


def test_selection_result_validation():
    with pytest.raises(ValueError):
        SelectionResult((1, 2), 5)  # must start at 0
    with pytest.raises(ValueError):
        SelectionResult((0, 2, 2), 5)
    with pytest.raises(ValueError):
        SelectionResult((0, 5), 5)


def test_selection_round_trip(tmp_path):
    sel = SelectionResult((0, 3, 7), 10, threshold=0.4)
    save_selection(sel, tmp_path / "selection.json")
    back = load_selection(tmp_path / "selection.json", 10)
    assert back.key_indices == sel.key_indices
    assert back.threshold == pytest.approx(0.4)
    assert back.count == 3
