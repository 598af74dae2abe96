"""Whole-package acceptance checks on the fixed synthetic corpus.

Each test appends one summary line to RESULTS; a conftest hook prints the
block at the end of the run. The corpus study reuses one module-scoped
sweep so the expensive trainings happen once.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from tcdistill.cli import (CONFIG_SCHEMA, CORPUS_CLASSES, CORPUS_FRAMES,
                           CORPUS_SEEDS, CORPUS_SIZE, COUNT_THRESHOLDS,
                           EXIT_CHECK_FAILED, EXIT_OK, MIOU_MARGIN,
                           REPRODUCE_PROFILE, TC_MARGIN, TRAIN_THRESHOLDS, main)
from tcdistill.imagery import (ClassMask, ColorImage, GrayImage, SoftMask,
                               SynthSpec, VideoSequence, generate_synthetic)
from tcdistill.keyframe import select_keyframes
from tcdistill.metrics import evaluate, miou
from tcdistill.models import (NUM_FEATURES, StudentParams, TeacherConfig,
                              extract_features, init_student,
                              make_teacher_builder, student_backward,
                              student_forward)
from tcdistill.ssim import SsimParams, compute_ssim
from tcdistill.training import (MANUAL, PSEUDO, KeyFrameStore, TrainConfig,
                                load_history, load_store, run_training,
                                save_history, save_store, train_supervised)

RESULTS: list[str] = []


def _record(tag: str, ok: bool, detail: str) -> str:
    line = f"[{tag}] {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    return line


def _corpus_field(group: str) -> dict:
    return {f: d for f, (_, d) in CONFIG_SCHEMA[group].items()}


@pytest.fixture(scope="module")
def corpus():
    cfg = _corpus_field("corpus")
    t0 = time.perf_counter()
    seqs = {}
    for seed in CORPUS_SEEDS:
        spec = SynthSpec(width=CORPUS_SIZE, height=CORPUS_SIZE,
                         num_frames=CORPUS_FRAMES, classes=CORPUS_CLASSES,
                         num_blobs=cfg["num_blobs"],
                         drift_px_per_frame=cfg["drift"],
                         noise_std=cfg["noise_std"], seed=seed)
        seqs[seed] = generate_synthetic(spec)
    return seqs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def selections(corpus):
    seqs, _ = corpus
    params = SsimParams()
    t0 = time.perf_counter()
    sels = {seed: {thr: select_keyframes(seq, thr, params)
                   for thr in COUNT_THRESHOLDS}
            for seed, seq in seqs.items()}
    return sels, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sweep(corpus, selections, tmp_path_factory):
    """Key-frame-only vs consistency-distilled students, per seed and threshold."""
    seqs, _ = corpus
    sels, _ = selections
    out = tmp_path_factory.mktemp("sweep")
    train_cfg = TrainConfig(**(_corpus_field("train") | REPRODUCE_PROFILE["train"]))
    teacher_cfg = TeacherConfig(**(_corpus_field("teacher") | REPRODUCE_PROFILE["teacher"]))
    builder = make_teacher_builder(teacher_cfg)

    rows = []
    t0 = time.perf_counter()
    for seed, seq in seqs.items():
        for thr in TRAIN_THRESHOLDS:
            sel = sels[seed][thr]
            manual = {k: seq.masks[k] for k in sel.key_indices}

            params = init_student(seq.classes, train_cfg.seed)
            params, _ = train_supervised(seq, manual, params, train_cfg)
            ref = evaluate(seq, params)

            store = KeyFrameStore(seq.num_frames, dict(manual))
            params = init_student(seq.classes, train_cfg.seed)
            params, history = run_training(seq, store, params, builder, train_cfg)
            rep = evaluate(seq, params)

            run_dir = out / f"seq{seed}_thr{thr:.1f}"
            run_dir.mkdir()
            save_store(store, run_dir / "store.json")
            save_history(history, run_dir / "history.json")
            rows.append({"seed": seed, "threshold": thr, "dir": run_dir,
                         "manual_keys": sel.key_indices,
                         "kf_miou": ref.miou, "kf_tc": ref.temporal_consistency,
                         "tc_miou": rep.miou, "tc_tc": rep.temporal_consistency})
    return {"rows": rows, "tc_s": train_cfg.tc_s,
            "elapsed": time.perf_counter() - t0}


def test_ssim_matches_direct_formula_oracle():
    params = SsimParams()
    half = params.window // 2
    coords = np.arange(params.window, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * params.gaussian_sigma ** 2))
    kernel = np.outer(g, g)
    kernel /= kernel.sum()
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2

    def oracle(a: np.ndarray, b: np.ndarray) -> float:
        vals = []
        for i in range(a.shape[0] - params.window + 1):
            for j in range(a.shape[1] - params.window + 1):
                pa = a[i:i + params.window, j:j + params.window]
                pb = b[i:i + params.window, j:j + params.window]
                mu_a = (kernel * pa).sum()
                mu_b = (kernel * pb).sum()
                var_a = (kernel * (pa - mu_a) ** 2).sum()
                var_b = (kernel * (pb - mu_b) ** 2).sum()
                cov = (kernel * (pa - mu_a) * (pb - mu_b)).sum()
                vals.append((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                            / ((mu_a ** 2 + mu_b ** 2 + c1)
                               * (var_a + var_b + c2)))
        return float(np.mean(vals))

    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        a = rng.uniform(0.0, 255.0, size=(32, 32))
        b = np.clip(a + rng.normal(0.0, rng.uniform(1.0, 60.0), size=a.shape),
                    0.0, 255.0)
        got = compute_ssim(GrayImage(a), GrayImage(b), params)
        worst = max(worst, abs(got - oracle(a, b)))
    worst_id = max(abs(compute_ssim(GrayImage(x), GrayImage(x), params) - 1.0)
                   for x in (rng.uniform(0.0, 255.0, size=(32, 32)),
                             np.full((16, 16), 90.0)))
    elapsed = time.perf_counter() - t0

    ok = worst <= 1e-6 and worst_id <= 1e-9 and elapsed < 5.0
    line = _record("ssim-oracle", ok,
                   f"max |diff| {worst:.2e} over 50 pairs, identity off by "
                   f"{worst_id:.1e}, {elapsed:.1f}s")
    assert ok, line


def test_miou_matches_counting_oracle():
    def oracle(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
        ious = []
        for c in range(classes):
            inter = union = 0
            for i in range(pred.shape[0]):
                for j in range(pred.shape[1]):
                    p = pred[i, j] == c
                    t = truth[i, j] == c
                    inter += int(p and t)
                    union += int(p or t)
            if union:
                ious.append(inter / union)
        return sum(ious) / len(ious)

    rng = np.random.default_rng(23)
    t0 = time.perf_counter()
    exact = 0
    for _ in range(100):
        pred = rng.integers(0, 3, size=(8, 8))
        truth = rng.integers(0, 3, size=(8, 8))
        got = miou(ClassMask(pred, 3), ClassMask(truth, 3)).mean
        exact += int(got == oracle(pred, truth, 3))
    elapsed = time.perf_counter() - t0

    ok = exact == 100 and elapsed < 1.0
    line = _record("miou-oracle", ok,
                   f"{exact}/100 pairs agree exactly, {elapsed:.2f}s")
    assert ok, line


def test_gradient_matches_central_differences():
    def loss(p: StudentParams, feats, target: SoftMask, weight: float) -> float:
        diff = student_forward(p, feats).data - target.data
        return weight * float((diff * diff).sum(axis=2).mean())

    rng = np.random.default_rng(31)
    eps = 1e-5
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        p = StudentParams(rng.normal(0.0, 0.5, size=(3, NUM_FEATURES)),
                          rng.normal(0.0, 0.5, size=3))
        feats = extract_features(ColorImage(rng.uniform(0.0, 255.0, size=(h, w, 3))))
        t = rng.uniform(0.1, 1.0, size=(h, w, 3))
        target = SoftMask(t / t.sum(axis=2, keepdims=True))
        weight = float(rng.uniform(0.2, 2.0))
        g = student_backward(p, feats, target, weight)

        num_w = np.zeros_like(g.weights)
        for c in range(3):
            for f in range(NUM_FEATURES):
                wp, wm = p.weights.copy(), p.weights.copy()
                wp[c, f] += eps
                wm[c, f] -= eps
                num_w[c, f] = (loss(StudentParams(wp, p.bias), feats, target, weight)
                               - loss(StudentParams(wm, p.bias), feats, target, weight)) / (2 * eps)
        num_b = np.zeros_like(g.bias)
        for c in range(3):
            bp, bm = p.bias.copy(), p.bias.copy()
            bp[c] += eps
            bm[c] -= eps
            num_b[c] = (loss(StudentParams(p.weights, bp), feats, target, weight)
                        - loss(StudentParams(p.weights, bm), feats, target, weight)) / (2 * eps)
        scale = max(np.abs(num_w).max(), np.abs(num_b).max(), 1e-8)
        rel = max(np.abs(g.weights - num_w).max(), np.abs(g.bias - num_b).max()) / scale
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0

    ok = worst <= 1e-4 and elapsed < 10.0
    line = _record("gradient-check", ok,
                   f"max relative error {worst:.2e} over 20 instances, {elapsed:.1f}s")
    assert ok, line


def test_selection_traces():
    def solid(levels):
        frames = tuple(ColorImage(np.full((16, 16, 3), float(v))) for v in levels)
        masks = tuple(ClassMask(np.zeros((16, 16), dtype=np.int64), 2) for _ in levels)
        return VideoSequence(frames, masks, 2)

    single = select_keyframes(solid([128]), 0.5).key_indices
    identical = select_keyframes(solid([128] * 6), 0.5).key_indices
    alternating = select_keyframes(solid([0, 255, 0, 255]), 0.5).key_indices

    ok = (single == (0,) and identical == (0,)
          and alternating == (0, 1, 2, 3))
    line = _record("selection-traces", ok,
                   f"single {single}, identical {identical}, "
                   f"alternating {alternating}")
    assert ok, line


def test_keyframe_counts_monotone_in_threshold(corpus, selections):
    _, gen_elapsed = corpus
    sels, sel_elapsed = selections
    elapsed = gen_elapsed + sel_elapsed

    per_seed = {}
    monotone = True
    for seed in CORPUS_SEEDS:
        counts = [sels[seed][thr].count for thr in COUNT_THRESHOLDS]
        per_seed[seed] = counts
        monotone = monotone and all(b >= a for a, b in zip(counts, counts[1:]))

    ok = monotone and elapsed < 60.0
    detail = " ".join(f"seed{s}:{'/'.join(map(str, c))}" for s, c in per_seed.items())
    line = _record("count-monotone", ok, f"{detail}, {elapsed:.1f}s")
    assert ok, line


def test_training_artifacts_respect_update_rules(corpus, sweep):
    seqs, _ = corpus
    problems = []
    for row in sweep["rows"]:
        where = f"seq{row['seed']}@{row['threshold']:.1f}"
        seq = seqs[row["seed"]]
        store = load_store(row["dir"] / "store.json")
        store.check_invariants()
        history = load_history(row["dir"] / "history.json")
        keys = set(store.key_indices)
        temporal = set(store.temporal_indices)

        for k in keys:
            if k + 1 < seq.num_frames and k + 1 not in keys | temporal:
                problems.append(f"{where}: successor {k + 1} of key {k} tracked nowhere")
        for k in row["manual_keys"]:
            if store.provenance(k) != MANUAL:
                problems.append(f"{where}: manual frame {k} re-tagged {store.provenance(k)}")
            elif not np.array_equal(store.label(k).data, seq.masks[k].data):
                problems.append(f"{where}: manual label {k} modified")
        for entry in store.promotion_log:
            if not entry["gate"] > sweep["tc_s"]:
                problems.append(f"{where}: promotion {entry} at or below the gate")

        prev_keys = prev_promoted = None
        for stats in history:
            ks = set(stats["keys_start"])
            ts = set(stats["temporal_start"])
            if prev_keys is not None and ks != prev_keys | prev_promoted:
                problems.append(f"{where}: round {stats['round']} does not replay")
            if ts != {k + 1 for k in ks if k + 1 < seq.num_frames} - ks:
                problems.append(f"{where}: round {stats['round']} temporal set wrong")
            for t in ts:
                # The propagation source for frame t is the key set it was
                # derived from, all strictly earlier than t.
                if t - 1 not in ks or t in ks:
                    problems.append(f"{where}: temporal frame {t} not anchored before it")
            for p in stats["promotions"]:
                if p["frame"] not in ts or not p["gate"] > sweep["tc_s"]:
                    problems.append(f"{where}: bad promotion {p}")
            prev_keys = ks
            prev_promoted = {p["frame"] for p in stats["promotions"]}
        if prev_keys is not None and keys != prev_keys | prev_promoted:
            problems.append(f"{where}: final key set does not match history")

    ok = not problems and len(sweep["rows"]) == len(CORPUS_SEEDS) * len(TRAIN_THRESHOLDS)
    line = _record("update-rules", ok,
                   f"{len(sweep['rows'])} runs replayed clean" if ok
                   else "; ".join(problems[:4]))
    assert ok, line


def test_consistency_training_beats_keyframe_only(sweep):
    details = []
    shortfalls = []
    for thr in TRAIN_THRESHOLDS:
        rows = [r for r in sweep["rows"] if r["threshold"] == thr]
        d_tc = (float(np.mean([r["tc_tc"] for r in rows]))
                - float(np.mean([r["kf_tc"] for r in rows])))
        d_miou = (float(np.mean([r["tc_miou"] for r in rows]))
                  - float(np.mean([r["kf_miou"] for r in rows])))
        details.append(f"thr {thr:.1f}: dTC {d_tc:+.4f} dmIoU {d_miou:+.4f}")
        if not (d_tc >= TC_MARGIN and d_miou >= -MIOU_MARGIN):
            shortfalls.append(thr)

    elapsed = sweep["elapsed"]
    ok = not shortfalls and elapsed < 600.0
    line = _record("direction-of-effect", ok,
                   "; ".join(details) + f"; wall {elapsed:.0f}s"
                   + ("" if not shortfalls else
                      f"; margin missed at {[f'{t:.1f}' for t in shortfalls]}"))
    assert ok, line


def test_static_sequence_promotes_every_frame():
    spec = SynthSpec(width=24, height=24, num_frames=6, classes=2, num_blobs=2,
                     drift_px_per_frame=0.0, noise_std=0.0, seed=3)
    seq = generate_synthetic(spec)
    store = KeyFrameStore(seq.num_frames, {0: seq.masks[0]})
    cfg = TrainConfig(alpha=0.5, tc_s=0.9, learning_rate=4.0,
                      epochs_per_round=200, max_rounds=8, seed=0)
    builder = make_teacher_builder(TeacherConfig(patch_size=1, tau=1e-5))
    params, _ = run_training(seq, store, init_student(seq.classes, 0), builder, cfg)
    report = evaluate(seq, params)

    promoted_all = store.key_indices == tuple(range(seq.num_frames))
    tagged = all(store.provenance(t) == PSEUDO for t in range(1, seq.num_frames))
    tc_off = abs(report.temporal_consistency - 1.0)

    ok = promoted_all and tagged and store.temporal_indices == () and tc_off <= 1e-6
    line = _record("static-loop", ok,
                   f"keys {store.key_indices}, consistency off by {tc_off:.1e}")
    assert ok, line


def test_reproduce_twice_is_byte_identical(tmp_path):
    flags = ["--train.epochs_per_round", "2", "--train.max_rounds", "1"]
    t0 = time.perf_counter()
    rc_a = main(["reproduce", "--out", str(tmp_path / "a"), *flags])
    rc_b = main(["reproduce", "--out", str(tmp_path / "b"), *flags])
    elapsed = time.perf_counter() - t0

    names = ("report.json", "history.json")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                     if p.name in names)
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*")
                     if p.name in names)
    same_layout = files_a == files_b and len(files_a) > 0
    differing = [str(rel) for rel in files_a
                 if (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()]

    ok = (rc_a == rc_b and rc_a in (EXIT_OK, EXIT_CHECK_FAILED)
          and same_layout and not differing)
    line = _record("determinism", ok,
                   f"{len(files_a)} report/history files byte-identical across "
                   f"two runs (rc {rc_a}), {elapsed:.0f}s"
                   if ok else f"layout match {same_layout}, differing {differing[:3]}, "
                              f"rc {rc_a}/{rc_b}")
    assert ok, line
