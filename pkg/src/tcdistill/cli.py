"""Command line interface: synth, ssim, select, train, eval, reproduce.

Exit codes: 0 on success, 1 when a reproduction check fails, 2 on usage or
validation errors. Commands validate their inputs fully before touching the
filesystem. Config files are JSON; every field can be overridden by a flag
of the same dotted name (e.g. --train.alpha 0.5).
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .imagery import (ColorImage, GrayImage, SynthSpec, VideoSequence,
                      generate_synthetic, load_sequence, save_sequence, to_gray)
from .imagery import _read_netpbm
from .keyframe import (SelectionResult, load_selection, save_selection,
                       select_keyframes, select_uniform)
from .metrics import METRIC_TEACHER, evaluate, save_report
from .models import (TeacherConfig, init_student, load_student,
                     make_teacher_builder, save_student)
from .ssim import SsimParams, compute_ssim
from .training import (KeyFrameStore, TrainConfig, run_training, save_history,
                       save_store, train_supervised)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

# Dotted config schema: group -> field -> (type, default).
CONFIG_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "ssim": {
        "window": (int, 11),
        "gaussian_sigma": (float, 1.5),
        "k1": (float, 0.01),
        "k2": (float, 0.03),
        "dynamic_range": (float, 255.0),
    },
    "teacher": {
        "patch_size": (int, 4),
        "tau": (float, 0.05),
    },
    "train": {
        "alpha": (float, 0.5),
        "tc_s": (float, 0.9),
        "learning_rate": (float, 0.5),
        "epochs_per_round": (int, 50),
        "max_rounds": (int, 10),
        "seed": (int, 0),
    },
    "corpus": {
        "num_blobs": (int, 5),
        "drift": (float, 1.5),
        "noise_std": (float, 3.0),
    },
}

# The reproduction corpus itself is fixed: 5 sequences, 64x64, 40 frames,
# 3 classes, seeds 1..5.
CORPUS_SEEDS = (1, 2, 3, 4, 5)
CORPUS_SIZE = 64
CORPUS_FRAMES = 40
CORPUS_CLASSES = 3
COUNT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
TRAIN_THRESHOLDS = (0.3, 0.4, 0.5, 0.6)

# Budget profile for reproduce runs; anything here is still overridable by
# flags or a config file. Training distills against the same exact-match
# teacher (patch 1, sharp tau) that the consistency metric uses, so the
# TC objective and the TC measurement agree.
REPRODUCE_PROFILE = {
    "train": {"epochs_per_round": 100, "max_rounds": 3, "learning_rate": 4.0},
    "teacher": {"patch_size": 1, "tau": 1e-5},
}

TC_MARGIN = 0.02
MIOU_MARGIN = 0.02


def _add_config_flags(parser: argparse.ArgumentParser, groups: tuple[str, ...]) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file mirroring the dotted schema")
    for group in groups:
        for field, (ftype, default) in CONFIG_SCHEMA[group].items():
            parser.add_argument(f"--{group}.{field}", dest=f"{group}.{field}",
                                type=ftype, default=None, metavar=field.upper(),
                                help=f"override {group}.{field} (default {default})")


def _resolve_config(args: argparse.Namespace, groups: tuple[str, ...],
                    profile: dict[str, dict] | None = None) -> dict[str, dict]:
    cfg = {g: {f: d for f, (_, d) in CONFIG_SCHEMA[g].items()} for g in groups}
    if profile:
        for g, fields in profile.items():
            if g in cfg:
                cfg[g].update(fields)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        data = json.loads(Path(config_path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        for g, fields in data.items():
            if g not in cfg:
                raise ValueError(f"{config_path}: unknown config group {g!r}")
            if not isinstance(fields, dict):
                raise ValueError(f"{config_path}: group {g!r} must be an object")
            for f, v in fields.items():
                if f not in cfg[g]:
                    raise ValueError(f"{config_path}: unknown config field {g}.{f}")
                cfg[g][f] = CONFIG_SCHEMA[g][f][0](v)
    for g in groups:
        for f in CONFIG_SCHEMA[g]:
            v = getattr(args, f"{g}.{f}", None)
            if v is not None:
                cfg[g][f] = v
    return cfg


def _ssim_params(cfg: dict) -> SsimParams:
    return SsimParams(**cfg["ssim"])


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def _teacher_config(cfg: dict) -> TeacherConfig:
    return TeacherConfig(**cfg["teacher"])


def _load_gray(path: Path) -> GrayImage:
    if not path.is_file():
        raise ValueError(f"{path}: no such file")
    if path.suffix.lower() == ".pgm":
        return GrayImage(_read_netpbm(path, b"P5").astype(np.float64))
    return to_gray(ColorImage(_read_netpbm(path, b"P6").astype(np.float64)))


def _json_dump(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(width=args.width, height=args.height, num_frames=args.frames,
                     classes=args.classes, num_blobs=args.blobs,
                     drift_px_per_frame=args.drift, noise_std=args.noise,
                     seed=args.seed)
    seq = generate_synthetic(spec)
    save_sequence(seq, args.out)
    print(f"wrote {seq.num_frames} frames ({seq.width}x{seq.height}, "
          f"{seq.classes} classes) to {args.out}")
    return EXIT_OK


def cmd_ssim(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, ("ssim",))
    a = _load_gray(args.image_a)
    b = _load_gray(args.image_b)
    value = compute_ssim(a, b, _ssim_params(cfg))
    print(f"{value:.6f}")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, ("ssim",))
    seq = load_sequence(args.root)
    if args.ssim_threshold is not None:
        result = select_keyframes(seq, args.ssim_threshold, _ssim_params(cfg))
    else:
        result = select_uniform(seq.num_frames, args.uniform)
    save_selection(result, args.out)
    print(f"selected {result.count} key frames -> {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, ("train", "teacher"))
    train_cfg = _train_config(cfg)
    teacher_cfg = _teacher_config(cfg)
    seq = load_sequence(args.root)
    selection = load_selection(args.selection, seq.num_frames)
    manual = {k: seq.masks[k] for k in selection.key_indices}
    store = KeyFrameStore(seq.num_frames, manual)
    params = init_student(seq.classes, train_cfg.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, history = run_training(seq, store, params,
                                   make_teacher_builder(teacher_cfg), train_cfg)
    save_student(params, out / "student.json")
    save_store(store, out / "store.json")
    save_history(history, out / "history.json")
    final = history[-1]["j_total"] if history else None
    print(f"trained {len(history)} rounds; keys {len(store.key_indices)}/"
          f"{seq.num_frames}; final loss {final}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    seq = load_sequence(args.root)
    params = load_student(args.student)
    report = evaluate(seq, params)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_report(report, out)
    if args.trace is not None:
        lines = ["frame_index,tc_value"]
        lines += [f"{t + 1},{v!r}" for t, v in enumerate(report.trace)]
        Path(args.trace).write_text("\n".join(lines) + "\n")
    tc = "n/a" if report.temporal_consistency is None else f"{report.temporal_consistency:.4f}"
    print(f"mIoU {report.miou:.4f}  TC {tc} -> {out}")
    return EXIT_OK


def _corpus_spec(seed: int, corpus_cfg: dict) -> SynthSpec:
    return SynthSpec(width=CORPUS_SIZE, height=CORPUS_SIZE, num_frames=CORPUS_FRAMES,
                     classes=CORPUS_CLASSES, num_blobs=corpus_cfg["num_blobs"],
                     drift_px_per_frame=corpus_cfg["drift"],
                     noise_std=corpus_cfg["noise_std"], seed=seed)


def _run_one_sequence(seed: int, corpus_dir: str, runs_dir: str,
                      cfg: dict[str, dict]) -> dict:
    """Selections, trainings and evaluations for one corpus sequence.

    Returns plain dicts so the reproduce driver can aggregate across worker
    processes.
    """
    ssim_params = _ssim_params(cfg)
    train_cfg = _train_config(cfg)
    teacher_cfg = _teacher_config(cfg)
    builder = make_teacher_builder(teacher_cfg)

    seq = generate_synthetic(_corpus_spec(seed, cfg["corpus"]))
    seq_root = Path(corpus_dir) / f"seq{seed}"
    save_sequence(seq, seq_root)
    out_root = Path(runs_dir) / f"seq{seed}"

    counts = {}
    selections = {}
    for s in COUNT_THRESHOLDS:
        sel = select_keyframes(seq, s, ssim_params)
        counts[f"{s:.1f}"] = sel.count
        selections[s] = sel

    def _save_run(tag: str, params, store, history, report) -> None:
        run_dir = out_root / tag
        run_dir.mkdir(parents=True, exist_ok=True)
        save_student(params, run_dir / "student.json")
        if store is not None:
            save_store(store, run_dir / "store.json")
        save_history(history, run_dir / "history.json")
        save_report(report, run_dir / "report.json")

    rows = []

    # Scenario 1 reference: supervised on every frame's label.
    params = init_student(seq.classes, train_cfg.seed)
    params, trace = train_supervised(seq, {i: seq.masks[i] for i in range(seq.num_frames)},
                                     params, train_cfg)
    report = evaluate(seq, params)
    _save_run("full", params, None,
              [{"round": 0, "j_kf": trace[-1], "j_tc": 0.0, "j_total": trace[-1],
                "epoch_loss": trace, "promotions": [], "keys_start": list(range(seq.num_frames)),
                "temporal_start": [], "num_keys_end": seq.num_frames, "num_temporal_end": 0}],
              report)
    rows.append({"scenario": "full", "threshold": None, "keyframes": seq.num_frames,
                 "miou": report.miou, "tc": report.temporal_consistency})

    for s in TRAIN_THRESHOLDS:
        sel = selections[s]
        manual = {k: seq.masks[k] for k in sel.key_indices}

        # Scenario 2: key frames only, no TC loss, no promotion.
        params = init_student(seq.classes, train_cfg.seed)
        params, trace = train_supervised(seq, manual, params, train_cfg)
        report = evaluate(seq, params)
        _save_run(f"kf_only_{s:.1f}", params, None,
                  [{"round": 0, "j_kf": trace[-1], "j_tc": 0.0, "j_total": trace[-1],
                    "epoch_loss": trace, "promotions": [], "keys_start": list(sel.key_indices),
                    "temporal_start": [], "num_keys_end": sel.count, "num_temporal_end": 0}],
                  report)
        rows.append({"scenario": "kf_only", "threshold": s, "keyframes": sel.count,
                     "miou": report.miou, "tc": report.temporal_consistency})

        # Scenario 4: SSIM selection + TC distillation.
        store = KeyFrameStore(seq.num_frames, manual)
        params = init_student(seq.classes, train_cfg.seed)
        params, history = run_training(seq, store, params, builder, train_cfg)
        report = evaluate(seq, params)
        _save_run(f"ssim_tc_{s:.1f}", params, store, history, report)
        rows.append({"scenario": "ssim_tc", "threshold": s, "keyframes": sel.count,
                     "miou": report.miou, "tc": report.temporal_consistency})

        # Scenario 3: uniform selection with the same annotation budget + TC.
        uni = select_uniform(seq.num_frames, sel.count)
        store = KeyFrameStore(seq.num_frames, {k: seq.masks[k] for k in uni.key_indices})
        params = init_student(seq.classes, train_cfg.seed)
        params, history = run_training(seq, store, params, builder, train_cfg)
        report = evaluate(seq, params)
        _save_run(f"uniform_tc_{s:.1f}", params, store, history, report)
        rows.append({"scenario": "uniform_tc", "threshold": s, "keyframes": uni.count,
                     "miou": report.miou, "tc": report.temporal_consistency})

    return {"seed": seed, "counts": counts, "rows": rows}


def cmd_reproduce(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, ("ssim", "teacher", "train", "corpus"),
                          profile=copy.deepcopy(REPRODUCE_PROFILE))
    # Validate the derived objects before any side effect.
    _ssim_params(cfg)
    _train_config(cfg)
    _teacher_config(cfg)
    for seed in CORPUS_SEEDS:
        _corpus_spec(seed, cfg["corpus"])

    out = Path(args.out)
    corpus_dir = Path(args.corpus) if args.corpus is not None else out / "corpus"
    runs_dir = out / "runs"
    out.mkdir(parents=True, exist_ok=True)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    runs_dir.mkdir(parents=True, exist_ok=True)

    workers = os.environ.get("TCDISTILL_THREADS")
    workers = int(workers) if workers else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(CORPUS_SEEDS)))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one_sequence, seed, str(corpus_dir),
                                   str(runs_dir), cfg) for seed in CORPUS_SEEDS]
            results = [f.result() for f in futures]
    else:
        results = [_run_one_sequence(seed, str(corpus_dir), str(runs_dir), cfg)
                   for seed in CORPUS_SEEDS]
    results.sort(key=lambda r: r["seed"])

    # Aggregate the per-sequence rows into corpus-averaged tables.
    table_rows = []
    for scenario in ("kf_only", "uniform_tc", "ssim_tc"):
        for s in TRAIN_THRESHOLDS:
            picked = []
            for res in results:
                picked += [r for r in res["rows"]
                           if r["scenario"] == scenario and r["threshold"] == s]
            table_rows.append({
                "scenario": scenario,
                "threshold": s,
                "keyframes_total": int(sum(r["keyframes"] for r in picked)),
                "miou": float(np.mean([r["miou"] for r in picked])),
                "tc": float(np.mean([r["tc"] for r in picked])),
            })
    full_rows = [r for res in results for r in res["rows"] if r["scenario"] == "full"]
    baseline = {
        "scenario": "full",
        "keyframes_total": int(sum(r["keyframes"] for r in full_rows)),
        "miou": float(np.mean([r["miou"] for r in full_rows])),
        "tc": float(np.mean([r["tc"] for r in full_rows])),
    }

    checks: dict[str, dict] = {"keyframe_count_monotone": {}, "tc_margin": {},
                               "miou_margin": {}}
    ok = True
    for res in results:
        counts = [res["counts"][f"{s:.1f}"] for s in COUNT_THRESHOLDS]
        monotone = all(b >= a for a, b in zip(counts, counts[1:]))
        checks["keyframe_count_monotone"][str(res["seed"])] = monotone
        ok = ok and monotone
    by_key = {(r["scenario"], r["threshold"]): r for r in table_rows}
    for s in TRAIN_THRESHOLDS:
        ref = by_key[("kf_only", s)]
        tc_row = by_key[("ssim_tc", s)]
        tc_pass = tc_row["tc"] >= ref["tc"] + TC_MARGIN
        miou_pass = tc_row["miou"] >= ref["miou"] - MIOU_MARGIN
        checks["tc_margin"][f"{s:.1f}"] = {"kf_only": ref["tc"], "ssim_tc": tc_row["tc"],
                                           "pass": tc_pass}
        checks["miou_margin"][f"{s:.1f}"] = {"kf_only": ref["miou"], "ssim_tc": tc_row["miou"],
                                             "pass": miou_pass}
        ok = ok and tc_pass and miou_pass

    report = {
        "corpus": {"width": CORPUS_SIZE, "height": CORPUS_SIZE, "frames": CORPUS_FRAMES,
                   "classes": CORPUS_CLASSES, "seeds": list(CORPUS_SEEDS),
                   **cfg["corpus"]},
        "config": {g: dict(v) for g, v in cfg.items()},
        "keyframe_counts": {str(res["seed"]): res["counts"] for res in results},
        "rows": table_rows,
        "baseline_full": baseline,
        "checks": checks,
        "pass": ok,
    }
    _json_dump(report, out / "report.json")

    for row in table_rows:
        print(f"{row['scenario']:>10} @ {row['threshold']:.1f}: "
              f"keyframes {row['keyframes_total']:4d}  mIoU {row['miou']:.4f}  "
              f"TC {row['tc']:.4f}")
    print(f"{'full':>10} @ ---: keyframes {baseline['keyframes_total']:4d}  "
          f"mIoU {baseline['miou']:.4f}  TC {baseline['tc']:.4f}")
    print(f"checks {'PASS' if ok else 'FAIL'} -> {out / 'report.json'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcdistill",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled sequence")
    p.add_argument("--out", type=Path, required=True, help="dataset root to write")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--drift", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ssim", help="print the SSIM of two images")
    p.add_argument("image_a", type=Path)
    p.add_argument("image_b", type=Path)
    _add_config_flags(p, ("ssim",))
    p.set_defaults(func=cmd_ssim)

    p = sub.add_parser("select", help="select key frames for a dataset")
    p.add_argument("--root", type=Path, required=True, help="dataset root")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ssim-threshold", type=float, default=None,
                       help="greedy SSIM threshold selection")
    group.add_argument("--uniform", type=int, default=None,
                       help="uniform selection of N frames")
    p.add_argument("--out", type=Path, default=Path("selection.json"))
    _add_config_flags(p, ("ssim",))
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="distill a student from a selection")
    p.add_argument("--root", type=Path, required=True, help="dataset root")
    p.add_argument("--selection", type=Path, required=True, help="selection.json")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    _add_config_flags(p, ("train", "teacher"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained student")
    p.add_argument("--root", type=Path, required=True, help="dataset root")
    p.add_argument("--student", type=Path, required=True, help="student.json")
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.add_argument("--trace", type=Path, default=None,
                   help="also write the per-pair consistency trace CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="run the full synthetic study")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--corpus", type=Path, default=None,
                   help="corpus directory (default <out>/corpus)")
    _add_config_flags(p, ("ssim", "teacher", "train", "corpus"))
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
