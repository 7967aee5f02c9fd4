"""Command-line entry point: ``bcg2ecg <command> ...``.

Commands: synth, preprocess, train, detect, evaluate, cv, report. Settings
come from an optional ``--config`` file (flat ``section.key = value``) and
are overridden by flags. Failures print a JSON error object on stderr and
exit with status 1; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._atomic import atomic_write
from .beats import find_rpeaks, format_beats_csv, lydon_baseline, read_beats_csv, rr_from_beats, segment_id
from .config import ExperimentConfig, build_config, read_config_file
from .evaluation import (
    COHORT_FOLD_COUNTS,
    make_segment_folds,
    make_subject_folds,
    run_cv,
    table1_csv,
    TABLE1_FIELDS,
)
from .hrv import agreement, segment_metrics
from .preprocess import ConfigError, normalize_unit, preprocess_recording
from .recording_io import load_recording, load_segments, save_recording, save_segments
from .synth import generate_subject, preset
from .training import train
from .transformer import load_checkpoint, predict, save_checkpoint

log = logging.getLogger("bcg2ecg")

# flag dest -> flat config key
FLAG_KEYS = {
    "target_rate": "preprocess.target_rate_hz",
    "band_low": "preprocess.band_low_hz",
    "band_high": "preprocess.band_high_hz",
    "filter_order": "preprocess.filter_order",
    "window": "preprocess.window_s",
    "step": "preprocess.step_s",
    "d_model": "model.d_model",
    "layers": "model.n_layers",
    "heads": "model.n_heads",
    "d_ff": "model.d_ff",
    "epochs": "train.epochs",
    "lr": "train.learning_rate",
    "batch": "train.batch_size",
    "dtype": "train.dtype",
    "qk_init": "train.qk_init",
    "min_distance": "peaks.min_distance_samples",
    "min_prominence": "peaks.min_prominence_frac",
    "envelope_window": "peaks.envelope_window_samples",
    "mode": "cv.mode",
    "seed": "seed",
}


def _preprocess_flags(p):
    g = p.add_argument_group("preprocessing")
    g.add_argument("--target-rate", type=float, help="target sample rate in Hz (default 100)")
    g.add_argument("--band-low", type=float, help="band-pass low cutoff in Hz (default 0.7)")
    g.add_argument("--band-high", type=float, help="band-pass high cutoff in Hz (default 10)")
    g.add_argument("--filter-order", type=int, help="Butterworth order (default 6)")
    g.add_argument("--window", type=float, help="window length in s (default 5)")
    g.add_argument("--step", type=float, help="window step in s (default 0.25)")


def _model_flags(p):
    g = p.add_argument_group("model and training")
    g.add_argument("--d-model", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-ff", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--dtype", choices=["float32", "float64"])
    g.add_argument("--qk-init", choices=["aligned", "glorot"], help="query/key initialization (default aligned)")


def _peak_flags(p):
    g = p.add_argument_group("beat detection")
    g.add_argument("--min-distance", type=int, help="refractory distance in samples (default 25)")
    g.add_argument("--min-prominence", type=float, help="prominence as a fraction of range (default 0.3)")
    g.add_argument("--envelope-window", type=int, help="baseline energy window in samples (default 30)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcg2ecg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value experiment config")
    common.add_argument("--threads", type=int, default=None,
                        help="parallel workers (default: $BCG2ECG_THREADS or 1)")
    common.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic recordings")
    p.add_argument("--preset", choices=["lab", "elder"], required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--rate", type=float, default=2000.0, help="recording sample rate in Hz")
    p.add_argument("--morphology-variation", type=float, default=0.0)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("preprocess", parents=[common], help="recordings -> segment store")
    p.add_argument("--input", type=Path, nargs="+", required=True)
    p.add_argument("--rate", type=float, help="recording sample rate in Hz (else from sidecar)")
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--subject-id")
    p.add_argument("--out", type=Path, required=True)
    _preprocess_flags(p)

    p = sub.add_parser("train", parents=[common], help="train on a segment store")
    p.add_argument("--segments", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    _model_flags(p)

    p = sub.add_parser("detect", parents=[common], help="detect beats per segment")
    p.add_argument("--segments", type=Path, required=True)
    p.add_argument("--source", choices=["pred", "gt", "bcg"], required=True)
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (required for --source pred)")
    p.add_argument("--out", type=Path, required=True)
    _peak_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="agreement of two beat files")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--rate", type=float, default=100.0, help="segment sample rate in Hz")
    p.add_argument("--out", type=Path, required=True, help="report JSON path")

    p = sub.add_parser("cv", parents=[common], help="5-fold cross-validation")
    p.add_argument("--segments", type=Path, required=True)
    p.add_argument("--mode", choices=["segment", "subject"])
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="dataset label for table1.csv (default: store file stem)")
    p.add_argument("--fold-counts", help="subjects per fold, e.g. 9,9,9,9,10, or 'cohort' for the original per-dataset counts")
    p.add_argument("--tags", type=Path, help="CSV subject_id,dataset for combined cohorts")
    p.add_argument("--out", type=Path, required=True, help="results directory")
    _model_flags(p)
    _peak_flags(p)

    p = sub.add_parser("report", parents=[common], help="merge table1.csv files")
    p.add_argument("--results", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, help="merged CSV path")
    return parser


def resolve_config(args) -> ExperimentConfig:
    flat = read_config_file(args.config) if getattr(args, "config", None) else {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flat[key] = value
    return build_config(flat)


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        n = int(os.environ.get("BCG2ECG_THREADS", "1"))
    if n < 1:
        raise ConfigError("threads", "must be >= 1")
    return n


def _write_text(path: Path, text: str) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, cfg: ExperimentConfig) -> dict:
    seed = cfg.stage_seed("synth")
    scfg = preset(
        args.preset, n_subjects=args.subjects, duration_s=args.duration, seed=seed,
        sample_rate_hz=args.rate, morphology_variation=args.morphology_variation,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    suffix = ".csv" if args.format == "csv" else ".bin"
    for i in range(scfg.n_subjects):
        rec, beats = generate_subject(scfg, i)
        save_recording(rec, args.out / f"{rec.subject_id}{suffix}", format=args.format)
        rows += [(rec.subject_id, k, f"{t:.6f}") for k, t in enumerate(beats)]
    _write_text(args.out / "ground_truth_beats.csv", _csv_text(["subject_id", "beat", "time_s"], rows))
    _write_json(args.out / "synth_config.json", scfg.to_dict())
    return {"subjects": scfg.n_subjects, "beats": len(rows), "out": str(args.out)}


def cmd_preprocess(args, cfg: ExperimentConfig) -> dict:
    if args.subject_id and len(args.input) > 1:
        raise ConfigError("subject-id", "only valid with a single input")
    segments = []
    for path in args.input:
        rec = load_recording(path, format=args.format, sample_rate_hz=args.rate,
                             subject_id=args.subject_id)
        segments += preprocess_recording(rec, cfg.preprocess)
    save_segments(segments, args.out)
    return {
        "segments": len(segments),
        "degenerate": sum(s.degenerate for s in segments),
        "out": str(args.out),
    }


def cmd_train(args, cfg: ExperimentConfig) -> dict:
    segments = [s for s in load_segments(args.segments) if not s.degenerate]
    tcfg = replace(cfg.train, seed=cfg.stage_seed("train"))
    params, history = train(segments, cfg.model, tcfg)
    save_checkpoint(params, args.out)
    loss_path = args.out.parent / "loss_history.csv"
    _write_text(loss_path, _csv_text(["epoch", "mean_loss"], [(i, repr(v)) for i, v in enumerate(history)]))
    return {"checkpoint": str(args.out), "loss_history": str(loss_path), "final_loss": history[-1]}


def cmd_detect(args, cfg: ExperimentConfig) -> dict:
    segments = load_segments(args.segments)
    if args.source == "pred":
        if args.checkpoint is None:
            raise ConfigError("checkpoint", "required for --source pred")
        params = load_checkpoint(args.checkpoint, dtype=np.dtype(cfg.train.dtype))
        preds = predict(np.stack([s.bcg for s in segments]), params)
        signals = [normalize_unit(p)[0] for p in preds]
        detect = find_rpeaks
    elif args.source == "gt":
        signals, detect = [s.ecg for s in segments], find_rpeaks
    else:
        signals, detect = [s.bcg for s in segments], lydon_baseline
    rows = [
        (segment_id(s.subject_id, s.segment_index), args.source, detect(x, cfg.peaks).beat_indices)
        for s, x in zip(segments, signals)
    ]
    _write_text(args.out, format_beats_csv(rows))
    return {"segments": len(rows), "out": str(args.out)}


def _metrics_from_beats(beats: dict, rate: float) -> dict:
    out = {}
    for key, idx in beats.items():
        rr, _ = rr_from_beats(idx, rate)
        out[key] = segment_metrics(rr) if rr else None
    return out


def cmd_evaluate(args, cfg: ExperimentConfig) -> dict:
    gt = _metrics_from_beats(read_beats_csv(args.gt), args.rate)
    pred = _metrics_from_beats(read_beats_csv(args.pred), args.rate)
    report = agreement(pred, gt)
    out_dir = args.out.parent
    ba_rows = []
    for name, m in report.metrics.items():
        if m.bland_altman is not None:
            ba_rows += [(name, f"{a:.9g}", f"{d:.9g}") for a, d in m.bland_altman.rows]
    hist = report.abs_error_histogram
    hist_rows = [
        (f"{lo:g}", f"{hi:g}" if hi is not None else "inf", c)
        for lo, hi, c in zip(hist.edges, hist.edges[1:] + [None], hist.counts)
    ]
    _write_text(out_dir / "bland_altman.csv", _csv_text(["metric", "mean", "diff"], ba_rows))
    _write_text(out_dir / "histogram.csv", _csv_text(["bin_low_bpm", "bin_high_bpm", "count"], hist_rows))
    payload = report.to_dict()
    payload["plots"] = {"bland_altman": "bland_altman.csv", "histogram": "histogram.csv"}
    _write_json(args.out, payload)
    return {"n_segments_included": report.n_segments_included, "hr_r": report.r("hr")}


def _fold_counts(value, dataset: str, tags: dict):
    if value is None:
        return None
    if value == "cohort":
        if len(set(tags.values())) > 1:
            return {t: COHORT_FOLD_COUNTS[t] for t in set(tags.values())}
        if dataset not in COHORT_FOLD_COUNTS:
            raise ConfigError("fold-counts", f"no cohort fold counts for dataset {dataset!r}")
        return COHORT_FOLD_COUNTS[dataset]
    try:
        return [int(c) for c in value.split(",")]
    except ValueError:
        raise ConfigError("fold-counts", f"expected comma-separated integers, got {value!r}") from None


def _read_tags(path) -> dict:
    if path is None:
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["subject_id"]: row["dataset"] for row in csv.DictReader(fh)}


def cmd_cv(args, cfg: ExperimentConfig) -> dict:
    threads = _threads(args)
    segments = load_segments(args.segments)
    dataset = args.dataset or args.segments.stem
    if cfg.cv_mode == "segment":
        plan = make_segment_folds(segments, cfg.stage_seed("folds"))
    else:
        tags = _read_tags(args.tags)
        plan = make_subject_folds(
            [s.subject_id for s in segments], tags,
            _fold_counts(args.fold_counts, dataset, tags), cfg.stage_seed("folds"),
        )
    tcfg = replace(cfg.train, seed=cfg.stage_seed("train"))
    result = run_cv(segments, plan, cfg.model, tcfg, cfg.peaks, dataset=dataset, threads=threads)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_text(args.out / "table1.csv", table1_csv(result.table1_rows()))
    for fold in result.folds:
        _write_json(args.out / f"fold_{fold.fold}.json", fold.to_dict())
    _write_json(args.out / "pooled.json", {
        "dataset": dataset,
        "mode": result.mode,
        "total_segments": result.total_segments,
        "fold_sizes": plan.sizes,
        "proposed": result.proposed.to_dict(),
        "baseline": result.baseline.to_dict(),
    })
    return {"table1": str(args.out / "table1.csv"), "hr_r": result.matrix()}


def cmd_report(args, cfg: ExperimentConfig) -> dict:
    rows = []
    for d in args.results:
        path = d / "table1.csv" if d.is_dir() else d
        with open(path, newline="", encoding="utf-8") as fh:
            rows += list(csv.DictReader(fh))
    text = _csv_text(TABLE1_FIELDS, [[r[k] for k in TABLE1_FIELDS] for r in rows])
    if args.out:
        _write_text(args.out, text)
    widths = [max(len(k), *(len(r[k]) for r in rows)) if rows else len(k) for k in TABLE1_FIELDS]
    lines = ["  ".join(k.ljust(w) for k, w in zip(TABLE1_FIELDS, widths))]
    lines += ["  ".join(r[k].ljust(w) for k, w in zip(TABLE1_FIELDS, widths)) for r in rows]
    print("\n".join(lines))
    return {"rows": len(rows)}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "cv": cmd_cv,
    "report": cmd_report,
}


def _error_payload(stage: str, exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
    return payload


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _threads(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(json.dumps(_error_payload("config", exc)), file=sys.stderr)
        return 1
    try:
        summary = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        log.debug("command failed", exc_info=True)
        print(json.dumps(_error_payload(args.command, exc)), file=sys.stderr)
        return 1
    if args.command != "report":
        print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
