"""Command-line entry point: ``noduledet <command> [options]``.

Every command writes its results plus the fully resolved ``config.txt`` into
its ``--out`` directory.  Progress goes to standard error.  Exit status is 0
on success, 1 for invalid input or usage, 2 when a stage fails at run time.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import detector, fpr, froc, records
from .errors import FormatError, NoduleDetError, PhantomPackingError, ShapeError, TrainingDivergedError, UnknownScanError
from .phantom import generate_dataset
from .volume import list_scans, load_mhd, save_mhd

log = logging.getLogger("noduledet")

THREADS_ENV = "NODULE_PIPELINE_THREADS"
CONFIG_NAME = "config.txt"
DETECTOR_CKPT = "detector.ckpt"
FPR_CKPT = "fpr3d.ckpt"
CANDIDATES_NAME = "candidates.csv"
ANNOTATIONS_NAME = "annotations.csv"
SCANS_NAME = "seriesuids.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- helpers ------------------------------------------------------------------


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            value = int(raw)
        except ValueError:
            raise cfgmod.ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise cfgmod.ConfigError(f"thread count must be at least 1, got {value}")
    return value


def _read_config(args, base_dir: str | None = None) -> cfgmod.RunConfig:
    values = {}
    if base_dir is not None:
        path = os.path.join(base_dir, CONFIG_NAME)
        if os.path.exists(path):
            with open(path) as fh:
                values.update(cfgmod.parse_document(fh.read(), path))
    if args.config:
        with open(args.config) as fh:
            values.update(cfgmod.parse_document(fh.read(), args.config))
    values.update(cfgmod.parse_overrides(args.set or ()))
    return cfgmod.resolve(values, seed=args.seed, preset=args.preset)


def _prepare_out(out: str, run: cfgmod.RunConfig) -> None:
    os.makedirs(out, exist_ok=True)
    records.save_text(os.path.join(out, CONFIG_NAME), run.to_text())
    log.info("resolved config written to %s (seed %d)", os.path.join(out, CONFIG_NAME), run.seed)


def _load_scans(data_dir: str):
    paths = list_scans(data_dir)
    if not paths:
        raise FileNotFoundError(f"no .mhd volumes in {data_dir}")
    return [load_mhd(p) for p in paths]


def _annotations_path(args) -> str:
    return args.annotations or os.path.join(args.data, ANNOTATIONS_NAME)


def _group(items, volumes):
    by_uid = {v.uid: [] for v in volumes}
    stray = sorted({i.uid for i in items if i.uid not in by_uid})
    if stray:
        raise UnknownScanError(f"records reference scans not in the data directory: {', '.join(stray)}")
    for item in items:
        by_uid[item.uid].append(item)
    return [by_uid[v.uid] for v in volumes]


def read_scan_list(path: str) -> list[str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["seriesuid"]:
        raise FormatError(f"{path}: expected header 'seriesuid'")
    return [r[0] for r in rows[1:] if r]


def write_scan_list(uids: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seriesuid"])
    for uid in uids:
        w.writerow([uid])
    return buf.getvalue()


def _scan_ids(args, annotations) -> list[str] | None:
    if getattr(args, "scans", None):
        return read_scan_list(args.scans)
    if getattr(args, "data", None):
        return [os.path.splitext(os.path.basename(p))[0] for p in list_scans(args.data)]
    return None


def _write_candidates(out: str, cands) -> str:
    path = os.path.join(out, CANDIDATES_NAME)
    records.save_text(path, records.write_candidates(cands))
    return path


def _curve(cands, annotations, scan_ids):
    return froc.froc_curve(froc.match_candidates(cands, annotations, scan_ids))


# -- stages -------------------------------------------------------------------


def run_detector_training(volumes, annotations, run: cfgmod.RunConfig, out: str) -> detector.DetectorModel:
    rng = np.random.default_rng(run.seed)
    model = detector.build_detector(run.detector, rng)
    trace = detector.train_detector(model, list(zip(volumes, _group(annotations, volumes))), rng)
    detector.save_detector(model, os.path.join(out, DETECTOR_CKPT))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, loss in enumerate(trace, 1):
        w.writerow([i, repr(float(loss))])
    records.save_text(os.path.join(out, "loss.csv"), buf.getvalue())
    return model


def run_detection(model, volumes, threads: int) -> list[records.Candidate]:
    cands = []
    for i, v in enumerate(volumes, 1):
        found = detector.detect_candidates(model, v, threads=threads)
        log.info("detect %s: %d candidates (%d/%d)", v.uid, len(found), i, len(volumes))
        cands += found
    return cands


def run_fpr_training(volumes, annotations, cands, run: cfgmod.RunConfig, out: str) -> fpr.Fpr3dModel:
    rng = np.random.default_rng(run.seed)
    model = fpr.build_fpr(run.fpr3d, rng)
    scans = list(zip(volumes, _group(annotations, volumes)))
    model, history = fpr.fit_fpr(model, scans, _group(cands, volumes), rng)
    fpr.save_fpr(model, os.path.join(out, FPR_CKPT))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_accuracy"])
    for i, (loss, acc) in enumerate(zip(history.train_loss, history.val_accuracy), 1):
        w.writerow([i, repr(float(loss)), repr(float(acc))])
    records.save_text(os.path.join(out, "history.csv"), buf.getvalue())
    return model


def run_reduction(model, volumes, cands) -> list[records.Candidate]:
    out = []
    for v, group in zip(volumes, _group(cands, volumes)):
        if group:
            out += fpr.reduce_candidates(model, v, group)
    return out


# -- commands -------------------------------------------------------------------


def cmd_phantom_gen(args) -> None:
    run = _read_config(args)
    if args.scans < 1:
        raise cfgmod.ConfigError("--scans must be at least 1")
    _prepare_out(args.out, run)
    scans = generate_dataset(run.seed, args.scans, run.phantom)
    annotations = []
    for volume, anns in scans:
        save_mhd(volume, args.out)
        annotations += anns
        log.info("phantom %s: %d nodules", volume.uid, len(anns))
    records.save_text(os.path.join(args.out, ANNOTATIONS_NAME), records.write_annotations(annotations))
    records.save_text(os.path.join(args.out, SCANS_NAME), write_scan_list([v.uid for v, _ in scans]))


def cmd_train_detector(args) -> None:
    run = _read_config(args)
    volumes = _load_scans(args.data)
    annotations = records.load_annotations(_annotations_path(args))
    _prepare_out(args.out, run)
    run_detector_training(volumes, annotations, run, args.out)


def cmd_detect(args) -> None:
    run = _read_config(args, args.model)
    volumes = _load_scans(args.data)
    model = detector.load_detector(run.detector, os.path.join(args.model, DETECTOR_CKPT))
    _prepare_out(args.out, run)
    _write_candidates(args.out, run_detection(model, volumes, resolve_threads(args.threads)))


def cmd_train_fpr(args) -> None:
    run = _read_config(args)
    volumes = _load_scans(args.data)
    annotations = records.load_annotations(_annotations_path(args))
    cands = records.load_candidates(args.candidates)
    _prepare_out(args.out, run)
    run_fpr_training(volumes, annotations, cands, run, args.out)


def cmd_reduce(args) -> None:
    run = _read_config(args, args.model)
    volumes = _load_scans(args.data)
    model = fpr.load_fpr(run.fpr3d, os.path.join(args.model, FPR_CKPT))
    cands = records.load_candidates(args.candidates)
    _prepare_out(args.out, run)
    _write_candidates(args.out, run_reduction(model, volumes, cands))


def cmd_froc(args) -> None:
    run = _read_config(args)
    annotations = records.load_annotations(args.annotations)
    cands = records.load_candidates(args.candidates)
    curve = _curve(cands, annotations, _scan_ids(args, annotations))
    _prepare_out(args.out, run)
    froc.emit_report([(args.name, curve)], args.out)
    log.info("%s: average FROC %.4f", args.name, froc.average_froc_score(curve))


def cmd_report(args) -> None:
    run = _read_config(args)
    annotations = records.load_annotations(args.annotations)
    scan_ids = _scan_ids(args, annotations)
    systems = []
    for item in args.system:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise cfgmod.ConfigError(f"--system expects NAME=CANDIDATES.csv, got {item!r}")
        systems.append((name, _curve(records.load_candidates(path), annotations, scan_ids)))
    _prepare_out(args.out, run)
    froc.emit_report(systems, args.out)


def cmd_pipeline(args) -> None:
    base = args.detector if args.detector else None
    run = _read_config(args, base)
    threads = resolve_threads(args.threads)
    volumes = _load_scans(args.data)
    annotations = records.load_annotations(_annotations_path(args))
    if (args.detector is None or args.fpr is None) and args.train_data is None:
        raise cfgmod.ConfigError("pipeline needs --detector and --fpr checkpoints, or --train-data to train them")
    _prepare_out(args.out, run)
    train = None
    if args.train_data is not None:
        train_volumes = _load_scans(args.train_data)
        train_annotations = records.load_annotations(os.path.join(args.train_data, ANNOTATIONS_NAME))
        train = (train_volumes, train_annotations)

    if args.detector:
        det = detector.load_detector(run.detector, os.path.join(args.detector, DETECTOR_CKPT))
    else:
        det_dir = os.path.join(args.out, "detector")
        _prepare_out(det_dir, run)
        det = run_detector_training(*train, run, det_dir)

    if args.fpr:
        reducer = fpr.load_fpr(run.fpr3d, os.path.join(args.fpr, FPR_CKPT))
    else:
        fpr_dir = os.path.join(args.out, "fpr3d")
        _prepare_out(fpr_dir, run)
        train_cands = run_detection(det, train[0], threads)
        reducer = run_fpr_training(*train, train_cands, run, fpr_dir)

    stage1 = run_detection(det, volumes, threads)
    _write_candidates(_subdir(args.out, "stage1"), stage1)
    stage2 = run_reduction(reducer, volumes, stage1)
    _write_candidates(_subdir(args.out, "stage2"), stage2)
    scan_ids = [v.uid for v in volumes]
    curves = [("stage1", _curve(stage1, annotations, scan_ids)), ("stage2", _curve(stage2, annotations, scan_ids))]
    froc.emit_report(curves, args.out)
    for name, curve in curves:
        log.info("%s: average FROC %.4f", name, froc.average_froc_score(curve))


def _subdir(out: str, name: str) -> str:
    path = os.path.join(out, name)
    os.makedirs(path, exist_ok=True)
    return path


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--preset", choices=cfgmod.PRESETS, help="model scale (default desk)")
    common.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV}, then 1)")
    common.add_argument("--out", required=True, help="output directory")

    parser = _Parser(prog="noduledet", description="Two-stage lung nodule detection on CT volumes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom-gen", parents=[common], help="write synthetic phantom scans")
    p.add_argument("--scans", type=int, required=True)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train-detector", parents=[common], help="train the slice detector")
    p.add_argument("--data", required=True, help="directory of .mhd/.raw volumes")
    p.add_argument("--annotations", help=f"annotation CSV (default DATA/{ANNOTATIONS_NAME})")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", parents=[common], help="stage 1: candidate detection")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="train-detector output directory")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train-fpr", parents=[common], help="train the 3D false-positive reducer")
    p.add_argument("--data", required=True)
    p.add_argument("--candidates", required=True, help="stage-1 candidates on the training scans")
    p.add_argument("--annotations")
    p.set_defaults(func=cmd_train_fpr)

    p = sub.add_parser("reduce", parents=[common], help="stage 2: rescore candidates")
    p.add_argument("--data", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--model", required=True, help="train-fpr output directory")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("froc", parents=[common], help="FROC evaluation of one candidate file")
    p.add_argument("--candidates", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--scans", help=f"scan list CSV ({SCANS_NAME}); default: scans named by the annotations")
    p.add_argument("--data", help="take the scan list from a volume directory")
    p.add_argument("--name", default="system")
    p.set_defaults(func=cmd_froc)

    p = sub.add_parser("report", parents=[common], help="FROC report over several candidate files")
    p.add_argument("--system", action="append", required=True, metavar="NAME=CSV")
    p.add_argument("--annotations", required=True)
    p.add_argument("--scans")
    p.add_argument("--data")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", parents=[common], help="detect, reduce and evaluate (training first if asked)")
    p.add_argument("--data", required=True, help="evaluation volumes")
    p.add_argument("--annotations")
    p.add_argument("--detector", help="train-detector output directory")
    p.add_argument("--fpr", help="train-fpr output directory")
    p.add_argument("--train-data", help="phantom-gen style directory used to train missing models")
    p.set_defaults(func=cmd_pipeline)
    return parser


_VALIDATION_ERRORS = (cfgmod.ConfigError, FormatError, ShapeError, UnknownScanError, FileNotFoundError, ValueError)
_RUNTIME_ERRORS = (TrainingDivergedError, PhantomPackingError, NoduleDetError, OSError, RuntimeError, FloatingPointError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        args.func(args)
    except (TrainingDivergedError, PhantomPackingError) as exc:
        log.error("%s", exc)
        return 2
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return 1
    except _RUNTIME_ERRORS as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
