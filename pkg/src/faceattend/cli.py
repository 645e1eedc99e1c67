"""Command-line front end: train-cascade, detect, enroll, attend, eval, report.

Settings come from built-in defaults, then a TOML config file (``--config``
or the ``FACEATTEND_CONFIG`` environment variable), then command-line flags.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
import time
from collections import Counter
from datetime import datetime
from pathlib import Path

import numpy as np

from .attendance import AttendanceLog, export_csv
from .boosting import Cascade, train_cascade
from .detector import DetectParams, detect, extract_chip
from .errors import ConfigurationError, FaceAttendError, ImageFormatError
from .haar import enumerate_features
from .imagecore import flatten, load_gray, save_gray
from .recognizer import IMAGE_SUFFIXES, Roster, build_gallery, class_centroids, nearest, recognize, train
from .subspace import SubspaceModel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("faceattend")

CONFIG_ENV = "FACEATTEND_CONFIG"
USAGE, FAILURE = 2, 1

DEFAULTS = {
    "seed": 0,
    "paths": {
        "cascade": "cascade.json",
        "model": "model.json",
        "TRAININGDATABASE": "TRAININGDATABASE",
        "TESTDATABASE": "TESTDATABASE",
        "roster": "roster.csv",
        "log": "attendance.ndjson",
        "chips": "chips",
        "review": "review",
    },
    "detector": {"scale_step": 1.25, "stride_factor": 0.05, "nms_iou": 0.3},
    "trainer": {"detection_rate": 0.99, "fp_rate": 0.5, "overall_fp": 1e-3, "max_weak": 200,
                "max_stages": 50, "max_features": None, "stage_negatives": None},
    "recognizer": {"tau": None, "centroid": False, "mode": "lda", "cooldown_s": 60.0, "pairing": True},
}

# flag dest -> (section, key)
FLAG_KEYS = {
    "cascade": ("paths", "cascade"), "model": ("paths", "model"), "train_dir": ("paths", "TRAININGDATABASE"),
    "test_dir": ("paths", "TESTDATABASE"), "roster": ("paths", "roster"), "log": ("paths", "log"),
    "chips": ("paths", "chips"), "review": ("paths", "review"),
    "scale_step": ("detector", "scale_step"), "stride_factor": ("detector", "stride_factor"),
    "nms_iou": ("detector", "nms_iou"),
    "detection_rate": ("trainer", "detection_rate"), "fp_rate": ("trainer", "fp_rate"),
    "overall_fp": ("trainer", "overall_fp"), "max_weak": ("trainer", "max_weak"),
    "max_stages": ("trainer", "max_stages"), "max_features": ("trainer", "max_features"),
    "stage_negatives": ("trainer", "stage_negatives"),
    "tau": ("recognizer", "tau"), "centroid": ("recognizer", "centroid"), "mode": ("recognizer", "mode"),
    "cooldown_s": ("recognizer", "cooldown_s"),
    "seed": (None, "seed"),
}


class UsageError(Exception):
    pass


def load_config(path=None, env=os.environ) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    path = path or env.get(CONFIG_ENV)
    if not path:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{p}: {exc}") from None
    for key, val in doc.items():
        if isinstance(val, dict):
            if key not in cfg:
                raise UsageError(f"{p}: unknown section [{key}]")
            unknown = set(val) - set(cfg[key])
            if unknown:
                raise UsageError(f"{p}: unknown keys {sorted(unknown)} in [{key}]")
            cfg[key].update(val)
        elif key in cfg and not isinstance(cfg[key], dict):
            cfg[key] = val
        else:
            raise UsageError(f"{p}: unknown key {key!r}")
    return cfg


def merge_flags(cfg: dict, args: argparse.Namespace) -> dict:
    for dest, (section, key) in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        if section is None:
            cfg[key] = val
        else:
            cfg[section][key] = val
    return cfg


class Table:
    """Rows printed as `` | ``-separated text and optionally saved as CSV."""

    def __init__(self, header):
        self.header = list(header)
        self.rows = []

    def add(self, *row):
        self.rows.append(list(row))

    @staticmethod
    def _fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    def print(self, out=None):
        print(" | ".join(self.header), file=out)
        for r in self.rows:
            print(" | ".join(self._fmt(v) for v in r), file=out)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)


def _emit(table: Table, args):
    table.print()
    if getattr(args, "csv", None):
        table.write_csv(args.csv)


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _natural_key(p: Path):
    return (0, int(p.stem), p.name) if p.stem.isdigit() else (1, 0, p.name)


def _images(path) -> list:
    p = Path(path)
    if p.is_file():
        return [p]
    return sorted((q for q in p.iterdir() if q.is_file() and q.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key)


def _next_number(directory: Path) -> int:
    nums = [int(p.stem) for p in directory.iterdir() if p.is_file() and p.stem.isdigit()] if directory.exists() else []
    return max(nums, default=0) + 1


def _detect_params(cfg) -> DetectParams:
    try:
        return DetectParams(**cfg["detector"])
    except (TypeError, ConfigurationError) as exc:
        raise UsageError(f"detector settings: {exc}") from None


def _windows(directory) -> np.ndarray:
    d = _require(directory, "sample directory")
    files = _images(d)
    if not files:
        raise UsageError(f"no sample images in {d}")
    arrs = [load_gray(f).data for f in files]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1 or next(iter(shapes))[0] != next(iter(shapes))[1]:
        raise UsageError(f"samples in {d} must all be the same square size")
    return np.stack(arrs)


# -- commands ---------------------------------------------------------------------------

def cmd_train_cascade(args, cfg) -> int:
    pos, neg = _windows(args.pos), _windows(args.neg)
    if pos.shape[1:] != neg.shape[1:]:
        raise UsageError("positive and negative samples differ in size")
    tr = cfg["trainer"]
    pool = enumerate_features(pos.shape[1])
    if tr["max_features"] and tr["max_features"] < len(pool):
        rng = np.random.default_rng(cfg["seed"])
        pool = [pool[i] for i in np.sort(rng.choice(len(pool), tr["max_features"], replace=False))]
    cascade, reports = train_cascade(pos, neg, pool, tr["detection_rate"], tr["fp_rate"], tr["overall_fp"],
                                     tr["max_weak"], tr["max_stages"], stage_negatives=tr["stage_negatives"],
                                     random_state=cfg["seed"])
    out = Path(cfg["paths"]["cascade"])
    out.parent.mkdir(parents=True, exist_ok=True)
    cascade.save(out)
    t = Table(["stage", "n_weak", "detection", "false_positive", "cumulative_fp"])
    for r in reports:
        t.add(r.stage, r.n_weak, r.detection, r.false_positive, r.cumulative_fp)
    _emit(t, args)
    print(f"wrote {out} ({len(cascade.stages)} stages)")
    return 0


def cmd_detect(args, cfg) -> int:
    cascade = Cascade.load(_require(cfg["paths"]["cascade"], "cascade"))
    params = _detect_params(cfg)
    out = Path(cfg["paths"]["chips"])
    out.mkdir(parents=True, exist_ok=True)
    files = [f for src in args.inputs for f in _images(_require(src, "input"))]
    nxt = _next_number(out)
    t = Table(["frame", "detections", "chips", "detection_time"])
    failed = 0
    for f in files:
        try:
            frame = load_gray(f)
            t0 = time.perf_counter()
            dets = detect(frame, cascade, params)
            ms = (time.perf_counter() - t0) * 1000.0
        except (OSError, FaceAttendError) as exc:
            log.warning("%s: %s", f, exc)
            failed += 1
            continue
        names = []
        for d in dets:
            name = f"{nxt}.png"
            save_gray(extract_chip(frame, d), out / name)
            names.append(name)
            nxt += 1
        t.add(f.name, len(dets), " ".join(names), f"Detection Time: {ms:.3f}msec")
    _emit(t, args)
    return FAILURE if files and failed == len(files) else 0


def cmd_enroll(args, cfg) -> int:
    paths = cfg["paths"]
    g = build_gallery(_require(paths["TRAININGDATABASE"], "training directory"),
                      Roster.read(_require(paths["roster"], "roster")))
    model = train(g, seed=cfg["seed"])
    out = Path(paths["model"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    t = Table(["n", "N", "C", "K", "pca_iterations"])
    t.add(model.n, model.N, model.C, model.K, model.pca_iterations)
    _emit(t, args)
    print(f"wrote {out}")
    return 0


def cmd_attend(args, cfg) -> int:
    paths, rc = cfg["paths"], cfg["recognizer"]
    cascade = Cascade.load(_require(paths["cascade"], "cascade"))
    model = SubspaceModel.load(_require(paths["model"], "model"))
    roster = Roster.read(_require(paths["roster"], "roster"))
    params = _detect_params(cfg)
    frames = _images(_require(args.frames, "frames directory"))
    book = AttendanceLog(paths["log"], cooldown_s=rc["cooldown_s"], pairing=rc["pairing"])
    # frames at or before the newest logged event were handled by an earlier run
    cutoff = book.records[-1].timestamp if len(book) else None
    review = Path(paths["review"])
    nxt_review = None
    faces = logged = unknown = errors = 0
    for f in frames:
        when = datetime.fromtimestamp(f.stat().st_mtime) if args.clock == "file" else datetime.now()
        if cutoff is not None and when <= cutoff:
            continue
        try:
            frame = load_gray(f)
            t0 = time.perf_counter()
            dets = detect(frame, cascade, params)
            det_ms = (time.perf_counter() - t0) * 1000.0
            for d in dets:
                faces += 1
                chip = extract_chip(frame, d)
                m = recognize(model, chip, rc["tau"], rc["mode"], rc["centroid"])
                if not m.known:
                    review.mkdir(parents=True, exist_ok=True)
                    nxt_review = nxt_review or _next_number(review)
                    save_gray(chip, review / f"{nxt_review}.png")
                    nxt_review += 1
                    unknown += 1
                    continue
                s = roster.get(m.label)
                name, enr = (s.name, s.enrollment_no) if s else (m.label, m.label)
                if book.log(f.name, name, enr, when, det_ms + m.elapsed_ms) is not None:
                    logged += 1
        except (OSError, FaceAttendError) as exc:
            log.warning("%s: %s", f, exc)
            errors += 1
    t = Table(["frames", "faces", "logged", "unknown", "errors"])
    t.add(len(frames), faces, logged, unknown, errors)
    _emit(t, args)
    return 0


def _labeled_probes(directory, roster: Roster):
    X, y, names = [], [], []
    for f in _images(directory):
        if not f.stem.isdigit():
            log.warning("%s: not numbered, skipped", f.name)
            continue
        try:
            s = roster.subject_for(int(f.stem))
        except FaceAttendError:
            log.warning("%s: no roster entry, skipped", f.name)
            continue
        X.append(flatten(load_gray(f)))
        y.append(s.subject_id)
        names.append(f.name)
    return X, y, names


def cmd_eval(args, cfg) -> int:
    paths, rc = cfg["paths"], cfg["recognizer"]
    model = SubspaceModel.load(_require(paths["model"], "model"))
    roster = Roster.read(_require(paths["roster"], "roster"))
    X, y, _ = _labeled_probes(_require(paths["TESTDATABASE"], "test directory"), roster)
    if not X:
        raise UsageError("no labeled probes")
    results = {}
    for mode in ("pca", "lda"):
        for centroid in (False, True):
            w, labels = model.weights(mode), model.gallery_labels
            if centroid:
                w, labels = class_centroids(w, labels)
            basis = model.basis(mode)
            hits, dists, confusion = 0, [], Counter()
            for x, truth in zip(X, y):
                i, dist, _ = nearest(w, labels, (x - model.mean) @ basis)
                hits += labels[i] == truth
                dists.append(dist)
                if labels[i] != truth:
                    confusion[(truth, labels[i])] += 1
            results[(mode, centroid)] = (hits / len(X), float(np.mean(dists)), confusion)

    acc, mean_d, confusion = results[(rc["mode"], bool(rc["centroid"]))]
    print(f"probes: {len(X)}")
    print(f"rank-1 accuracy: {100 * acc:.2f}%")
    print(f"mean match distance: {mean_d:.6g}")
    print(f"misidentified: {sum(confusion.values())}")
    for (truth, got), k in confusion.most_common(5):
        print(f"  {truth} -> {got}: {k}")
    t = Table(["method", "matching", "rank1", "mean_distance"])
    for (mode, centroid), (a, d, _) in results.items():
        t.add("PCA" if mode == "pca" else "PCA+LDA", "centroid" if centroid else "1-NN", a, d)
    _emit(t, args)
    return 0


def cmd_report(args, cfg) -> int:
    book = AttendanceLog(_require(cfg["paths"]["log"], "log"))
    for line in book.report():
        print(line)
    if args.csv:
        export_csv(book.records, args.csv)
    return 0


# -- parser ---------------------------------------------------------------------------

def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faceattend", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"TOML config file (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--csv", metavar="FILE", help="also write the printed table as CSV")
    common.add_argument("--seed", type=int)

    det = argparse.ArgumentParser(add_help=False)
    det.add_argument("--scale-step", dest="scale_step", type=float)
    det.add_argument("--stride-factor", dest="stride_factor", type=float)
    det.add_argument("--nms-iou", dest="nms_iou", type=float)

    rec = argparse.ArgumentParser(add_help=False)
    rec.add_argument("--tau", type=_positive_float)
    rec.add_argument("--centroid", action="store_true", default=None)
    rec.add_argument("--mode", choices=("lda", "pca"))

    s = sub.add_parser("train-cascade", parents=[common], help="train a Haar cascade from sample windows")
    s.add_argument("--pos", required=True)
    s.add_argument("--neg", required=True)
    s.add_argument("--out", dest="cascade")
    s.add_argument("--detection-rate", dest="detection_rate", type=float)
    s.add_argument("--fp-rate", dest="fp_rate", type=float)
    s.add_argument("--overall-fp", dest="overall_fp", type=float)
    s.add_argument("--max-weak", dest="max_weak", type=int)
    s.add_argument("--max-stages", dest="max_stages", type=int)
    s.add_argument("--max-features", dest="max_features", type=int)
    s.add_argument("--stage-negatives", dest="stage_negatives", type=int)
    s.set_defaults(func=cmd_train_cascade)

    s = sub.add_parser("detect", parents=[common, det], help="detect faces and save numbered chips")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--cascade")
    s.add_argument("--out", dest="chips")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("enroll", parents=[common], help="build the gallery and train the face space")
    s.add_argument("--train-dir", dest="train_dir")
    s.add_argument("--roster")
    s.add_argument("--out", dest="model")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("attend", parents=[common, det, rec], help="run detection, recognition and logging")
    s.add_argument("frames")
    s.add_argument("--cascade")
    s.add_argument("--model")
    s.add_argument("--roster")
    s.add_argument("--log")
    s.add_argument("--review")
    s.add_argument("--cooldown", dest="cooldown_s", type=float)
    s.add_argument("--clock", choices=("file", "now"), default="file",
                   help="timestamp events with the frame file time or the current time")
    s.set_defaults(func=cmd_attend)

    s = sub.add_parser("eval", parents=[common, rec], help="rank-1 accuracy on labeled probes")
    s.add_argument("--model")
    s.add_argument("--test-dir", dest="test_dir")
    s.add_argument("--roster")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="print the attendance sheet")
    s.add_argument("--log")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = merge_flags(load_config(args.config), args)
        return args.func(args, cfg)
    except (UsageError, ConfigurationError, ImageFormatError) as exc:
        print(f"faceattend {args.command}: {exc}", file=sys.stderr)
        return USAGE
    except FaceAttendError as exc:
        print(f"faceattend {args.command}: {exc}", file=sys.stderr)
        stage = getattr(exc, "stage", None)
        if stage is not None:
            print(f"failed at stage {stage}", file=sys.stderr)
        return FAILURE
    except OSError as exc:
        print(f"faceattend {args.command}: {exc}", file=sys.stderr)
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
