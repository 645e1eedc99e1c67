import csv
import os
import re
from datetime import datetime

import numpy as np
import pytest

from synthetic import (DETECT_BASE, base_patterns, identity_fields, noise_frame, pattern_chips, planted_frame,
                       subject_face)

from faceattend.attendance import AttendanceLog, import_csv
from faceattend.cli import DEFAULTS, load_config, main, merge_flags, build_parser
from faceattend.imagecore import GrayImage, save_gray

N_SUBJECTS, PER_SUBJECT = 3, 5


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_roster(path, n, per, start=1):
    lines = ["subject_id,name,enrollment_no,first_file,last_file"]
    for k in range(n):
        lines.append(f"s{k},Student {k},EN{k:03d},{start + k * per},{start + (k + 1) * per - 1}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, face_cascade):
    """Cascade, enrollment frames -> chips -> model for three synthetic subjects."""
    root = tmp_path_factory.mktemp("pipeline")
    cascade = face_cascade.save(root / "cascade.json")
    rng = np.random.default_rng(31)
    fields = identity_fields(rng, N_SUBJECTS + 1)
    frames = root / "enroll_frames"
    frames.mkdir()
    n = 0
    for k in range(N_SUBJECTS):
        for _ in range(PER_SUBJECT):
            n += 1
            fr, _ = planted_frame(rng, DETECT_BASE, pattern=subject_face(rng, fields[k]))
            save_gray(GrayImage(fr), frames / f"{n}.png")
    roster = write_roster(root / "roster.csv", N_SUBJECTS, PER_SUBJECT)
    return {"root": root, "cascade": cascade, "frames": frames, "roster": roster, "fields": fields, "rng": rng}


@pytest.fixture(scope="module")
def enrolled(pipeline):
    root = pipeline["root"]
    chips = root / "chips"
    assert main(["detect", str(pipeline["frames"]), "--cascade", str(pipeline["cascade"]), "--out", str(chips)]) == 0
    assert sorted(int(p.stem) for p in chips.iterdir()) == list(range(1, N_SUBJECTS * PER_SUBJECT + 1))
    model = root / "model.json"
    assert main(["enroll", "--train-dir", str(chips), "--roster", str(pipeline["roster"]), "--out", str(model)]) == 0
    return dict(pipeline, chips=chips, model=model)


# -- detect ------------------------------------------------------------------------------

def test_detect_numbering_and_timing(pipeline, tmp_path, capsys):
    out = tmp_path / "chips"
    out.mkdir()
    save_gray(GrayImage(np.zeros((100, 100), dtype=np.uint8)), out / "41.png")
    rng = np.random.default_rng(3)
    frames = tmp_path / "frames"
    frames.mkdir()
    save_gray(GrayImage(noise_frame(rng)), frames / "1.png")
    fr, _ = planted_frame(rng, DETECT_BASE)
    save_gray(GrayImage(fr), frames / "2.png")
    code, text, _ = run(capsys, "detect", frames, "--cascade", pipeline["cascade"], "--out", out,
                        "--csv", tmp_path / "t.csv")
    assert code == 0
    rows = text.strip().splitlines()
    assert rows[1].startswith("1.png | 0 |")
    assert rows[2].startswith("2.png | 1 | 42.png |")
    assert re.search(r"Detection Time: \d+\.\d{3}msec$", rows[2])
    assert sorted(p.name for p in out.iterdir()) == ["41.png", "42.png"]
    with open(tmp_path / "t.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["frame", "detections", "chips", "detection_time"]


def test_detect_unreadable(pipeline, tmp_path, capsys, caplog):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    code, _, _ = run(capsys, "detect", bad, "--cascade", pipeline["cascade"], "--out", tmp_path / "o")
    assert code == 1 and "bad.png" in caplog.text


# -- enroll / eval ------------------------------------------------------------------------

def test_enroll_reports_shape(enrolled, capsys):
    code, text, _ = run(capsys, "enroll", "--train-dir", enrolled["chips"], "--roster", enrolled["roster"],
                        "--out", enrolled["root"] / "again.json")
    assert code == 0
    header, row = text.splitlines()[:2]
    assert header == "n | N | C | K | pca_iterations"
    assert row.startswith(f"10000 | {N_SUBJECTS * PER_SUBJECT} | {N_SUBJECTS} | {N_SUBJECTS - 1} |")
    assert (enrolled["root"] / "again.json").read_bytes() == enrolled["model"].read_bytes()


def test_enroll_roster_gap(enrolled, tmp_path, capsys):
    short = write_roster(tmp_path / "short.csv", N_SUBJECTS - 1, PER_SUBJECT)
    code, _, err = run(capsys, "enroll", "--train-dir", enrolled["chips"], "--roster", short,
                       "--out", tmp_path / "m.json")
    assert code == 1 and "11.png" in err


def test_eval_self(enrolled, capsys):
    code, text, _ = run(capsys, "eval", "--model", enrolled["model"], "--test-dir", enrolled["chips"],
                        "--roster", enrolled["roster"])
    assert code == 0
    assert "rank-1 accuracy: 100.00%" in text
    assert "PCA | 1-NN |" in text and "PCA+LDA | 1-NN |" in text


def test_eval_shuffled_labels(tmp_path, capsys):
    rng = np.random.default_rng(8)
    C = 10
    patterns = base_patterns(rng, C)
    train, _ = pattern_chips(rng, patterns, 4)
    test, _ = pattern_chips(rng, patterns, 30)
    (tmp_path / "train").mkdir()
    (tmp_path / "test").mkdir()
    for i, c in enumerate(train):
        save_gray(GrayImage(c), tmp_path / "train" / f"{i + 1}.png")
    order = rng.permutation(len(test))
    for i, c in enumerate(test[order]):
        save_gray(GrayImage(c), tmp_path / "test" / f"{i + 1}.png")
    roster = write_roster(tmp_path / "roster.csv", C, 4)
    test_roster = write_roster(tmp_path / "test_roster.csv", C, 30)
    assert main(["enroll", "--train-dir", str(tmp_path / "train"), "--roster", str(roster),
                 "--out", str(tmp_path / "m.json")]) == 0
    capsys.readouterr()
    code, text, _ = run(capsys, "eval", "--model", tmp_path / "m.json", "--test-dir", tmp_path / "test",
                        "--roster", test_roster)
    assert code == 0
    acc = float(re.search(r"rank-1 accuracy: ([\d.]+)%", text).group(1)) / 100
    assert abs(acc - 1 / C) < 0.1


# -- attend / report -----------------------------------------------------------------------

def session_frames(directory, pipeline, plan, t0=datetime(2010, 4, 16, 9, 0)):
    """plan: list of (seconds offset, subject index or None for an empty frame)."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = pipeline["rng"]
    for i, (dt, k) in enumerate(plan):
        if k is None:
            fr = noise_frame(rng)
        else:
            fr, _ = planted_frame(rng, DETECT_BASE, pattern=subject_face(rng, pipeline["fields"][k]))
        p = save_gray(GrayImage(fr), directory / f"{i + 1}.png")
        ts = t0.timestamp() + dt
        os.utime(p, (ts, ts))
    return directory


def test_attend_session(enrolled, tmp_path, capsys):
    plan = [(0, 0), (5, 1), (10, 0), (20, None), (30, 2), (40, 1), (50, 2)]
    frames = session_frames(tmp_path / "session", enrolled, plan)
    log = tmp_path / "log.ndjson"
    args = ["attend", frames, "--cascade", enrolled["cascade"], "--model", enrolled["model"],
            "--roster", enrolled["roster"], "--log", log, "--review", tmp_path / "review", "--tau", "1e9"]
    code, text, _ = run(capsys, *args)
    assert code == 0
    recs = AttendanceLog(log).records
    assert sorted(r.enrollment_no for r in recs) == ["EN000", "EN001", "EN002"]
    assert all(r.event == "Entry" and r.detection_ms >= 0 for r in recs)
    assert text.splitlines()[1] == "7 | 6 | 3 | 0 | 0"

    before = log.read_bytes()
    assert run(capsys, *args)[0] == 0
    assert log.read_bytes() == before

    code, text, _ = run(capsys, "report", "--log", log, "--csv", tmp_path / "sheet.csv")
    assert code == 0
    assert re.match(r"1 \| 1\.png \| Date and Time: 4/16/2010 9:00 \| Detection Time: [\d.]+msec", text)
    assert import_csv(tmp_path / "sheet.csv") == recs


def test_attend_unknown_goes_to_review(enrolled, tmp_path, capsys):
    frames = session_frames(tmp_path / "s", enrolled, [(0, N_SUBJECTS)])
    log = tmp_path / "log.ndjson"
    code, _, _ = run(capsys, "attend", frames, "--cascade", enrolled["cascade"], "--model", enrolled["model"],
                     "--roster", enrolled["roster"], "--log", log, "--review", tmp_path / "review",
                     "--tau", "1e-6")
    assert code == 0
    assert [p.name for p in (tmp_path / "review").iterdir()] == ["1.png"]
    assert not log.exists() or AttendanceLog(log).records == []


def test_attend_empty_dir(enrolled, tmp_path, capsys):
    (tmp_path / "none").mkdir()
    code, text, _ = run(capsys, "attend", tmp_path / "none", "--cascade", enrolled["cascade"],
                        "--model", enrolled["model"], "--roster", enrolled["roster"], "--log", tmp_path / "l")
    assert code == 0 and text.splitlines()[1] == "0 | 0 | 0 | 0 | 0"


# -- train-cascade ---------------------------------------------------------------------------

def bar_dirs(tmp_path, rng, n_pos=30, n_neg=40):
    pos, neg = tmp_path / "pos", tmp_path / "neg"
    pos.mkdir()
    neg.mkdir()
    for i in range(n_pos):
        w = rng.integers(0, 60, (8, 8))
        w[:, :4] += 180
        save_gray(GrayImage(w.astype(np.uint8)), pos / f"{i}.png")
    for i in range(n_neg):
        save_gray(GrayImage(rng.integers(0, 60, (8, 8)).astype(np.uint8)), neg / f"{i}.png")
    return pos, neg


def test_train_cascade_separable(tmp_path, capsys, rng):
    pos, neg = bar_dirs(tmp_path, rng)
    code, text, _ = run(capsys, "train-cascade", "--pos", pos, "--neg", neg, "--out", tmp_path / "c.json",
                        "--overall-fp", "0.01")
    assert code == 0
    rows = [r.split(" | ") for r in text.splitlines()[1:] if " | " in r]
    assert len(rows) == 1
    assert float(rows[-1][4]) <= 0.01
    assert (tmp_path / "c.json").exists()


def test_train_cascade_empty_positives(tmp_path, capsys, rng):
    _, neg = bar_dirs(tmp_path, rng)
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "train-cascade", "--pos", tmp_path / "empty", "--neg", neg,
                       "--out", tmp_path / "c.json")
    assert code == 2 and "no sample images" in err


def test_train_cascade_failure_names_stage(tmp_path, capsys, rng):
    pos, neg = tmp_path / "p", tmp_path / "n"
    pos.mkdir()
    neg.mkdir()
    for i in range(20):
        save_gray(GrayImage(rng.integers(0, 256, (6, 6)).astype(np.uint8)), pos / f"{i}.png")
        save_gray(GrayImage(rng.integers(0, 256, (6, 6)).astype(np.uint8)), neg / f"{i}.png")
    code, _, err = run(capsys, "train-cascade", "--pos", pos, "--neg", neg, "--out", tmp_path / "c.json",
                       "--fp-rate", "0.01", "--max-weak", "2", "--max-features", "5")
    assert code == 1 and "stage 0" in err


# -- configuration ----------------------------------------------------------------------------

def test_config_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "fa.toml"
    cfg_file.write_text('seed = 7\n[detector]\nnms_iou = 0.4\nscale_step = 1.5\n[paths]\nmodel = "m.json"\n')
    cfg = load_config(cfg_file)
    assert cfg["seed"] == 7 and cfg["detector"]["nms_iou"] == 0.4 and cfg["paths"]["model"] == "m.json"
    assert cfg["detector"]["stride_factor"] == DEFAULTS["detector"]["stride_factor"]
    monkeypatch.setenv("FACEATTEND_CONFIG", str(cfg_file))
    args = build_parser().parse_args(["detect", "x.png", "--nms-iou", "0.2"])
    cfg = merge_flags(load_config(args.config), args)
    assert cfg["detector"]["nms_iou"] == 0.2 and cfg["detector"]["scale_step"] == 1.5
    assert DEFAULTS["detector"]["nms_iou"] == 0.3


def test_config_errors(tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.toml"
    bad.write_text("[detector]\nwindow = 3\n")
    assert run(capsys, "--config", bad, "report", "--log", tmp_path / "l")[0] == 2
    monkeypatch.setenv("FACEATTEND_CONFIG", str(tmp_path / "missing.toml"))
    assert run(capsys, "report", "--log", tmp_path / "l")[0] == 2
    monkeypatch.delenv("FACEATTEND_CONFIG")
    assert run(capsys, "report", "--log", tmp_path / "nope.ndjson")[0] == 2
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 2
