import re

import numpy as np
import pytest

from nervescan import cli, nn
from nervescan.contour import box_contour, snake_to_mask
from nervescan.detector import read_detections
from nervescan.evaluation import dice
from nervescan.pgm import read_pgm, write_pgm
from nervescan.phantom import read_ground_truth

from datasets import disc_image


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert run("phantom", "--out", out, "--seed", 3, "--num-frames", 12) == 0
    return out


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------- usage


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("frobnicate", "--out", tmp_path)
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("phantom")
    assert exc.value.code == cli.EXIT_USAGE
    assert run("phantom", "--out", tmp_path, "--set", "tracker.Q=1") == cli.EXIT_USAGE
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("detector.alpha = 3\n")
    assert run("phantom", "--out", tmp_path, "--config", cfg) == cli.EXIT_USAGE
    assert "detector.alpha (line 1)" in capsys.readouterr().err


def test_missing_config_file_is_io_error(tmp_path):
    assert run("phantom", "--out", tmp_path, "--config", tmp_path / "none.cfg") == cli.EXIT_IO


# ---------------------------------------------------------------- phantom


def test_phantom_default_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("phantom", "--out", a, "--seed", 42) == 0
    assert run("phantom", "--out", b, "--seed", 42) == 0
    frames = sorted(a.glob("frame_*.pgm"))
    assert len(frames) == 50 and len(list(a.glob("mask_*.pgm"))) == 50
    assert (a / "ground_truth.txt").exists()
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()
    header = b"P5\n600 300\n255\n"
    assert all(p.stat().st_size == 600 * 300 + len(header) for p in frames)


def test_phantom_zero_frames_rejected(tmp_path):
    assert run("phantom", "--out", tmp_path, "--num-frames", 0) == cli.EXIT_USAGE


def test_phantom_unwritable_out(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("phantom", "--out", blocker / "sub", "--num-frames", 1) == cli.EXIT_IO


# ---------------------------------------------------------------- train


def test_train_progress_and_determinism(tmp_path, phantom_dir, capsys):
    args = ["train", phantom_dir, "--epochs", 4, "--seed", 9]
    assert run(*args, "--out", tmp_path / "a") == 0
    losses = [float(v) for v in re.findall(r"loss (\S+)", capsys.readouterr().out)]
    assert len(losses) == 4 and losses[-1] < losses[0]
    assert run(*args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / cli.MODEL_FILE).read_bytes() == (tmp_path / "b" / cli.MODEL_FILE).read_bytes()


def test_train_errors(tmp_path, phantom_dir):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("train", phantom_dir, "--epochs", 1, "--out", blocker) == cli.EXIT_IO
    bare = tmp_path / "bare"
    bare.mkdir()
    for p in phantom_dir.glob("frame_*.pgm"):
        (bare / p.name).write_bytes(p.read_bytes())
    assert run("train", bare, "--epochs", 1, "--out", tmp_path / "m") == cli.EXIT_IO
    assert run("train", tmp_path / "nowhere", "--out", tmp_path / "m") == cli.EXIT_IO


# ---------------------------------------------------------------- detect


def test_detect_blank_frames(tmp_path, trained_model):
    frames = tmp_path / "blank"
    frames.mkdir()
    for t in range(2):
        write_pgm(frames / f"frame_{t:05d}.pgm", np.full((128, 192), 110, dtype=np.uint8))
    assert run("detect", trained_model, frames, "--out", tmp_path / "d") == 0
    assert (tmp_path / "d" / cli.DETECTIONS_FILE).read_text() == ""


def test_detect_finds_the_nerve(tmp_path, trained_model, phantom_dir):
    assert run("detect", trained_model, phantom_dir, "--out", tmp_path) == 0
    dets = read_detections(tmp_path / cli.DETECTIONS_FILE)
    truth = read_ground_truth(phantom_dir / "ground_truth.txt")
    dist = [np.hypot(b.x + b.w / 2 - truth[t][0].cx, b.y + b.h / 2 - truth[t][0].cy)
            for t, boxes in dets.items() for b in boxes]
    assert np.median(dist) < 20
    lines = (tmp_path / cli.DETECTIONS_FILE).read_text().splitlines()
    keys = [tuple(map(int, line.split(",")[:3])) for line in lines]
    assert keys == sorted(keys, key=lambda k: (k[0], k[2], k[1]))


def test_halving_stride_evaluates_more_windows(tmp_path, trained_model, capsys):
    frames = tmp_path / "f"
    frames.mkdir()
    write_pgm(frames / "frame_00000.pgm", np.zeros((100, 150), dtype=np.uint8))
    counts = []
    for stride in (16, 8):
        assert run("detect", trained_model, frames, "--out", tmp_path / "d", "--stride", stride) == 0
        counts.append(int(re.search(r"evaluated (\d+) windows", capsys.readouterr().out).group(1)))
    assert counts[1] >= counts[0]


def test_detect_bad_model(tmp_path, phantom_dir):
    bad = tmp_path / "bad.sntr"
    bad.write_bytes(b"not a model")
    assert run("detect", bad, phantom_dir, "--out", tmp_path) == cli.EXIT_IO


# ---------------------------------------------------------------- localize


def det_lines(frames, boxes):
    return [f"{t},{x},{y},64,64,0.99" for t in frames for x, y in boxes]


TRUE = [(100, 100), (108, 100), (100, 108), (108, 108)]


def test_localize_persistent_cluster(tmp_path):
    write_lines(tmp_path / "d.txt", det_lines(range(12), TRUE))
    assert run("localize", tmp_path / "d.txt", "--out", tmp_path) == 0
    final = (tmp_path / cli.LOCALIZATION_FILE).read_text().split(",")
    assert final[:5] == ["11", "104", "104", "64", "64"]
    tracks = (tmp_path / cli.TRACKS_FILE).read_text().splitlines()
    assert tracks[0] == "0,0,104.0,104.0,4,4"
    assert len((tmp_path / cli.LOCALIZATIONS_FILE).read_text().splitlines()) == 12


def test_localize_ignores_two_frame_distractor(tmp_path):
    fake = [(400, 30 + 4 * k) for k in range(6)]
    write_lines(tmp_path / "d.txt", det_lines(range(12), TRUE) + det_lines([9, 10], fake))
    assert run("localize", tmp_path / "d.txt", "--out", tmp_path) == 0
    assert (tmp_path / cli.LOCALIZATION_FILE).read_text().startswith("11,104,104,")


def test_localize_nothing_found(tmp_path):
    (tmp_path / "d.txt").write_text("")
    assert run("localize", tmp_path / "d.txt", "--out", tmp_path) == cli.EXIT_NOT_FOUND
    write_lines(tmp_path / "d.txt", det_lines([0], TRUE[:2]))
    assert run("localize", tmp_path / "d.txt", "--out", tmp_path, "--num-frames", 12) == cli.EXIT_NOT_FOUND


def test_localize_malformed(tmp_path):
    (tmp_path / "d.txt").write_text("0,1,2\n")
    assert run("localize", tmp_path / "d.txt", "--out", tmp_path) == cli.EXIT_IO


# ---------------------------------------------------------------- segment


@pytest.fixture
def circle_dir(tmp_path):
    frames = tmp_path / "circle"
    frames.mkdir()
    write_pgm(frames / "frame_00000.pgm", disc_image(200, 40).astype(np.uint8))
    write_lines(tmp_path / "loc.txt", ["0,68,68,64,64,0.9"])
    return frames


def test_segment_circle(tmp_path, circle_dir):
    out = tmp_path / "s"
    assert run("segment", circle_dir, tmp_path / "loc.txt", "--out", out) == 0
    mask = read_pgm(out / "mask_00000.pgm")
    assert set(np.unique(mask)) <= {0, 255}
    yy, xx = np.mgrid[:200, :200] + 0.5
    disc = (xx - 100) ** 2 + (yy - 100) ** 2 <= 1600
    assert dice(mask == 255, disc) >= 0.8
    overlay = read_pgm(out / cli.OVERLAY_FILE)
    assert overlay.shape == (200, 200) and (overlay == 255).sum() > 100
    pts = np.loadtxt(out / cli.CONTOUR_FILE, delimiter=",")
    assert pts.shape[1] == 2 and len(pts) >= 8


def test_segment_zero_iterations_fills_initial_box(tmp_path, circle_dir):
    out = tmp_path / "s"
    assert run("segment", circle_dir, tmp_path / "loc.txt", "--out", out, "--evolve-iters", 0) == 0
    expected = snake_to_mask(box_contour(68, 68, 64, 64), 200, 200)
    np.testing.assert_array_equal(read_pgm(out / "mask_00000.pgm") == 255, expected)


def test_segment_errors(tmp_path, circle_dir):
    write_lines(tmp_path / "out.txt", ["0,170,170,64,64,0.9"])
    assert run("segment", circle_dir, tmp_path / "out.txt", "--out", tmp_path / "s") == cli.EXIT_IO
    (tmp_path / "empty.txt").write_text("")
    assert run("segment", circle_dir, tmp_path / "empty.txt", "--out", tmp_path / "s") == cli.EXIT_NOT_FOUND
    write_lines(tmp_path / "tiny.txt", ["0,96,96,4,4,0.9"])
    assert run("segment", circle_dir, tmp_path / "tiny.txt", "--out", tmp_path / "s",
               "--set", "snake.alpha_elastic=2", "--set", "snake.field_weight=0.01") == cli.EXIT_USAGE


# ---------------------------------------------------------------- eval


def test_eval_reports(tmp_path, phantom_dir):
    truth = read_ground_truth(phantom_dir / "ground_truth.txt")
    pred = tmp_path / "pred"
    pred.mkdir()
    lines = [f"{t},{b.x},{b.y},{b.w},{b.h},1.0" for t, (_, b) in truth.items() if t != 3]
    write_lines(pred / cli.LOCALIZATIONS_FILE, lines)
    (pred / "mask_00005.pgm").write_bytes((phantom_dir / "mask_00005.pgm").read_bytes())
    assert run("eval", pred, phantom_dir, "--out", tmp_path / "r") == 0
    loc = (tmp_path / "r" / cli.LOC_REPORT).read_text().splitlines()
    p, r, f = map(float, loc[-1].split(","))
    assert (p, r) == (1.0, 11 / 12)
    seg = (tmp_path / "r" / cli.SEG_REPORT).read_text().splitlines()
    assert seg[-1] == "1.0,0.0"


def test_eval_mismatched_sets(tmp_path, phantom_dir):
    pred = tmp_path / "pred"
    pred.mkdir()
    write_lines(pred / cli.LOCALIZATIONS_FILE, ["99,0,0,64,64,1.0"])
    assert run("eval", pred, phantom_dir, "--out", tmp_path / "r") == cli.EXIT_IO
    (pred / cli.LOCALIZATIONS_FILE).unlink()
    write_pgm(pred / "mask_00099.pgm", np.zeros((300, 600), dtype=np.uint8))
    assert run("eval", pred, phantom_dir, "--out", tmp_path / "r") == cli.EXIT_IO
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("eval", empty, phantom_dir, "--out", tmp_path / "r") == cli.EXIT_IO
