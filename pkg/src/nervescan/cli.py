"""Command-line front end: ``nervescan <phantom|train|detect|localize|segment|eval>``.

Exit status: 0 success, 1 usage/config or processing error, 2 I/O error,
3 no nerve found.
"""

from __future__ import annotations

import argparse
import glob
import os
import re
import sys

import numpy as np

from . import nn
from .config import ConfigError, load_config
from .consistency import format_track_line, run_tracker
from .detector import (format_detection, probability_map, read_detections, window_positions,
                       window_probs, boxes_from_probs, write_detections)
from .errors import InvalidInputError, NerveScanError
from .evaluation import localization_metrics, segmentation_metrics
from .pgm import read_pgm, write_pgm
from .phantom import (GT_FILE, GroundTruth, generate_sequence, mask_name, read_ground_truth,
                      sample_patches, write_sequence)
from .pipeline import segment_frame

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NOT_FOUND = 0, 1, 2, 3

MODEL_FILE = "model.sntr"
DETECTIONS_FILE = "detections.txt"
LOCALIZATION_FILE = "localization.txt"
LOCALIZATIONS_FILE = "localizations.txt"
TRACKS_FILE = "tracks.txt"
CONTOUR_FILE = "contour.txt"
OVERLAY_FILE = "overlay.pgm"
LOC_REPORT = "localization_report.txt"
SEG_REPORT = "segmentation_report.txt"


class InputFileError(NerveScanError):
    """An input file or directory is missing or malformed."""


class NoNerveFound(NerveScanError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- file helpers


def _reading(fn, *args):
    """Call a file reader, reporting format problems as input-file errors."""
    try:
        return fn(*args)
    except InvalidInputError as exc:
        raise InputFileError(str(exc)) from None
    except ValueError as exc:
        raise InputFileError(f"{args[0]}: {exc}") from None


def _indexed_files(directory, prefix):
    if not os.path.isdir(directory):
        raise InputFileError(f"{directory}: not a directory")
    pattern = re.compile(rf"{prefix}_(\d{{5}})\.pgm$")
    found = {}
    for path in glob.glob(os.path.join(directory, f"{prefix}_*.pgm")):
        m = pattern.search(os.path.basename(path))
        if m:
            found[int(m.group(1))] = path
    return dict(sorted(found.items()))


def load_frames(directory):
    """All ``frame_NNNNN.pgm`` files of a directory as an ``(F, H, W)`` array."""
    files = _indexed_files(directory, "frame")
    if not files:
        raise InputFileError(f"{directory}: no frame_*.pgm files")
    if list(files) != list(range(len(files))):
        raise InputFileError(f"{directory}: frame numbering has gaps")
    frames = [_reading(read_pgm, p) for p in files.values()]
    if len({f.shape for f in frames}) != 1:
        raise InputFileError(f"{directory}: frames differ in size")
    return np.stack(frames)


def _ground_truth(directory):
    path = os.path.join(directory, GT_FILE)
    if not os.path.isfile(path):
        raise InputFileError(f"{directory}: missing {GT_FILE}")
    return _reading(read_ground_truth, path)


def _write_lines(path, lines):
    with open(path, "w") as f:
        f.writelines(line + "\n" for line in lines)


def write_contour(path, points):
    _write_lines(path, [f"{float(x)!r},{float(y)!r}" for x, y in points])


def burn_contour(frame, points):
    """Copy of ``frame`` with the closed polygon drawn at intensity 255."""
    out = np.array(frame, dtype=np.uint8)
    h, w = out.shape
    pts = np.asarray(points, dtype=np.float64)
    for a, b in zip(pts, np.roll(pts, -1, axis=0)):
        n = int(np.ceil(np.hypot(*(b - a)) * 2)) + 1
        t = np.linspace(0.0, 1.0, n)[:, None]
        seg = a + t * (b - a)
        cols = np.clip(np.floor(seg[:, 0]).astype(int), 0, w - 1)
        rows = np.clip(np.floor(seg[:, 1]).astype(int), 0, h - 1)
        out[rows, cols] = 255
    return out


# ---------------------------------------------------------------- commands


def cmd_phantom(args, cfg):
    frames, gt = generate_sequence(cfg.phantom)
    write_sequence(args.out, frames, gt)
    print(f"wrote {len(frames)} frames to {args.out}")


def cmd_train(args, cfg):
    _, patch_seed, _ = cfg.seeds()
    xs, ys = [], []
    for i, directory in enumerate(args.data):
        frames = load_frames(directory)
        truth = _ground_truth(directory)
        if sorted(truth) != list(range(len(frames))):
            raise InputFileError(f"{directory}: ground truth does not cover every frame")
        gt = GroundTruth([truth[t][0] for t in range(len(frames))], None,
                         [truth[t][1] for t in range(len(frames))])
        x, y, _ = sample_patches(frames, gt, cfg.detector.patch_size, cfg.patches.neg_per_frame,
                                 patch_seed + i, cfg.patches.pos_per_frame, cfg.patches.pos_shift)
        xs.append(x)
        ys.append(y)
    x, y = np.concatenate(xs), np.concatenate(ys)
    print(f"{len(y)} patches ({int(y.sum())} nerve, {int(len(y) - y.sum())} background)")
    net = nn.build_network(seed=cfg.seeds()[2], dropout=cfg.train.dropout_rate,
                           input_size=cfg.detector.patch_size)
    net, _ = nn.train(net, x, y, cfg.train,
                      log=lambda e, loss: print(f"epoch {e + 1:4d} loss {loss:.6f}", flush=True))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, MODEL_FILE)
    nn.save(net, path)
    print(f"training accuracy {nn.accuracy(net, x, y):.4f}; model written to {path}")


def _load_model(path):
    try:
        return nn.load(path)
    except (NerveScanError, ValueError) as exc:
        raise InputFileError(f"{path}: {exc}") from None


def cmd_detect(args, cfg):
    net = _load_model(args.model)
    frames = load_frames(args.frames)
    h, w = frames.shape[1:]
    per_frame = [boxes_from_probs(*window_probs(net, f, cfg.detector), cfg.detector)
                 for f in frames]
    os.makedirs(args.out, exist_ok=True)
    write_detections(os.path.join(args.out, DETECTIONS_FILE), per_frame)
    windows = len(window_positions(w, h, cfg.detector.patch_size, cfg.detector.stride))
    print(f"evaluated {windows * len(frames)} windows over {len(frames)} frames; "
          f"{sum(map(len, per_frame))} detections")


def cmd_localize(args, cfg):
    detections = _reading(read_detections, args.detections)
    n = args.sequence_length if args.sequence_length is not None else max(detections, default=-1) + 1
    if n < cfg.tracker.M:
        print(f"warning: {n} frames is shorter than the {cfg.tracker.M}-frame window",
              file=sys.stderr)
    locs, state = run_tracker(detections, n, cfg.tracker, cfg.detector.patch_size)
    os.makedirs(args.out, exist_ok=True)
    _write_lines(os.path.join(args.out, TRACKS_FILE), [format_track_line(e) for e in state.log])
    _write_lines(os.path.join(args.out, LOCALIZATIONS_FILE),
                 [format_detection(t, b) for t, b in enumerate(locs) if b is not None])
    final = locs[-1] if locs else None
    _write_lines(os.path.join(args.out, LOCALIZATION_FILE),
                 [] if final is None else [format_detection(n - 1, final)])
    if n == 0:
        raise NoNerveFound(f"{args.detections}: no detections")
    if final is None:
        raise NoNerveFound(f"no consistent nerve track at frame {n - 1}")
    print(format_detection(n - 1, final))


def cmd_segment(args, cfg):
    frames = load_frames(args.frames)
    boxes = _reading(read_detections, args.localization)
    if not boxes:
        raise NoNerveFound(f"{args.localization}: no localization")
    t = max(boxes)
    box = boxes[t][-1]
    if t >= len(frames):
        raise InputFileError(f"localization refers to frame {t}, only {len(frames)} frames")
    frame = frames[t]
    h, w = frame.shape
    if not box.inside(w, h):
        raise InputFileError(f"localization box {box} lies outside the {w}x{h} frame")
    params = cfg.snake
    prob = None
    if params.prob_weight > 0:
        if args.model is None:
            raise ConfigError("snake.prob_weight > 0 needs --model for the probability map")
        positions, probs = window_probs(_load_model(args.model), frame, cfg.detector)
        prob = probability_map(positions, probs, w, h, cfg.detector.patch_size)
    pts, mask, iters = segment_frame(frame, box, params, prob)
    os.makedirs(args.out, exist_ok=True)
    write_pgm(os.path.join(args.out, mask_name(t)), mask.astype(np.uint8) * 255)
    write_contour(os.path.join(args.out, CONTOUR_FILE), pts)
    write_pgm(os.path.join(args.out, OVERLAY_FILE), burn_contour(frame, pts))
    print(f"frame {t}: {len(pts)} vertices after {iters} iterations, {int(mask.sum())} px")


def cmd_eval(args, cfg):
    truth = _ground_truth(args.gt)
    loc_path = args.localizations or os.path.join(args.pred, LOCALIZATIONS_FILE)
    if args.localizations and not os.path.isfile(loc_path):
        raise InputFileError(f"{loc_path}: no such file")
    pred_masks = _indexed_files(args.pred, "mask")
    if not os.path.isfile(loc_path) and not pred_masks:
        raise InputFileError(f"{args.pred}: neither {LOCALIZATIONS_FILE} nor mask_*.pgm found")
    os.makedirs(args.out, exist_ok=True)
    if os.path.isfile(loc_path):
        preds = _reading(read_detections, loc_path)
        extra = sorted(set(preds) - set(truth))
        if extra:
            raise InputFileError(f"predictions for frames without ground truth: {extra[:5]}")
        frames = sorted(truth)
        report = localization_metrics([preds[t][-1] if t in preds else None for t in frames],
                                      [truth[t][1] for t in frames])
        _write_lines(os.path.join(args.out, LOC_REPORT), [report.text(), report.machine()])
        print(report.text())
    if pred_masks:
        gt_masks = _indexed_files(args.gt, "mask")
        missing = sorted(set(pred_masks) - set(gt_masks))
        if missing:
            raise InputFileError(f"no ground-truth mask for frames {missing[:5]}")
        lines = []
        for t, path in pred_masks.items():
            pred = _reading(read_pgm, path) > 127
            gt = _reading(read_pgm, gt_masks[t]) > 127
            if pred.shape != gt.shape:
                raise InputFileError(f"frame {t}: mask sizes differ")
            if not pred.any():
                raise NoNerveFound(f"frame {t}: predicted mask is empty")
            seg = segmentation_metrics(pred, gt)
            lines += [f"frame {t}", seg.text(), seg.machine()]
            print(f"frame {t}\n{seg.text()}")
        _write_lines(os.path.join(args.out, SEG_REPORT), lines)


# ---------------------------------------------------------------- entry point


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value configuration file")
    shared.add_argument("--seed", type=int, help="master seed (overrides the config)")
    shared.add_argument("--out", required=True, help="output directory")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")

    parser = _Parser(prog="nervescan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[shared], help="generate a synthetic sequence")
    p.add_argument("--num-frames", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[shared], help="train the patch classifier")
    p.add_argument("data", nargs="+", help="phantom directories with frames and ground truth")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[shared], help="scan frames for nerve patches")
    p.add_argument("model")
    p.add_argument("frames")
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("localize", parents=[shared], help="spatiotemporal localization")
    p.add_argument("detections")
    p.add_argument("--num-frames", dest="sequence_length", type=int,
                   help="sequence length (default: last detected frame + 1)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("segment", parents=[shared], help="delineate the nerve in the localized frame")
    p.add_argument("frames")
    p.add_argument("localization")
    p.add_argument("--evolve-iters", type=int)
    p.add_argument("--model", help="network for the probability-map energy term")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[shared], help="score predictions against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--localizations", help=f"per-frame localizations (default: PRED/{LOCALIZATIONS_FILE})")
    p.set_defaults(func=cmd_eval)
    return parser


def _overrides(args):
    items = list(args.set)
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    for flag, key in (("num_frames", "phantom.num_frames"), ("epochs", "train.epochs"),
                      ("stride", "detector.stride"), ("evolve_iters", "snake.evolve_iters")):
        value = getattr(args, flag, None)
        if value is not None:
            items.append(f"{key}={value}")
    return items


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        args.func(args, cfg)
    except NoNerveFound as exc:
        print(f"no nerve found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (InputFileError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NerveScanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
