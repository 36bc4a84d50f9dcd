"""Glue between the stages: sequence localization and single-frame segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consistency import TrackerConfig, TrackerState
from .contour import SnakeParams, box_contour, edge_map, evolve_snake, gvf_field, snake_to_mask
from .detector import DetectorConfig, best_window, boxes_from_probs, window_probs


@dataclass
class SequenceResult:
    detections: list        # per frame: confident nerve boxes
    cnn_only: list          # per frame: single best window or None
    localizations: list     # per frame: tracker decision or None
    tracker: TrackerState


def localize_sequence(net, frames, det_cfg=None, trk_cfg=None):
    """Scan every frame and run the tracker; decisions at frame t use frames 0..t."""
    det_cfg = det_cfg or DetectorConfig()
    state = TrackerState(trk_cfg or TrackerConfig())
    state.cfg.validate()
    detections, cnn_only, locs = [], [], []
    for frame in frames:
        positions, probs = window_probs(net, frame, det_cfg)
        boxes = boxes_from_probs(positions, probs, det_cfg)
        detections.append(boxes)
        cnn_only.append(best_window(positions, probs, det_cfg))
        locs.append(state.step(boxes, det_cfg.patch_size))
    return SequenceResult(detections, cnn_only, locs, state)


def segment_frame(frame, box, params=None, prob_map=None, margin=32):
    """Delineate the nerve in ``frame`` starting from the localization ``box``.

    The snake runs on a crop around the inflated box. Returns
    ``(contour points in frame coordinates, mask, iterations)``.
    """
    p = params or SnakeParams()
    p.validate()
    frame = np.asarray(frame)
    height, width = frame.shape
    init = box_contour(box.x, box.y, box.w, box.h, p.inflate, p.init_points)
    x0 = max(int(np.floor(init[:, 0].min())) - margin, 0)
    y0 = max(int(np.floor(init[:, 1].min())) - margin, 0)
    x1 = min(int(np.ceil(init[:, 0].max())) + margin, width)
    y1 = min(int(np.ceil(init[:, 1].max())) + margin, height)
    crop = frame[y0:y1, x0:x1]
    crop_prob = None if prob_map is None else np.asarray(prob_map)[y0:y1, x0:x1]
    energy = edge_map(crop, p.smoothing_sigma, crop_prob, p.prob_weight if crop_prob is not None else 0.0)
    vf = gvf_field(energy, p.mu_gvf, p.gvf_iters)
    pts, iters = evolve_snake(init - [x0, y0], vf, p)
    pts = pts + [x0, y0]
    return pts, snake_to_mask(pts, width, height), iters
