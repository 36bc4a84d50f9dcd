"""Synthetic ultrasound-like frame sequences with exact nerve ground truth.

A sequence shows one hypoechoic elliptical nerve, ringed by a bright
epineurium band just outside the ellipse, drifting under seeded probe jitter
over a smooth tissue texture. A few short-lived nerve-like distractor blobs
and multiplicative speckle complete the picture. Every
frame draws its noise from its own child of the master seed, so frames can be
rendered in any order with identical results.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GenerationError, InvalidInputError
from .geometry import NERVE_CLASS, BACKGROUND_CLASS, RoiBox, overlap_ratio
from .pgm import write_pgm

PATCH = 64


@dataclass
class PhantomConfig:
    width: int = 600
    height: int = 300
    num_frames: int = 50
    # negative center coordinates mean "random start inside the margins"
    nerve_cx: float = -1.0
    nerve_cy: float = -1.0
    nerve_a: float = 30.0
    nerve_b: float = 20.0
    interior_intensity: float = 40.0
    rim_intensity: float = 190.0
    rim_thickness: float = 4.0
    background_intensity: float = 110.0
    texture_amplitude: float = 20.0
    jitter_sigma: float = 1.0
    distractors: int = 3
    distractor_intensity: float = 190.0
    distractor_lifetime: int = 3
    speckle_sigma: float = 0.15
    rng_seed: int = 0

    def margins(self):
        """Smallest allowed distance from the nerve center to the frame edge."""
        grow = 1.15  # semi-axes may drift up to 15 %
        rim = self.rim_thickness
        mx = max(grow * self.nerve_a + rim, PATCH / 2) + 3 * self.jitter_sigma + 1
        my = max(grow * self.nerve_b + rim, PATCH / 2) + 3 * self.jitter_sigma + 1
        return mx, my

    def validate(self):
        def need(ok, field, msg):
            if not ok:
                raise InvalidInputError(msg, field)

        need(self.width >= PATCH, "width", f"width must be at least {PATCH}")
        need(self.height >= PATCH, "height", f"height must be at least {PATCH}")
        need(self.num_frames >= 1, "num_frames", "num_frames must be positive")
        need(self.nerve_a > 0 and self.nerve_b > 0, "nerve_a", "semi-axes must be positive")
        need(self.rim_thickness >= 0, "rim_thickness", "rim_thickness must be >= 0")
        for field in ("interior_intensity", "rim_intensity", "background_intensity",
                      "distractor_intensity"):
            need(0 <= getattr(self, field) <= 255, field, f"{field} must be in [0, 255]")
        need(self.texture_amplitude >= 0, "texture_amplitude", "texture_amplitude must be >= 0")
        need(self.jitter_sigma >= 0, "jitter_sigma", "jitter_sigma must be >= 0")
        need(self.distractors >= 0, "distractors", "distractors must be >= 0")
        need(1 <= self.distractor_lifetime, "distractor_lifetime",
             "distractor_lifetime must be positive")
        need(self.speckle_sigma >= 0, "speckle_sigma", "speckle_sigma must be >= 0")
        mx, my = self.margins()
        need(self.width > 2 * mx and self.height > 2 * my, "nerve_a",
             "nerve ellipse plus jitter margin does not fit in the frame")
        for field, value, m, size in (("nerve_cx", self.nerve_cx, mx, self.width),
                                      ("nerve_cy", self.nerve_cy, my, self.height)):
            need(value < 0 or m <= value <= size - m, field,
                 f"{field}={value} leaves no room for the ellipse and jitter")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float


@dataclass
class GroundTruth:
    ellipses: list
    masks: np.ndarray  # (frames, height, width) bool
    boxes: list        # tight RoiBox per frame

    def __len__(self):
        return len(self.ellipses)


def ellipse_mask(width, height, e):
    """Pixels whose centers lie inside (or on) the ellipse."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    r = ((xs[None, :] - e.cx) / e.a) ** 2 + ((ys[:, None] - e.cy) / e.b) ** 2
    return r <= 1.0


def tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise InvalidInputError("empty mask has no bounding box")
    return RoiBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1),
                  int(rows[-1] - rows[0] + 1), 1.0, NERVE_CLASS)


def apply_speckle(values, sigma, rng):
    """Multiplicative speckle ``v * (1 + sigma * n)`` with standard normal ``n`` (unclamped)."""
    if sigma == 0:
        return np.array(values, dtype=np.float64)
    return values * (1.0 + sigma * rng.standard_normal(np.shape(values)))


def _paint_blob(img, e, interior, rim, thickness):
    """Dark ellipse ``e`` wrapped in a bright ring ``thickness`` px wide; returns the ellipse mask."""
    outer = ellipse_mask(img.shape[1], img.shape[0],
                         Ellipse(e.cx, e.cy, e.a + thickness, e.b + thickness))
    inner = ellipse_mask(img.shape[1], img.shape[0], e)
    img[outer] = rim
    img[inner] = interior
    return inner


class _Plan:
    """Everything about a sequence except per-frame speckle."""

    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        motion_ss, texture_ss, distractor_ss, frame_ss = np.random.SeedSequence(cfg.rng_seed).spawn(4)
        self.frame_seeds = frame_ss.spawn(cfg.num_frames)
        self.ellipses = self._walk(np.random.default_rng(motion_ss))
        self.texture = self._texture(np.random.default_rng(texture_ss))
        self.distractors = self._distractors(np.random.default_rng(distractor_ss))

    def _walk(self, rng):
        cfg = self.cfg
        mx, my = cfg.margins()
        cx = cfg.nerve_cx if cfg.nerve_cx >= 0 else rng.uniform(mx, cfg.width - mx)
        cy = cfg.nerve_cy if cfg.nerve_cy >= 0 else rng.uniform(my, cfg.height - my)
        a, b = cfg.nerve_a, cfg.nerve_b
        out = []
        for t in range(cfg.num_frames):
            if t > 0 and cfg.jitter_sigma > 0:
                dx, dy, da, db = rng.normal(0.0, cfg.jitter_sigma, 4)
                cx = float(np.clip(cx + dx, mx, cfg.width - mx))
                cy = float(np.clip(cy + dy, my, cfg.height - my))
                # probe tilt/rotation: slow drift of the semi-axes within +-15 %
                a = float(np.clip(a + 0.1 * da, 0.85 * cfg.nerve_a, 1.15 * cfg.nerve_a))
                b = float(np.clip(b + 0.1 * db, 0.85 * cfg.nerve_b, 1.15 * cfg.nerve_b))
            out.append(Ellipse(float(cx), float(cy), a, b))
        return out

    def _texture(self, rng):
        cfg = self.cfg
        noise = ndimage.gaussian_filter(rng.standard_normal((cfg.height, cfg.width)), 6.0)
        std = noise.std()
        if std > 0:
            noise /= std
        return cfg.background_intensity + cfg.texture_amplitude * noise

    def _distractors(self, rng):
        cfg = self.cfg
        mx, my = cfg.margins()
        life = min(cfg.distractor_lifetime, cfg.num_frames)
        placed = []
        for _ in range(cfg.distractors):
            start = int(rng.integers(0, cfg.num_frames - life + 1))
            for _attempt in range(1000):
                e = Ellipse(float(rng.uniform(mx, cfg.width - mx)),
                            float(rng.uniform(my, cfg.height - my)),
                            float(cfg.nerve_a * rng.uniform(0.85, 1.15)),
                            float(cfg.nerve_b * rng.uniform(0.85, 1.15)))
                clear = all(np.hypot(e.cx - n.cx, e.cy - n.cy) >= 2 * PATCH
                            for n in self.ellipses[start:start + life])
                if clear:
                    break
            else:
                raise GenerationError("could not place a distractor away from the nerve")
            placed.append((start, start + life, e))
        return placed

    def render(self, t):
        cfg = self.cfg
        img = self.texture.copy()
        for start, stop, e in self.distractors:
            if start <= t < stop:
                _paint_blob(img, e, cfg.interior_intensity, cfg.distractor_intensity,
                            cfg.rim_thickness)
        mask = _paint_blob(img, self.ellipses[t], cfg.interior_intensity, cfg.rim_intensity,
                           cfg.rim_thickness)
        rng = np.random.default_rng(self.frame_seeds[t])
        img = apply_speckle(img, cfg.speckle_sigma, rng)
        return np.rint(np.clip(img, 0, 255)).astype(np.uint8), mask


def generate_sequence(cfg):
    """Render all frames. Returns ``(frames, GroundTruth)``; frames is ``(F, H, W)`` uint8."""
    plan = _Plan(cfg)
    frames = np.empty((cfg.num_frames, cfg.height, cfg.width), dtype=np.uint8)
    masks = np.empty(frames.shape, dtype=bool)
    for t in range(cfg.num_frames):
        frames[t], masks[t] = plan.render(t)
    boxes = [tight_box(m) for m in masks]
    return frames, GroundTruth(plan.ellipses, masks, boxes)


def render_frame(cfg, t):
    """Render a single frame; equals ``generate_sequence(cfg)[0][t]``."""
    return _Plan(cfg).render(t)


def sample_patches(frames, gt, patch_size=PATCH, neg_per_frame=10, seed=0,
                   pos_per_frame=1, pos_shift=0):
    """Labelled training patches, scaled to [0, 1].

    The first positive of each frame is centered on the nerve; extra positives
    (``pos_per_frame > 1``) are shifted by up to ``pos_shift`` px per axis and
    still overlap the ground-truth box by at least 50 %. Negatives overlap the
    ground-truth box by less than 20 %.

    Returns ``(patches (N, 1, P, P), labels (N,), boxes)``.
    """
    frames = np.asarray(frames)
    n, height, width = frames.shape
    if patch_size > width or patch_size > height:
        raise InvalidInputError("patch does not fit in the frame")
    rng = np.random.default_rng(seed)
    patches, labels, boxes = [], [], []

    def add(t, box, label):
        patches.append(frames[t, box.y:box.y + box.h, box.x:box.x + box.w])
        labels.append(label)
        boxes.append(box)

    for t in range(n):
        e, gbox = gt.ellipses[t], gt.boxes[t]
        for k in range(pos_per_frame):
            for _attempt in range(1000):
                dx, dy = (0, 0) if k == 0 else rng.integers(-pos_shift, pos_shift + 1, 2)
                x = int(np.clip(round(e.cx - patch_size / 2) + dx, 0, width - patch_size))
                y = int(np.clip(round(e.cy - patch_size / 2) + dy, 0, height - patch_size))
                box = RoiBox(x, y, patch_size, patch_size, 1.0, NERVE_CLASS)
                if overlap_ratio(box, gbox) >= 0.5:
                    break
            else:
                raise GenerationError(f"frame {t}: no shifted positive overlaps the nerve")
            add(t, box, NERVE_CLASS)
        for _ in range(neg_per_frame):
            for _attempt in range(1000):
                x = int(rng.integers(0, width - patch_size + 1))
                y = int(rng.integers(0, height - patch_size + 1))
                box = RoiBox(x, y, patch_size, patch_size, 1.0, BACKGROUND_CLASS)
                if overlap_ratio(box, gbox) < 0.2:
                    break
            else:
                raise GenerationError(f"frame {t}: no valid negative patch after 1000 attempts")
            add(t, box, BACKGROUND_CLASS)
    x = np.stack(patches)[:, None].astype(np.float64) / 255.0
    return x, np.array(labels, dtype=np.int64), boxes


# ---------------------------------------------------------------- files


def frame_name(t):
    return f"frame_{t:05d}.pgm"


def mask_name(t):
    return f"mask_{t:05d}.pgm"


GT_FILE = "ground_truth.txt"


def format_gt_line(t, e, box):
    return f"{t},{e.cx!r},{e.cy!r},{e.a!r},{e.b!r},{box.x},{box.y},{box.w},{box.h}"


def write_sequence(out_dir, frames, gt):
    os.makedirs(out_dir, exist_ok=True)
    for t, frame in enumerate(frames):
        write_pgm(os.path.join(out_dir, frame_name(t)), frame)
        write_pgm(os.path.join(out_dir, mask_name(t)), gt.masks[t].astype(np.uint8) * 255)
    with open(os.path.join(out_dir, GT_FILE), "w") as f:
        for t, (e, box) in enumerate(zip(gt.ellipses, gt.boxes)):
            f.write(format_gt_line(t, e, box) + "\n")


def read_ground_truth(path):
    """Parse a ground-truth file into ``{frame_index: (Ellipse, RoiBox)}``."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise InvalidInputError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            t = int(parts[0])
            e = Ellipse(*map(float, parts[1:5]))
            x, y, w, h = map(int, parts[5:])
            out[t] = (e, RoiBox(x, y, w, h, 1.0, NERVE_CLASS))
    return out
