"""Sliding-window patch classification with a high-confidence decision rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError
from .geometry import NERVE_CLASS, RoiBox
from .nn import Conv2D, Flatten, MaxPool2D, ReLU, predict_proba, softmax


@dataclass
class DetectorConfig:
    patch_size: int = 64
    stride: int = 8
    alpha: float = 1.8
    num_classes: int = 2
    batch_size: int = 32

    @property
    def threshold(self):
        return self.alpha / self.num_classes

    def validate(self):
        if self.patch_size < 1:
            raise InvalidInputError("patch_size must be positive", "patch_size")
        if not 1 <= self.stride <= self.patch_size:
            raise InvalidInputError("stride must be in [1, patch_size]", "stride")
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be at least 2", "num_classes")
        if not 0 < self.alpha < self.num_classes:
            raise InvalidInputError("alpha must satisfy 0 < alpha < num_classes", "alpha")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive", "batch_size")


def decide(probs, cfg=None):
    """Most probable class if its probability strictly exceeds alpha/K, else None."""
    cfg = cfg or DetectorConfig()
    probs = np.asarray(probs, dtype=np.float64)
    k = int(np.argmax(probs))
    if probs[k] > cfg.alpha / len(probs):
        return k
    return None


def window_positions(width, height, patch_size, stride):
    """Top-left corners of every window, in raster order (row-major)."""
    if width < patch_size or height < patch_size:
        raise InvalidInputError(
            f"frame {width}x{height} is smaller than the {patch_size}px patch")
    xs = range(0, width - patch_size + 1, stride)
    ys = range(0, height - patch_size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def window_probs(net, frame, cfg=None, shared=True):
    """Classify every window of ``frame``.

    Returns ``(positions, probs)`` where ``probs[i]`` is the softmax output for
    the window whose top-left corner is ``positions[i]``. With ``shared=True``
    and a stride aligned to the network's pooling grid, convolutions are
    computed once per frame and only each window's zero-padded border band is
    recomputed; results match independent per-patch evaluation.
    """
    cfg = cfg or DetectorConfig()
    cfg.validate()
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise InvalidInputError(f"frame must be 2-D, got shape {frame.shape}")
    height, width = frame.shape
    positions = window_positions(width, height, cfg.patch_size, cfg.stride)
    if shared and _shareable(net, cfg):
        return positions, _shared_probs(net, frame / 255.0, positions, cfg.patch_size,
                                        cfg.batch_size)
    p = cfg.patch_size
    views = sliding_window_view(frame, (p, p))[::cfg.stride, ::cfg.stride]
    patches = views.reshape(-1, 1, p, p)
    probs = np.empty((len(patches), net.num_classes))
    for start in range(0, len(patches), cfg.batch_size):
        chunk = patches[start:start + cfg.batch_size].astype(np.float64) / 255.0
        probs[start:start + cfg.batch_size] = predict_proba(net, chunk, cfg.batch_size)
    return positions, probs


def _feature_split(net):
    """Index of the Flatten layer if everything before it is conv/pool/relu."""
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Flatten):
            return i
        if not isinstance(layer, (Conv2D, MaxPool2D, ReLU)):
            return None
    return None


def _shareable(net, cfg):
    split = _feature_split(net)
    if split is None or net.input_shape != (1, cfg.patch_size, cfg.patch_size):
        return False
    factor = 2 ** sum(isinstance(layer, MaxPool2D) for layer in net.layers[:split])
    return cfg.stride % factor == 0


def _crop(full, ys, xs, h, w):
    return np.stack([full[0, y:y + h, x:x + w] for y, x in zip(ys, xs)])


def _shared_probs(net, img, positions, patch, batch_size):
    split = _feature_split(net)
    prefix, suffix = net.layers[:split], net.layers[split:]
    # full-frame activations entering each layer; pools drop an odd last row/col
    full = [img[None, :, :, None]]
    for layer in prefix:
        x = full[-1]
        if isinstance(layer, MaxPool2D):
            x = x[:, :x.shape[1] // 2 * 2, :x.shape[2] // 2 * 2]
        full.append(layer.forward(x))
    xs = np.array([x for x, _ in positions])
    ys = np.array([y for _, y in positions])
    out = np.empty((len(positions), net.num_classes))
    for start in range(0, len(positions), batch_size):
        bx, by = xs[start:start + batch_size], ys[start:start + batch_size]
        h = w = patch
        scale, band = 1, 0
        cur = _crop(full[0], by, bx, h, w)
        for i, layer in enumerate(prefix):
            if isinstance(layer, Conv2D):
                # outputs within `band` of the window edge see the window's own zero padding
                k = band + 1
                if 2 * k >= min(h, w):
                    cur = layer.forward(cur)
                else:
                    xp = np.pad(cur, ((0, 0), (1, 1), (1, 1), (0, 0)))
                    cur = _crop(full[i + 1], by // scale, bx // scale, h, w)
                    cur[:, :k] = layer.valid(xp[:, :k + 2])
                    cur[:, h - k:] = layer.valid(xp[:, h - k:])
                    cur[:, :, :k] = layer.valid(xp[:, :, :k + 2])
                    cur[:, :, w - k:] = layer.valid(xp[:, :, w - k:])
                band = k
            elif isinstance(layer, MaxPool2D):
                cur = layer.forward(cur)
                h, w, scale, band = h // 2, w // 2, scale * 2, -(-band // 2)
            else:
                cur = layer.forward(cur)
        for layer in suffix:
            cur = layer.forward(cur)
        out[start:start + batch_size] = softmax(cur)
    return out


def boxes_from_probs(positions, probs, cfg=None):
    """Keep windows whose confident decision is the nerve class."""
    cfg = cfg or DetectorConfig()
    out = []
    for (x, y), pr in zip(positions, probs):
        if decide(pr, cfg) == NERVE_CLASS:
            out.append(RoiBox(x, y, cfg.patch_size, cfg.patch_size, float(pr[NERVE_CLASS]),
                              NERVE_CLASS))
    return out


def scan_frame(net, frame, cfg=None):
    """Confident nerve detections of one frame, in raster order."""
    cfg = cfg or DetectorConfig()
    positions, probs = window_probs(net, frame, cfg)
    return boxes_from_probs(positions, probs, cfg)


def best_window(positions, probs, cfg=None):
    """Single-frame baseline: the most probable confident nerve window, if any.

    Ties go to the earliest window in raster order.
    """
    boxes = boxes_from_probs(positions, probs, cfg)
    if not boxes:
        return None
    return max(boxes, key=lambda b: b.prob)


def probability_map(positions, probs, width, height, patch_size=64):
    """Per-pixel mean nerve probability over all windows covering the pixel."""
    acc = np.zeros((height, width))
    cover = np.zeros((height, width))
    for (x, y), pr in zip(positions, probs):
        acc[y:y + patch_size, x:x + patch_size] += pr[NERVE_CLASS]
        cover[y:y + patch_size, x:x + patch_size] += 1
    return np.divide(acc, cover, out=np.zeros_like(acc), where=cover > 0)


# ---------------------------------------------------------------- files


def format_detection(frame_index, box):
    return f"{frame_index},{box.x},{box.y},{box.w},{box.h},{box.prob!r}"


def write_detections(path, detections):
    """``detections`` is a sequence of per-frame box lists, frame index = position."""
    with open(path, "w") as f:
        for t, boxes in enumerate(detections):
            for box in boxes:
                f.write(format_detection(t, box) + "\n")


def read_detections(path):
    """Parse a detections file into ``{frame_index: [RoiBox, ...]}`` preserving file order."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise InvalidInputError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                t, x, y, w, h = (int(v) for v in parts[:5])
                prob = float(parts[5])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: malformed detection line") from None
            out.setdefault(t, []).append(RoiBox(x, y, w, h, prob, NERVE_CLASS))
    return out
