"""Spatial overlap clustering within a frame and temporal scoring across frames.

Within a frame, detections that overlap by at least half of the smaller box
are linked, and each connected group with more than ``T`` members becomes a
cluster. Across frames, clusters feed tracks whose score is the sum of their
matched cluster sizes over the last ``M`` frames; the best-scoring track is
the localization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from .geometry import NERVE_CLASS, RoiBox


@dataclass
class TrackerConfig:
    overlap_threshold: float = 0.5
    T: int = 3
    M: int = 10
    match_radius: float = 32.0

    def validate(self):
        if not 0 < self.overlap_threshold <= 1:
            raise InvalidInputError("overlap_threshold must be in (0, 1]", "overlap_threshold")
        if self.T < 1:
            raise InvalidInputError("T must be at least 1", "T")
        if self.M < 1:
            raise InvalidInputError("M must be at least 1", "M")
        if not self.match_radius > 0:
            raise InvalidInputError("match_radius must be positive", "match_radius")


@dataclass(frozen=True)
class Cluster:
    members: tuple
    frame_index: int = 0

    @property
    def r(self):
        return len(self.members)

    @property
    def centroid(self):
        xs = [b.x for b in self.members]
        ys = [b.y for b in self.members]
        return (sum(xs) / len(xs), sum(ys) / len(ys))


@dataclass(frozen=True)
class Track:
    """A candidate position with its per-frame cluster sizes over the window."""

    track_id: int
    position: tuple
    history: tuple = ()
    # matched centroids aligned with ``history`` (None where unmatched)
    centroids: tuple = field(default=(), compare=False)

    @property
    def f(self):
        return sum(self.history)


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # smaller index stays root so components come out in first-member order
            if rj < ri:
                ri, rj = rj, ri
            self.parent[rj] = ri


def cluster_rois(boxes, cfg=None, frame_index=0):
    """Connected components of the overlap graph, keeping those with more than T boxes.

    Clusters are ordered by their first member; members keep input order.
    """
    cfg = cfg or TrackerConfig()
    boxes = list(boxes)
    n = len(boxes)
    if n == 0:
        return []
    uf = UnionFind(n)
    xs = np.array([b.x for b in boxes])
    ys = np.array([b.y for b in boxes])
    ws = np.array([b.w for b in boxes])
    hs = np.array([b.h for b in boxes])
    for i in range(n - 1):
        j = slice(i + 1, n)
        dx = np.minimum(xs[i] + ws[i], xs[j] + ws[j]) - np.maximum(xs[i], xs[j])
        dy = np.minimum(ys[i] + hs[i], ys[j] + hs[j]) - np.maximum(ys[i], ys[j])
        inter = np.clip(dx, 0, None) * np.clip(dy, 0, None)
        smaller = np.minimum(ws[i] * hs[i], ws[j] * hs[j])
        ratio = np.divide(inter, smaller, out=np.zeros(len(inter)), where=smaller > 0)
        for k in np.flatnonzero(ratio >= cfg.overlap_threshold):
            uf.union(i, i + 1 + k)
    groups = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(boxes[i])
    return [Cluster(tuple(g), frame_index) for g in groups.values() if len(g) > cfg.T]


def _window_mean(centroids, fallback):
    pts = [c for c in centroids if c is not None]
    if not pts:
        return fallback
    return (sum(p[0] for p in pts) / len(pts), sum(p[1] for p in pts) / len(pts))


def update_tracks(tracks, clusters, cfg=None, next_id=None):
    """Advance the tracker by one frame.

    Each cluster claims the nearest unclaimed track within ``match_radius``
    (closest pairs first); leftover clusters start new tracks. Histories are
    cut to the last ``M`` frames. A track's position is the mean of its
    matched centroids inside that window. Tracks whose window holds no match
    are dropped.
    """
    cfg = cfg or TrackerConfig()
    tracks = list(tracks)
    clusters = list(clusters)
    if next_id is None:
        next_id = max((t.track_id for t in tracks), default=-1) + 1
    pairs = []
    for ci, c in enumerate(clusters):
        cx, cy = c.centroid
        for ti, t in enumerate(tracks):
            d = float(np.hypot(cx - t.position[0], cy - t.position[1]))
            if d <= cfg.match_radius:
                pairs.append((d, ti, ci))
    pairs.sort()
    track_match, cluster_match = {}, {}
    for d, ti, ci in pairs:
        if ti not in track_match and ci not in cluster_match:
            track_match[ti] = ci
            cluster_match[ci] = ti
    out = []
    for ti, t in enumerate(tracks):
        if ti in track_match:
            c = clusters[track_match[ti]]
            history = (t.history + (c.r,))[-cfg.M:]
            centroids = (t.centroids + (c.centroid,))[-cfg.M:]
        else:
            history = (t.history + (0,))[-cfg.M:]
            centroids = (t.centroids + (None,))[-cfg.M:]
        if not any(history):
            continue
        out.append(replace(t, history=history, centroids=centroids,
                           position=_window_mean(centroids, t.position)))
    for ci, c in enumerate(clusters):
        if ci not in cluster_match:
            out.append(Track(next_id, c.centroid, (c.r,), (c.centroid,)))
            next_id += 1
    return out


def localize(tracks):
    """The track with the highest score; ties go to the earliest-created track.

    Returns ``(position, f, track)`` or None when no track scores above zero.
    """
    best = None
    for t in tracks:
        if t.f <= 0:
            continue
        if best is None or t.f > best.f or (t.f == best.f and t.track_id < best.track_id):
            best = t
    if best is None:
        return None
    return best.position, best.f, best


@dataclass
class TrackerState:
    """Runs clustering, track updates and localization frame by frame."""

    cfg: TrackerConfig = field(default_factory=TrackerConfig)
    tracks: list = field(default_factory=list)
    next_id: int = 0
    frame_index: int = -1
    max_cluster: int = 0
    log: list = field(default_factory=list)

    def step(self, boxes, patch_size=64):
        """Consume one frame of detections; return that frame's localization box or None."""
        self.frame_index += 1
        clusters = cluster_rois(boxes, self.cfg, self.frame_index)
        self.max_cluster = max([self.max_cluster] + [c.r for c in clusters])
        self.tracks = update_tracks(self.tracks, clusters, self.cfg, self.next_id)
        self.next_id = max([self.next_id] + [t.track_id + 1 for t in self.tracks])
        for t in self.tracks:
            self.log.append((self.frame_index, t.track_id, t.position[0], t.position[1],
                             t.history[-1], t.f))
        return self.current_box(patch_size)

    def current_box(self, patch_size=64):
        loc = localize(self.tracks)
        if loc is None:
            return None
        (x, y), f, _ = loc
        norm = f / (self.cfg.M * self.max_cluster) if self.max_cluster else 0.0
        return RoiBox(int(round(x)), int(round(y)), patch_size, patch_size, norm, NERVE_CLASS)


def run_tracker(detections, num_frames, cfg=None, patch_size=64):
    """Per-frame localizations for frames ``0..num_frames-1``.

    ``detections`` maps frame index to its boxes (missing frames have none).
    Returns ``(localizations, state)``; the last entry is the final-frame
    decision.
    """
    state = TrackerState(cfg or TrackerConfig())
    state.cfg.validate()
    locs = []
    for t in range(num_frames):
        locs.append(state.step(detections.get(t, []), patch_size))
    return locs, state


def format_track_line(entry):
    t, tid, x, y, size, f = entry
    return f"{t},{tid},{float(x)!r},{float(y)!r},{int(size)},{int(f)}"
