"""Gradient vector flow snakes.

Coordinates are continuous ``(x, y)`` with pixel ``(row r, col c)`` covering
``[c, c+1) x [r, r+1)``; its center is ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateSnakeError, InvalidInputError

MIN_POINTS = 8


@dataclass
class SnakeParams:
    alpha_elastic: float = 0.05
    beta_rigid: float = 0.01
    gamma_step: float = 1.0
    field_weight: float = 4.0
    mu_gvf: float = 0.2
    gvf_iters: int = 400
    evolve_iters: int = 500
    resample_spacing: float = 4.0
    smoothing_sigma: float = 2.0
    prob_weight: float = 0.0
    inflate: float = 0.2
    init_points: int = 40
    tolerance: float = 0.05

    def validate(self):
        checks = [
            ("alpha_elastic", self.alpha_elastic >= 0),
            ("beta_rigid", self.beta_rigid >= 0),
            ("gamma_step", self.gamma_step > 0),
            ("field_weight", self.field_weight > 0),
            ("mu_gvf", self.mu_gvf > 0),
            ("gvf_iters", self.gvf_iters >= 0),
            ("evolve_iters", self.evolve_iters >= 0),
            ("resample_spacing", self.resample_spacing > 0),
            ("smoothing_sigma", self.smoothing_sigma >= 0),
            ("prob_weight", 0 <= self.prob_weight <= 1),
            ("inflate", self.inflate > -1),
            ("init_points", self.init_points >= MIN_POINTS),
            ("tolerance", self.tolerance > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise InvalidInputError(f"invalid value for {name}: {getattr(self, name)!r}", name)
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite", name)


@dataclass
class VectorField:
    u: np.ndarray
    v: np.ndarray
    residuals: list = field(default_factory=list)

    @property
    def shape(self):
        return self.u.shape


def central_gradient(img):
    """Central differences with replicated borders; returns ``(d/dx, d/dy)``."""
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return gx, gy


def edge_map(frame, smoothing_sigma=2.0, prob_map=None, weight=0.0):
    """External energy: normalized squared gradient of the smoothed frame,
    optionally blended with a per-pixel probability map.

    ``energy = (1 - weight) * |grad(G_sigma * I)|^2 / max + weight * prob_map``
    """
    img = np.asarray(frame, dtype=np.float64)
    if smoothing_sigma < 0:
        raise InvalidInputError("smoothing_sigma must be >= 0")
    if not 0 <= weight <= 1:
        raise InvalidInputError("weight must be in [0, 1]")
    if prob_map is None and weight != 0:
        raise InvalidInputError("a blend weight needs a probability map")
    if prob_map is not None:
        prob_map = np.asarray(prob_map, dtype=np.float64)
        if prob_map.shape != img.shape:
            raise InvalidInputError(
                f"probability map shape {prob_map.shape} does not match frame {img.shape}")
    if weight == 1:
        return prob_map.copy()
    smooth = ndimage.gaussian_filter(img, smoothing_sigma, mode="nearest") if smoothing_sigma else img
    gx, gy = central_gradient(smooth)
    g = gx * gx + gy * gy
    top = g.max()
    if top > 0:
        g /= top
    if prob_map is None:
        return g
    return (1.0 - weight) * g + weight * prob_map


def _laplacian(f):
    p = np.pad(f, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * f


def gvf_field(e, mu=0.2, iters=400, dt=1.0):
    """Diffuse the edge-map gradient into a gradient vector flow field.

    Explicit iteration of ``u <- u + dt (mu lap(u) - (u - e_x)|grad e|^2)``
    (same for ``v``) starting from ``(e_x, e_y)``. The max absolute update of
    each iteration is kept in ``residuals``.
    """
    e = np.asarray(e, dtype=np.float64)
    if not mu > 0:
        raise InvalidInputError("mu must be positive")
    if iters < 0:
        raise InvalidInputError("iters must be >= 0")
    if not 0 < dt <= 1.0 / (4.0 * mu):
        raise InvalidInputError(f"time step {dt} is unstable for mu={mu}; need dt <= {1 / (4 * mu)}")
    fx, fy = central_gradient(e)
    mag = fx * fx + fy * fy
    u, v = fx.copy(), fy.copy()
    residuals = []
    for _ in range(iters):
        du = dt * (mu * _laplacian(u) - (u - fx) * mag)
        dv = dt * (mu * _laplacian(v) - (v - fy) * mag)
        u = u + du
        v = v + dv
        residuals.append(float(max(np.abs(du).max(), np.abs(dv).max())))
    return VectorField(u, v, residuals)


# ---------------------------------------------------------------- snake


def polygon_area(points):
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def resample_closed(points, n):
    """``n`` vertices evenly spaced by arc length along the closed polygon."""
    pts = np.asarray(points, dtype=np.float64)
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        raise DegenerateSnakeError("contour has zero length")
    t = np.arange(n) * total / n
    return np.column_stack([np.interp(t, s, closed[:, 0]), np.interp(t, s, closed[:, 1])])


def box_contour(x, y, w, h, inflate=0.2, n=40):
    """Closed contour on the border of a box grown by ``inflate`` about its center."""
    cx, cy = x + w / 2.0, y + h / 2.0
    hw, hh = w * (1 + inflate) / 2.0, h * (1 + inflate) / 2.0
    corners = np.array([[cx - hw, cy - hh], [cx + hw, cy - hh], [cx + hw, cy + hh], [cx - hw, cy + hh]])
    return resample_closed(corners, n)


def _implicit_inverse(n, alpha, beta, dt):
    """Inverse of ``I + dt * A``, A the cyclic pentadiagonal tension/rigidity matrix."""
    c0 = 1 + dt * (2 * alpha + 6 * beta)
    c1 = dt * (-alpha - 4 * beta)
    c2 = dt * beta
    idx = np.arange(n)
    m = np.zeros((n, n))
    for off, c in ((0, c0), (1, c1), (-1, c1), (2, c2), (-2, c2)):
        m[idx, (idx + off) % n] += c
    return np.linalg.inv(m)


def sample_field(vf, points):
    coords = [points[:, 1] - 0.5, points[:, 0] - 0.5]
    fu = ndimage.map_coordinates(vf.u, coords, order=1, mode="nearest")
    fv = ndimage.map_coordinates(vf.v, coords, order=1, mode="nearest")
    return np.column_stack([fu, fv])


def evolve_snake(points, vf, p=None):
    """Evolve a closed contour under internal forces and the vector field.

    Semi-implicit in the tension/rigidity terms. Stops when the mean vertex
    displacement drops below ``p.tolerance`` or after ``p.evolve_iters``
    steps; vertices are respaced every 10 steps. Returns ``(points, iterations)``.
    """
    p = p or SnakeParams()
    pts = np.array(points, dtype=np.float64)
    if len(pts) < MIN_POINTS or len(np.unique(pts.round(9), axis=0)) < MIN_POINTS:
        raise DegenerateSnakeError(f"snake needs at least {MIN_POINTS} distinct points")
    height, width = vf.shape
    inv = _implicit_inverse(len(pts), p.alpha_elastic, p.beta_rigid, p.gamma_step)
    it = 0
    while it < p.evolve_iters:
        it += 1
        force = p.field_weight * sample_field(vf, pts)
        new = inv @ (pts + p.gamma_step * force)
        new[:, 0] = np.clip(new[:, 0], 0.0, width)
        new[:, 1] = np.clip(new[:, 1], 0.0, height)
        moved = float(np.mean(np.hypot(*(new - pts).T)))
        pts = new
        if moved < p.tolerance:
            break
        if it % 10 == 0:
            perimeter = float(np.sum(np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)))
            n = int(round(perimeter / p.resample_spacing))
            if n < MIN_POINTS:
                raise DegenerateSnakeError(
                    f"snake collapsed to perimeter {perimeter:.2f}px after {it} iterations")
            if n != len(pts):
                inv = _implicit_inverse(n, p.alpha_elastic, p.beta_rigid, p.gamma_step)
            pts = resample_closed(pts, n)
    return pts, it


def snake_to_mask(points, width, height):
    """Pixels whose centers are inside the closed polygon (even-odd rule)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return np.zeros((height, width), dtype=bool)
    xc = np.arange(width) + 0.5
    yc = np.arange(height) + 0.5
    # +1 at column 0 and -1 at column k marks the centers left of a crossing
    diff = np.zeros((height, width + 1), dtype=np.int64)
    for k in range(len(pts)):
        x0, y0 = pts[k]
        x1, y1 = pts[(k + 1) % len(pts)]
        rows = np.flatnonzero((y0 > yc) != (y1 > yc))
        if len(rows) == 0:
            continue
        xi = x0 + (yc[rows] - y0) * (x1 - x0) / (y1 - y0)
        count = np.searchsorted(xc, xi, side="left")
        diff[rows, 0] += 1
        np.add.at(diff, (rows, count), -1)
    return (np.cumsum(diff[:, :width], axis=1) % 2).astype(bool)
