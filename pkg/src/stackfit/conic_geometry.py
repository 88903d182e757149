"""Conic and ellipse representations.

A conic is stored as a plain length-6 numpy array ``[a, b, c, d, e, f]`` for
``a*x**2 + b*x*y + c*y**2 + d*x + e*y + f = 0``. The gauge used throughout the
package is ``a + c = 1``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AffineMap2D",
    "GaugeWarning",
    "GeometricEllipse",
    "NotAnEllipse",
    "algebraic_distance",
    "conic_to_geometric",
    "geometric_to_conic",
    "is_ellipse",
    "lift_point",
    "lift_points",
    "normalize_gauge",
    "transform_conic",
    "validate_conic",
]

GAUGE_TOL = 1e-9


class NotAnEllipse(ValueError):
    """Raised when conic parameters do not describe a real, non-degenerate ellipse."""


class GaugeWarning(RuntimeWarning):
    """Emitted when a conic cannot be rescaled to ``a + c = 1``."""


@dataclass(frozen=True)
class GeometricEllipse:
    """Ellipse given by center, semi-axes and counter-clockwise rotation (radians)."""

    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float = 0.0

    def __post_init__(self):
        rx, ry = self.semi_axes
        if not (rx > 0 and ry > 0):
            raise ValueError(f"semi-axes must be strictly positive, got {self.semi_axes}")
        if not all(math.isfinite(v) for v in (*self.center, rx, ry, self.rotation)):
            raise ValueError("ellipse fields must be finite")

    def boundary(self, angles) -> np.ndarray:
        """Points on the ellipse at the given parametric angles, shape ``(n, 2)``."""
        t = np.asarray(angles, dtype=float)
        rx, ry = self.semi_axes
        cr, sr = math.cos(self.rotation), math.sin(self.rotation)
        u, v = rx * np.cos(t), ry * np.sin(t)
        x = self.center[0] + cr * u - sr * v
        y = self.center[1] + sr * u + cr * v
        return np.column_stack([x, y])


@dataclass(frozen=True)
class AffineMap2D:
    """Per-axis map ``p -> scale * p + offset``."""

    scale: tuple[float, float] = (1.0, 1.0)
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if any(s == 0 or not math.isfinite(s) for s in self.scale):
            raise ValueError(f"scale entries must be finite and nonzero, got {self.scale}")

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p * np.asarray(self.scale) + np.asarray(self.offset)

    def inverse(self) -> "AffineMap2D":
        sx, sy = self.scale
        ox, oy = self.offset
        return AffineMap2D((1.0 / sx, 1.0 / sy), (-ox / sx, -oy / sy))

    @classmethod
    def fit_box(cls, points) -> "AffineMap2D":
        """Isotropic map sending the bounding box of ``points`` into ``[-1, 1]**2``.

        The longer side of the box spans ``[-1, 1]`` exactly; a box of zero
        extent is only translated.
        """
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        lo, hi = p.min(axis=0), p.max(axis=0)
        mid = 0.5 * (lo + hi)
        half = 0.5 * float(np.max(hi - lo))
        s = 1.0 / half if half > 0 else 1.0
        return cls((s, s), (-s * mid[0], -s * mid[1]))


def validate_conic(theta) -> np.ndarray:
    t = np.asarray(theta, dtype=float).reshape(-1)
    if t.shape != (6,):
        raise ValueError(f"conic parameters must have 6 entries, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("conic parameters must be finite")
    if not np.any(t):
        raise ValueError("conic parameters must not be all zero")
    return t


def normalize_gauge(theta) -> np.ndarray:
    """Rescale so that ``a + c = 1``; raises ZeroDivisionError when ``a + c == 0``."""
    t = validate_conic(theta)
    s = t[0] + t[2]
    if abs(s) <= GAUGE_TOL * max(1.0, float(np.max(np.abs(t)))):
        raise ZeroDivisionError("a + c vanishes; conic cannot be put in the a+c=1 gauge")
    return t / s


def lift_point(p) -> np.ndarray:
    x, y = (float(v) for v in p)
    return np.array([x * x, x * y, y * y, x, y, 1.0])


def lift_points(points) -> np.ndarray:
    """Row-wise :func:`lift_point`, shape ``(n, 6)``."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    return np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])


def algebraic_distance(theta, p):
    """Signed algebraic residual of one point (float) or of an ``(n, 2)`` array."""
    t = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return float(lift_point(p) @ t)
    return lift_points(p) @ t


def is_ellipse(theta) -> bool:
    a, b, c = (float(v) for v in np.asarray(theta, dtype=float)[:3])
    return b * b - 4.0 * a * c < 0.0


def geometric_to_conic(e: GeometricEllipse) -> np.ndarray:
    cx, cy = e.center
    rx, ry = e.semi_axes
    cr, sr = math.cos(e.rotation), math.sin(e.rotation)
    # quadratic form Q = R diag(1/rx^2, 1/ry^2) R^T
    ix, iy = 1.0 / rx**2, 1.0 / ry**2
    a = cr * cr * ix + sr * sr * iy
    c = sr * sr * ix + cr * cr * iy
    b = 2.0 * cr * sr * (ix - iy)
    d = -2.0 * a * cx - b * cy
    ee = -b * cx - 2.0 * c * cy
    f = a * cx * cx + b * cx * cy + c * cy * cy - 1.0
    theta = np.array([a, b, c, d, ee, f])
    return theta / (a + c)


def conic_to_geometric(theta) -> GeometricEllipse:
    """Inverse of :func:`geometric_to_conic` in canonical form.

    The result has ``rx >= ry`` and rotation in ``[0, pi)``; circles get
    rotation 0.
    """
    t = validate_conic(theta)
    a, b, c, d, e, f = t
    if not is_ellipse(t):
        raise NotAnEllipse(f"discriminant b^2-4ac = {b * b - 4 * a * c:.6g} is not negative")
    m = np.array([[a, b / 2.0], [b / 2.0, c]])
    center = np.linalg.solve(2.0 * m, [-d, -e])
    f0 = f + 0.5 * (d * center[0] + e * center[1])
    if f0 == 0.0:
        raise NotAnEllipse("conic degenerates to a single point")
    q = m / -f0
    evals, evecs = np.linalg.eigh(q)
    if evals[0] <= 0.0:
        raise NotAnEllipse("conic has no real points (imaginary ellipse)")
    # smallest eigenvalue <-> major axis
    rx, ry = 1.0 / math.sqrt(evals[0]), 1.0 / math.sqrt(evals[1])
    if math.isclose(rx, ry, rel_tol=1e-12):
        angle = 0.0
    else:
        vx, vy = evecs[:, 0]
        angle = math.atan2(vy, vx) % math.pi
        if math.pi - angle < 1e-12:
            angle = 0.0
    return GeometricEllipse((float(center[0]), float(center[1])), (rx, ry), angle)


def transform_conic(theta, amap: AffineMap2D) -> np.ndarray:
    """Express ``theta`` in the coordinates ``q = amap(p)``.

    The returned conic vanishes at ``amap(p)`` exactly where ``theta``
    vanishes at ``p``. It is rescaled to ``a + c = 1``; if that is impossible
    a :class:`GaugeWarning` is emitted and the unnormalized vector returned.
    """
    a, b, c, d, e, f = validate_conic(theta)
    sx, sy = amap.scale
    ox, oy = amap.offset
    # p = (q - o) / s
    ax, bx = 1.0 / sx, -ox / sx
    ay, by = 1.0 / sy, -oy / sy
    out = np.array([
        a * ax * ax,
        b * ax * ay,
        c * ay * ay,
        2 * a * ax * bx + b * ax * by + d * ax,
        b * bx * ay + 2 * c * ay * by + e * ay,
        a * bx * bx + b * bx * by + c * by * by + d * bx + e * by + f,
    ])
    try:
        return normalize_gauge(out)
    except ZeroDivisionError:
        warnings.warn("a + c = 0 after transform; returning unnormalized conic", GaugeWarning, stacklevel=2)
        return out
