"""Nucleus localisation in 3D volumes.

Pipeline: Gaussian smoothing at several scales, Hessian eigenvalues per
voxel, a per-scale threshold on the largest eigenvalue, a k-of-n vote across
scales, then 26-connected component labelling. Volumes are stored as numpy
arrays indexed ``data[z, y, x]`` (x varies fastest in memory).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fitting import LayerPointSet

__all__ = [
    "DetectionResult",
    "EmptyRegion",
    "ScaleConfig",
    "SeedRegion",
    "Volume",
    "combine_scales",
    "default_threshold",
    "detect",
    "extract_layer_points",
    "gaussian_kernel",
    "gaussian_smooth",
    "hessian",
    "hessian_eigenvalues",
    "label_components",
    "symmetric_eigvals2",
    "symmetric_eigvals3",
    "threshold_mask",
]


class EmptyRegion(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)  # (sx, sy, sz)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D (z, y, x), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @classmethod
    def from_flat(cls, flat, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        nx, ny, nz = dims
        flat = np.asarray(flat, dtype=float)
        if flat.size != nx * ny * nz:
            raise ValueError(f"expected {nx * ny * nz} samples, got {flat.size}")
        return cls(flat.reshape(nz, ny, nx), spacing)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class ScaleConfig:
    """Detection parameters. ``sigmas`` are per-axis ``(sx, sy, sz)`` in voxels.

    ``eig_threshold=None`` selects :func:`default_threshold` per scale and
    ``vote_min=None`` a majority vote.
    """

    sigmas: tuple = ((1.0, 1.0, 1.0), (2.0, 2.0, 2.0), (3.0, 3.0, 3.0))
    eig_threshold: float | None = None
    vote_min: int | None = None
    min_voxels: int = 10
    bbox_margin: int = 2

    def __post_init__(self):
        sig = tuple(tuple(float(v) for v in s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        if not sig or any(len(s) != 3 or min(s) <= 0 for s in sig):
            raise ValueError("sigmas must be a non-empty list of positive 3-vectors")
        if self.eig_threshold is not None and not self.eig_threshold < 0:
            raise ValueError("eig_threshold must be negative")
        if not 1 <= self.votes <= len(sig):
            raise ValueError(f"vote_min must lie in [1, {len(sig)}], got {self.vote_min}")
        if self.min_voxels < 1 or self.bbox_margin < 0:
            raise ValueError("min_voxels must be >= 1 and bbox_margin >= 0")

    @property
    def votes(self) -> int:
        return math.ceil(len(self.sigmas) / 2) if self.vote_min is None else int(self.vote_min)


@dataclass(frozen=True)
class SeedRegion:
    label: int
    bbox: tuple  # ((x0, x1), (y0, y1), (z0, z1)), inclusive
    centroid: tuple  # (x, y, z) in voxels
    voxel_count: int


# --- smoothing ---------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ``ceil(4 sigma)``, normalised to unit sum."""
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Volume, sigma) -> Volume:
    """Separable Gaussian filter, ``sigma = (sx, sy, sz)`` in voxels, mirrored borders."""
    out = v.data
    for axis, s in zip((2, 1, 0), sigma):
        if s <= 0:
            raise ValueError("sigma entries must be positive")
        out = ndimage.correlate1d(out, gaussian_kernel(s), axis=axis, mode="reflect")
    return Volume(out, v.spacing)


# --- Hessian ---------------------------------------------------------------

def _second_diff(f, axis, h):
    n = f.shape[axis]
    if n < 3:
        return np.zeros_like(f)
    f = np.moveaxis(f, axis, 0)
    d = np.empty_like(f)
    d[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    d[0] = f[0] - 2.0 * f[1] + f[2]
    d[-1] = f[-1] - 2.0 * f[-2] + f[-3]
    return np.moveaxis(d / (h * h), 0, axis)


def _cross_diff(f, ax1, h1, ax2, h2):
    if f.shape[ax1] < 2 or f.shape[ax2] < 2:
        return np.zeros_like(f)
    e1 = 2 if f.shape[ax1] >= 3 else 1
    e2 = 2 if f.shape[ax2] >= 3 else 1
    g = np.gradient(f, h1, axis=ax1, edge_order=e1)
    return np.gradient(g, h2, axis=ax2, edge_order=e2)


def hessian(v: Volume) -> dict:
    """Second derivatives keyed ``'xx', 'yy', 'zz', 'xy', 'xz', 'yz'`` (physical units)."""
    f = v.data
    sx, sy, sz = v.spacing
    ax = {"x": (2, sx), "y": (1, sy), "z": (0, sz)}
    H = {}
    for k in "xyz":
        H[k + k] = _second_diff(f, *ax[k])
    for a, b in ("xy", "xz", "yz"):
        H[a + b] = _cross_diff(f, *ax[a], *ax[b])
    return H


def symmetric_eigvals3(a11, a22, a33, a12, a13, a23) -> np.ndarray:
    """Ascending eigenvalues of symmetric 3x3 matrices, closed-form trigonometric method."""
    a11, a22, a33, a12, a13, a23 = np.broadcast_arrays(
        *(np.asarray(t, dtype=float) for t in (a11, a22, a33, a12, a13, a23)))
    p1 = a12**2 + a13**2 + a23**2
    q = (a11 + a22 + a33) / 3.0
    b11, b22, b33 = a11 - q, a22 - q, a33 - q
    p2 = b11**2 + b22**2 + b33**2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    c11, c22, c33 = b11 / safe, b22 / safe, b33 / safe
    c12, c13, c23 = a12 / safe, a13 / safe, a23 / safe
    det = (c11 * (c22 * c33 - c23 * c23)
           - c12 * (c12 * c33 - c23 * c13)
           + c13 * (c12 * c23 - c22 * c13))
    r = np.clip(det / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    hi = q + 2.0 * p * np.cos(phi)
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    out = np.stack([lo, mid, hi], axis=-1)
    out[p == 0] = q[p == 0][..., None]
    return np.sort(out, axis=-1)


def symmetric_eigvals2(a11, a22, a12) -> np.ndarray:
    a11, a22, a12 = np.broadcast_arrays(*(np.asarray(t, dtype=float) for t in (a11, a22, a12)))
    m = 0.5 * (a11 + a22)
    r = np.hypot(0.5 * (a11 - a22), a12)
    return np.stack([m - r, m + r], axis=-1)


def hessian_eigenvalues(v: Volume) -> np.ndarray:
    """Per-voxel Hessian eigenvalues, ascending along the last axis.

    Shape ``(nz, ny, nx, 3)``; a single-slice volume yields the in-plane
    ``2 x 2`` Hessian and a trailing axis of length 2.
    """
    H = hessian(v)
    if v.data.shape[0] == 1:
        return symmetric_eigvals2(H["xx"], H["yy"], H["xy"])
    return symmetric_eigvals3(H["xx"], H["yy"], H["zz"], H["xy"], H["xz"], H["yz"])


def threshold_mask(eigs, tau: float) -> np.ndarray:
    """Foreground where the largest eigenvalue is below ``tau < 0``."""
    if not tau < 0:
        raise ValueError("tau must be negative")
    return np.asarray(eigs)[..., -1] < tau


def combine_scales(masks, vote_min: int) -> np.ndarray:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not 1 <= vote_min <= len(masks):
        raise ValueError(f"vote_min must lie in [1, {len(masks)}]")
    return np.sum(masks, axis=0) >= vote_min


def default_threshold(v: Volume, sigma) -> float:
    """``-0.01 * intensity range / (smallest physical sigma)**2``."""
    rng = float(v.data.max() - v.data.min())
    s = min(si * hi for si, hi in zip(sigma, v.spacing))
    return -0.01 * max(rng, np.finfo(float).tiny) / (s * s)


# --- connected components ----------------------------------------------------

_HALF_NEIGHBOURS = [(dz, dy, dx)
                    for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                    if (dz, dy, dx) > (0, 0, 0)]


def _shift_slices(offset, shape):
    src, dst = [], []
    for o, n in zip(offset, shape):
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    return tuple(src), tuple(dst)


def _components(mask: np.ndarray):
    """Union-find over 26-neighbour edges. Returns (flat foreground index, root position)."""
    fg = np.flatnonzero(mask)
    pos = np.full(mask.size, -1, dtype=np.int64)
    pos[fg] = np.arange(fg.size)
    pos = pos.reshape(mask.shape)
    us, vs = [], []
    for off in _HALF_NEIGHBOURS:
        src, dst = _shift_slices(off, mask.shape)
        both = mask[src] & mask[dst]
        if both.any():
            us.append(pos[src][both])
            vs.append(pos[dst][both])
    parent = np.arange(fg.size)
    if us:
        u, w = np.concatenate(us), np.concatenate(vs)
        while True:
            pu, pw = parent[u], parent[w]
            diff = pu != pw
            if not diff.any():
                break
            # hook the larger root under the smaller one, then flatten
            np.minimum.at(parent, np.maximum(pu[diff], pw[diff]), np.minimum(pu[diff], pw[diff]))
            while True:
                nxt = parent[parent]
                if np.array_equal(nxt, parent):
                    break
                parent = nxt
    return fg, parent


def label_components(mask, min_voxels: int = 1, bbox_margin: int = 0):
    """26-connected labelling of a ``(z, y, x)`` mask.

    Components smaller than ``min_voxels`` are dropped; the rest are numbered
    ``1..K`` by decreasing size (ties by first voxel in memory order).
    Returns ``(labels, regions)``.
    """
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int32)
    fg, root = _components(mask)
    if fg.size == 0:
        return labels, []
    roots, inverse, counts = np.unique(root, return_inverse=True, return_counts=True)
    order = np.lexsort((roots, -counts))  # roots are the smallest member position
    new = np.zeros(roots.size, dtype=np.int32)
    regions = []
    nz, ny, nx = mask.shape
    zz, yy, xx = np.unravel_index(fg, mask.shape)
    k = 0
    for comp in order:
        if counts[comp] < min_voxels:
            continue
        k += 1
        new[comp] = k
    lab = new[inverse]
    labels.reshape(-1)[fg] = lab
    for comp in order:
        if new[comp] == 0:
            continue
        sel = lab == new[comp]
        x, y, z = xx[sel], yy[sel], zz[sel]
        m = bbox_margin
        bbox = ((max(0, int(x.min()) - m), min(nx - 1, int(x.max()) + m)),
                (max(0, int(y.min()) - m), min(ny - 1, int(y.max()) + m)),
                (max(0, int(z.min()) - m), min(nz - 1, int(z.max()) + m)))
        regions.append(SeedRegion(int(new[comp]), bbox, (float(x.mean()), float(y.mean()), float(z.mean())),
                                  int(counts[comp])))
    return labels, regions


# --- pipeline ----------------------------------------------------------------

@dataclass
class DetectionResult:
    labels: np.ndarray
    regions: list
    scale_masks: list = field(default_factory=list)
    combined: np.ndarray | None = None
    thresholds: list = field(default_factory=list)


def detect(v: Volume, cfg: ScaleConfig | None = None) -> DetectionResult:
    """Run smoothing, eigenvalue thresholding, voting and labelling."""
    cfg = cfg or ScaleConfig()
    masks, taus = [], []
    for sigma in cfg.sigmas:
        sm = gaussian_smooth(v, sigma)
        tau = cfg.eig_threshold if cfg.eig_threshold is not None else default_threshold(v, sigma)
        masks.append(threshold_mask(hessian_eigenvalues(sm), tau))
        taus.append(tau)
    combined = combine_scales(masks, cfg.votes)
    labels, regions = label_components(combined, cfg.min_voxels, cfg.bbox_margin)
    return DetectionResult(labels, regions, masks, combined, taus)


def subsample_by_angle(points, k: int) -> np.ndarray:
    """At most ``k`` points, evenly spaced in polar angle about the centroid.

    Deterministic; keeps angular coverage of a ring while bounding LP size.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) <= k:
        return p
    d = p - p.mean(axis=0)
    order = np.lexsort((np.hypot(d[:, 0], d[:, 1]), np.arctan2(d[:, 1], d[:, 0])))
    pick = (np.arange(k) * len(p)) // k
    return p[order[pick]]


def extract_layer_points(v: Volume, region: SeedRegion, intensity_quantile: float = 0.5,
                         max_points: int | None = None) -> list:
    """Per z-slice ``(x, y)`` voxel coordinates brighter than the bbox quantile.

    The comparison is strict, so a constant box yields no points. With
    ``max_points`` each layer is thinned by :func:`subsample_by_angle`.
    """
    if not 0 < intensity_quantile < 1:
        raise ValueError("intensity_quantile must lie in (0, 1)")
    if max_points is not None and max_points < 1:
        raise ValueError("max_points must be >= 1")
    (x0, x1), (y0, y1), (z0, z1) = region.bbox
    nx, ny, nz = v.dims
    if not (0 <= x0 <= x1 < nx and 0 <= y0 <= y1 < ny and 0 <= z0 <= z1 < nz):
        raise ValueError(f"region bbox {region.bbox} outside volume {v.dims}")
    sub = v.data[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1]
    thr = np.quantile(sub, intensity_quantile)
    layers = []
    for dz in range(sub.shape[0]):
        iy, ix = np.nonzero(sub[dz] > thr)
        if ix.size:
            pts = np.column_stack([x0 + ix, y0 + iy]).astype(float)
            if max_points is not None:
                pts = subsample_by_angle(pts, max_points)
            layers.append(LayerPointSet(z0 + dz, pts))
    if not layers:
        raise EmptyRegion(f"no voxel of region {region.label} exceeds the {intensity_quantile} quantile")
    return layers
