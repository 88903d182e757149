"""Synthetic fixtures and the squared-vs-robust contamination benchmark.

Random numbers come from :class:`SplitMix64`, a counter-based 64-bit
shift/multiply generator (constants below), so fixtures are reproducible
independently of numpy's generators::

    z  = seed + k * 0x9E3779B97F4A7C15            (k = 1, 2, ...; mod 2**64)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Uniform doubles are ``(out >> 11) * 2**-53``; normals use Box-Muller on
consecutive pairs.
"""
from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .conic_geometry import GeometricEllipse, geometric_to_conic
from .fitting import FitConfig, LayerPointSet, fit_ellipse_robust, fit_ellipse_squared
from .preprocess import Volume

__all__ = [
    "BenchRecord",
    "SplitMix64",
    "SynthSpec",
    "bench_csv",
    "crossover_count",
    "derive_seed",
    "render_ellipsoid",
    "run_robustness_bench",
    "sample_ellipse_points",
    "sample_uniform_noise",
    "synth_stack",
    "synth_volume",
]

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit stream seed for ``(seed, *keys)``."""
    s = _mix_int(seed)
    for k in keys:
        s = _mix_int(s ^ _mix_int((int(k) + _GAMMA) & _MASK))
    return s


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.count = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.count + 1, self.count + n + 1, dtype=np.uint64)
        self.count += n
        return _mix(np.uint64(self.seed) + k * np.uint64(_GAMMA))

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        t = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(t), r * np.sin(t)])[:n]


def _rng(rng) -> SplitMix64:
    return rng if isinstance(rng, SplitMix64) else SplitMix64(rng)


def sample_ellipse_points(e: GeometricEllipse, n: int, jitter_sigma: float, rng) -> np.ndarray:
    """``n`` points at uniform parametric angles plus isotropic Gaussian jitter."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(rng)
    pts = e.boundary(rng.uniform(n, 0.0, 2.0 * np.pi))
    if jitter_sigma > 0:
        pts = pts + jitter_sigma * rng.normal(2 * n).reshape(n, 2)
    return pts


def sample_uniform_noise(count: int, interval, rng) -> np.ndarray:
    """i.i.d. uniform points on the square ``interval x interval``."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    lo, hi = interval
    return _rng(rng).uniform(2 * count, lo, hi).reshape(count, 2)


@dataclass(frozen=True)
class SynthSpec:
    truth: GeometricEllipse = GeometricEllipse((0.0, 0.0), (1.5, 0.8), 0.0)
    n_inliers: int = 50
    inlier_jitter_sigma: float = 0.0
    noise_interval: tuple = (-3.0, 3.0)
    noise_counts: tuple = tuple(range(0, 201, 10))
    seed: int = 42

    def __post_init__(self):
        lo, hi = self.noise_interval
        if not lo < hi:
            raise ValueError("noise interval must satisfy lo < hi")
        counts = list(self.noise_counts)
        if any(b < a for a, b in zip(counts, counts[1:])) or any(c < 0 for c in counts):
            raise ValueError("noise counts must be nonnegative and non-decreasing")
        if self.n_inliers < 1:
            raise ValueError("n_inliers must be >= 1")


@dataclass
class BenchRecord:
    noise_count: int
    err_squared: float
    err_robust: float
    error: str | None = None


BENCH_EPSILON = 1e-3


def _param_error(fit, truth) -> float:
    return float(np.linalg.norm(fit - truth))


def run_robustness_bench(spec: SynthSpec | None = None, cfg: FitConfig | None = None) -> list:
    """Fit squared and robust losses on inliers plus ``k`` noise points for each ``k``.

    Inliers come from the stream ``(seed, 0)`` and are shared by all rows; the
    noise for count ``k`` comes from its own stream ``(seed, 1, k)``, so each row
    is a pure function of ``(seed, k)`` and rows can run in any order.
    """
    spec = spec or SynthSpec()
    cfg = cfg or FitConfig(epsilon=BENCH_EPSILON)
    truth = geometric_to_conic(spec.truth)
    inliers = sample_ellipse_points(spec.truth, spec.n_inliers, spec.inlier_jitter_sigma,
                                    derive_seed(spec.seed, 0))
    out = []
    for k in spec.noise_counts:
        noise = sample_uniform_noise(k, spec.noise_interval, derive_seed(spec.seed, 1, k))
        pts = np.vstack([inliers, noise])
        errs = []
        msg = None
        for fitter in (fit_ellipse_squared, fit_ellipse_robust):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    errs.append(_param_error(fitter(pts, cfg), truth))
            except (ValueError, RuntimeError, ArithmeticError) as exc:
                errs.append(math.nan)
                msg = f"{fitter.__name__}: {exc}"
        out.append(BenchRecord(int(k), errs[0], errs[1], msg))
    return out


TIE_TOL = 1e-9


def crossover_count(records, tie_tol: float = TIE_TOL) -> int | None:
    """Smallest count from which on the robust error stays below the squared one.

    Rows where the errors differ by at most ``tie_tol`` (clean data, where both
    fits are exact) count as ties, not as robust wins.
    """
    c = None
    for rec in reversed(records):
        if rec.err_robust < rec.err_squared - tie_tol:
            c = rec.noise_count
        else:
            break
    return c


def _g12(v: float) -> str:
    return "ERROR" if math.isnan(v) else f"{v + 0.0:.12g}"


def bench_csv(records) -> str:
    buf = io.StringIO()
    buf.write("noise_count,err_squared,err_robust\n")
    for r in records:
        buf.write(f"{r.noise_count},{_g12(r.err_squared)},{_g12(r.err_robust)}\n")
    return buf.getvalue()


# --- volumes and stacks --------------------------------------------------------

def _grid(dims):
    nx, ny, nz = dims
    return np.arange(nx, dtype=float), np.arange(ny, dtype=float), np.arange(nz, dtype=float)


def synth_volume(blobs, dims, noise_amplitude: float = 0.0, seed: int = 0,
                 spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Sum of anisotropic Gaussians plus uniform noise in ``[-A, A]``, clamped at 0.

    ``blobs`` holds ``(center_xyz, sigma_xyz, amplitude)`` triples in voxels.
    """
    nx, ny, nz = dims
    x, y, z = _grid(dims)
    data = np.zeros((nz, ny, nx))
    for center, sigma, amp in blobs:
        cx, cy, cz = center
        if not (0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz):
            raise ValueError(f"blob center {center} outside volume {dims}")
        gx = np.exp(-0.5 * ((x - cx) / sigma[0]) ** 2)
        gy = np.exp(-0.5 * ((y - cy) / sigma[1]) ** 2)
        gz = np.exp(-0.5 * ((z - cz) / sigma[2]) ** 2)
        data += amp * gz[:, None, None] * gy[None, :, None] * gx[None, None, :]
    if noise_amplitude > 0:
        data += SplitMix64(derive_seed(seed, 0)).uniform(data.size, -noise_amplitude, noise_amplitude).reshape(data.shape)
        np.maximum(data, 0.0, out=data)
    return Volume(data, spacing)


def render_ellipsoid(dims, center, semi_axes, amplitude: float = 1.0, shell_width: float | None = None,
                     spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Axis-aligned ellipsoid, solid (indicator) or as a Gaussian-profile shell.

    For a shell, intensity is ``amplitude * exp(-((rho - 1) * r_min / w)**2 / 2)``
    with ``rho`` the ellipsoidal radius, so its ridge is the ellipsoid surface.
    """
    x, y, z = _grid(dims)
    (cx, cy, cz), (a, b, c) = center, semi_axes
    rho = np.sqrt(((z[:, None, None] - cz) / c) ** 2
                  + ((y[None, :, None] - cy) / b) ** 2
                  + ((x[None, None, :] - cx) / a) ** 2)
    if shell_width is None:
        data = amplitude * (rho <= 1.0)
    else:
        d = (rho - 1.0) * min(a, b, c) / shell_width
        data = amplitude * np.exp(-0.5 * d * d)
    return Volume(data.astype(float), spacing)


def _cross_section(semi_axes, h):
    a, b, c = semi_axes
    f = 1.0 - (h / c) ** 2
    if f <= 0:
        return None
    s = math.sqrt(f)
    return a * s, b * s


def synth_stack(center, semi_axes, z_values, points_per_layer: int, jitter: float = 0.0,
                seed: int = 0) -> list:
    """Points on the cross-section ellipses of an axis-aligned ellipsoid.

    A layer at height ``h`` from the center has semi-axes ``(a, b) * sqrt(1 - h^2/c^2)``
    and ``max(3, round(points_per_layer * sqrt(1 - h^2/c^2)))`` points (the
    circumference scales with the same factor). Layers at or beyond a pole are
    skipped.
    """
    cx, cy, cz = center
    layers = []
    for z in z_values:
        axes = _cross_section(semi_axes, z - cz)
        if axes is None:
            continue
        n = max(3, int(round(points_per_layer * axes[0] / semi_axes[0])))
        e = GeometricEllipse((cx, cy), axes, 0.0)
        pts = sample_ellipse_points(e, n, jitter, derive_seed(seed, int(round(z * 1000))))
        layers.append(LayerPointSet(int(z) if float(z).is_integer() else z, pts))
    return layers
