"""Ellipse, circle and ellipse-stack fitting on algebraic residuals.

The robust fits minimise the dead-zone loss ``max(|x.theta| - eps, 0)`` summed
over lifted points, written as a linear program. Stacks of layers are fitted
jointly with an L1 penalty on the parameter change between consecutive
layers. Every fit works in a normalised frame (see
:meth:`AffineMap2D.fit_box`) and reports conics back in the input frame, all
in the ``a + c = 1`` gauge.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .conic_geometry import (
    AffineMap2D,
    GeometricEllipse,
    NotAnEllipse,
    conic_to_geometric,
    lift_points,
    transform_conic,
)
from .optimization import (
    EQ,
    LE,
    LinearProgram,
    LpStatus,
    SingularSystem,
    SolverConfig,
    solve,
    solve_linear_eq_constrained_lsq,
)

__all__ = [
    "DegeneratePoints",
    "EmptyLayer",
    "FitConfig",
    "ImaginaryCircle",
    "InternalError",
    "LayerPointSet",
    "NotAnEllipseWarning",
    "StackFitResult",
    "build_robust_lp",
    "epsilon_insensitive_loss",
    "fit_circle_robust",
    "fit_ellipse_robust",
    "fit_ellipse_squared",
    "fit_stack",
    "fit_stack_robust",
    "fit_stack_squared",
]

D = 6
GAUGE = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 0.0])


class DegeneratePoints(ValueError):
    pass


class EmptyLayer(ValueError):
    pass


class ImaginaryCircle(ValueError):
    pass


class InternalError(RuntimeError):
    """The solver reported a status the fitting LP cannot legitimately have."""


class NotAnEllipseWarning(UserWarning):
    pass


@dataclass
class LayerPointSet:
    layer_index: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"layer {self.layer_index}: points must be finite")


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 0.1
    lam: float = 1.0
    normalize_coords: bool = True
    loss: str = "robust"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        for name in ("epsilon", "lam"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.loss not in ("robust", "squared"):
            raise ValueError(f"loss must be 'robust' or 'squared', got {self.loss!r}")


@dataclass
class StackFitResult:
    layer_indices: list
    conics: list  # input frame, a+c=1
    conics_normalized: list
    ellipses: list  # GeometricEllipse or None
    losses: list  # per-layer loss in the normalised frame
    objective_value: float
    status: LpStatus
    iterations: int
    coord_map: AffineMap2D

    @property
    def is_ellipse(self) -> list:
        return [e is not None for e in self.ellipses]

    def coupling_l1(self) -> np.ndarray:
        """``||theta_t - theta_{t+1}||_1`` for consecutive layers (normalised frame)."""
        th = np.array(self.conics_normalized)
        if len(th) < 2:
            return np.zeros(0)
        return np.abs(np.diff(th, axis=0)).sum(axis=1)


def epsilon_insensitive_loss(r, epsilon: float):
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    out = np.maximum(np.abs(r) - epsilon, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def _as_layers(layers) -> list:
    layers = [l if isinstance(l, LayerPointSet) else LayerPointSet(*l) for l in layers]
    if not layers:
        raise EmptyLayer("need at least one layer")
    idx = [l.layer_index for l in layers]
    if len(set(idx)) != len(idx):
        raise ValueError("layer indices must be unique")
    for l in layers:
        if len(l.points) == 0:
            raise EmptyLayer(f"layer {l.layer_index} has no points")
    return sorted(layers, key=lambda l: l.layer_index)


def _frame(points, cfg: FitConfig) -> AffineMap2D:
    return AffineMap2D.fit_box(points) if cfg.normalize_coords else AffineMap2D()


def _to_ellipse(theta):
    try:
        return conic_to_geometric(theta)
    except (NotAnEllipse, np.linalg.LinAlgError):
        return None


class _Layout:
    """Column indices of the stacked robust LP."""

    def __init__(self, counts):
        self.M = len(counts)
        self.counts = list(counts)
        self.N = int(sum(counts))
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.s0 = D * self.M
        self.t0 = self.s0 + self.N
        self.u0 = self.t0 + self.N
        self.n = self.u0 + D * (self.M - 1)

    def theta(self, t):
        return slice(D * t, D * (t + 1))


def _assemble(norm_layers, cfg: FitConfig, extra_eq=()):
    """Build the LP for already-normalised point arrays."""
    lay = _Layout([len(p) for p in norm_layers])
    M, N, n = lay.M, lay.N, lay.n
    n_rows = 3 * N + 2 * D * (M - 1) + M * (1 + len(extra_eq))
    A = np.zeros((n_rows, n))
    rhs = np.zeros(n_rows)
    senses = [LE] * n_rows

    r = 0
    for t, pts in enumerate(norm_layers):
        X = lift_points(pts)
        k = len(pts)
        i = lay.offsets[t] + np.arange(k)
        rows = r + np.arange(k)
        A[rows, lay.theta(t)] = X
        A[rows, lay.s0 + i] = -1.0
        A[rows + k, lay.theta(t)] = -X
        A[rows + k, lay.s0 + i] = -1.0
        A[rows + 2 * k, lay.s0 + i] = 1.0
        A[rows + 2 * k, lay.t0 + i] = -1.0
        rhs[rows + 2 * k] = cfg.epsilon
        r += 3 * k
    for t in range(M - 1):
        for j in range(D):
            u = lay.u0 + D * t + j
            A[r, D * t + j], A[r, D * (t + 1) + j], A[r, u] = 1.0, -1.0, -1.0
            A[r + 1, D * t + j], A[r + 1, D * (t + 1) + j], A[r + 1, u] = -1.0, 1.0, -1.0
            r += 2
    for t in range(M):
        for g, g_rhs in ((GAUGE, 1.0), *extra_eq):
            A[r, lay.theta(t)] = g
            rhs[r] = g_rhs
            senses[r] = EQ
            r += 1

    c = np.zeros(n)
    c[lay.t0:lay.u0] = 1.0
    c[lay.u0:] = cfg.lam
    lower = np.zeros(n)
    lower[: lay.s0] = -np.inf
    names = [f"th{t}_{j}" for t in range(M) for j in "abcdef"]
    names += [f"s{i}" for i in range(N)] + [f"t{i}" for i in range(N)]
    names += [f"u{t}_{j}" for t in range(M - 1) for j in "abcdef"]
    return LinearProgram(c, A, senses, rhs, lower, None, names), lay


def build_robust_lp(layers, cfg: FitConfig | None = None) -> LinearProgram:
    """The joint robust stack LP, with points mapped into the fitting frame.

    Variables are ordered ``theta`` blocks (6 per layer, free), one ``s`` per
    point, one ``t`` per point, then 6 ``u`` per consecutive layer pair. ``s``
    carries a redundant lower bound of zero.
    """
    cfg = cfg or FitConfig()
    layers = _as_layers(layers)
    amap = _frame(np.vstack([l.points for l in layers]), cfg)
    lp, _ = _assemble([amap(l.points) for l in layers], cfg)
    return lp


def _solve_robust(layers, cfg: FitConfig, extra_eq=()):
    amap = _frame(np.vstack([l.points for l in layers]), cfg)
    norm = [amap(l.points) for l in layers]
    lp, lay = _assemble(norm, cfg, extra_eq)
    sol = solve(lp, cfg.solver)
    if sol.status is not LpStatus.OPTIMAL:
        raise InternalError(f"robust fit LP returned {sol.status.value} after {sol.iterations} iterations")
    thetas = [sol.x[lay.theta(t)] for t in range(lay.M)]
    return amap, norm, thetas, sol


def fit_stack_robust(layers, cfg: FitConfig | None = None) -> StackFitResult:
    """Jointly fit one ellipse per layer with the graph-regularised robust LP."""
    cfg = cfg or FitConfig()
    layers = _as_layers(layers)
    amap, norm, thetas, sol = _solve_robust(layers, cfg)
    back = amap.inverse()
    conics = [transform_conic(th, back) for th in thetas]
    losses = [float(np.sum(epsilon_insensitive_loss(lift_points(p) @ th, cfg.epsilon)))
              for p, th in zip(norm, thetas)]
    return StackFitResult(
        layer_indices=[l.layer_index for l in layers],
        conics=conics,
        conics_normalized=thetas,
        ellipses=[_to_ellipse(c) for c in conics],
        losses=losses,
        objective_value=sol.objective_value,
        status=sol.status,
        iterations=sol.iterations,
        coord_map=amap,
    )


def fit_ellipse_robust(points, cfg: FitConfig | None = None) -> np.ndarray:
    res = fit_stack_robust([LayerPointSet(0, points)], cfg)
    if not res.is_ellipse[0]:
        warnings.warn("robust fit is not a real ellipse", NotAnEllipseWarning, stacklevel=2)
    return res.conics[0]


def _squared_normalized(pts) -> np.ndarray:
    try:
        return solve_linear_eq_constrained_lsq(lift_points(pts), (GAUGE, 1.0))
    except SingularSystem as exc:
        raise DegeneratePoints(f"points do not determine a unique conic: {exc}") from None


def fit_ellipse_squared(points, cfg: FitConfig | None = None) -> np.ndarray:
    """Least-squares algebraic fit with the ``a + c = 1`` constraint."""
    cfg = cfg or FitConfig(loss="squared")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 5:
        raise DegeneratePoints(f"squared fit needs at least 5 points, got {len(pts)}")
    amap = _frame(pts, cfg)
    theta = transform_conic(_squared_normalized(amap(pts)), amap.inverse())
    if _to_ellipse(theta) is None:
        warnings.warn("squared fit is not a real ellipse", NotAnEllipseWarning, stacklevel=2)
    return theta


def fit_stack_squared(layers, cfg: FitConfig | None = None) -> StackFitResult:
    """Independent squared-loss fits per layer, sharing one normalisation frame."""
    cfg = cfg or FitConfig(loss="squared")
    layers = _as_layers(layers)
    for l in layers:
        if len(l.points) < 5:
            raise DegeneratePoints(f"layer {l.layer_index}: squared fit needs at least 5 points")
    amap = _frame(np.vstack([l.points for l in layers]), cfg)
    norm = [amap(l.points) for l in layers]
    thetas = [_squared_normalized(p) for p in norm]
    back = amap.inverse()
    conics = [transform_conic(th, back) for th in thetas]
    losses = [float(np.sum((lift_points(p) @ th) ** 2)) for p, th in zip(norm, thetas)]
    return StackFitResult(
        layer_indices=[l.layer_index for l in layers],
        conics=conics,
        conics_normalized=thetas,
        ellipses=[_to_ellipse(c) for c in conics],
        losses=losses,
        objective_value=float(sum(losses)),
        status=LpStatus.OPTIMAL,
        iterations=0,
        coord_map=amap,
    )


def fit_stack(layers, cfg: FitConfig | None = None) -> StackFitResult:
    cfg = cfg or FitConfig()
    return fit_stack_robust(layers, cfg) if cfg.loss == "robust" else fit_stack_squared(layers, cfg)


def fit_circle_robust(points, cfg: FitConfig | None = None):
    """Robust circle fit: the ellipse LP restricted to ``b = 0`` and ``a = c``.

    Returns ``(center, radius)`` in the input frame.
    """
    cfg = cfg or FitConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise DegeneratePoints(f"circle fit needs at least 3 points, got {len(pts)}")
    extra = (
        (np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]), 0.0),
        (np.array([1.0, 0.0, -1.0, 0.0, 0.0, 0.0]), 0.0),
    )
    amap, _, thetas, _ = _solve_robust([LayerPointSet(0, pts)], cfg, extra)
    a, _, _, d, e, f = transform_conic(thetas[0], amap.inverse())
    center = np.array([-d / (2 * a), -e / (2 * a)])
    r2 = center @ center - f / a
    if not r2 > 0:
        raise ImaginaryCircle(f"fitted circle has squared radius {r2:.6g}")
    return center, float(np.sqrt(r2))
