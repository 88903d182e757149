"""Command-line front end: ``stackfit {preprocess,fit,bench-robust,synth}``.

Every option can also come from a ``--config`` file of ``key: value`` lines
(keys are option names with ``-`` or ``_``); flags given on the command line
win over the file. Diagnostics go to stderr, machine-readable summaries to
stdout.

Exit codes: 0 success, 2 usage or input error, 3 empty detection,
4 internal solver failure.
"""
from __future__ import annotations

import argparse
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .conic_geometry import GeometricEllipse
from .fitting import DegeneratePoints, EmptyLayer, FitConfig, InternalError, LayerPointSet, fit_stack
from .imageio import (
    VolumeMeta,
    atomic_write,
    fits_csv,
    quantize,
    read_keyvalue,
    read_points_csv,
    read_volume_dir,
    render_bench_svg,
    render_overlay_svg,
    write_points_csv,
    write_regions_csv,
    write_volume_dir,
)
from .preprocess import EmptyRegion, ScaleConfig, Volume, detect, extract_layer_points
from .synth import (
    BENCH_EPSILON,
    SynthSpec,
    bench_csv,
    crossover_count,
    render_ellipsoid,
    run_robustness_bench,
    sample_ellipse_points,
    sample_uniform_noise,
    derive_seed,
    synth_stack,
    synth_volume,
)

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    """Bad flags, config values or input files (exit 2)."""


class EmptyResult(Exception):
    """Nothing detected (exit 3)."""


# --- value converters -------------------------------------------------------------

def _numbers(s: str) -> list:
    return [float(v) for v in str(s).replace(",", " ").split()]


def _vec(n):
    def conv(s):
        v = _numbers(s)
        if len(v) != n:
            raise ValueError(f"expected {n} numbers, got {s!r}")
        return tuple(v)
    return conv


def _numlist(s: str) -> list:
    """``"a,b,c"`` or an inclusive range ``"start:stop:step"``."""
    s = str(s).strip()
    if ":" in s:
        parts = [float(p) for p in s.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise ValueError(f"range must be start:stop:step with step > 0, got {s!r}")
        n = int(math.floor((parts[1] - parts[0]) / parts[2] + 1e-9))
        return [parts[0] + k * parts[2] for k in range(n + 1)]
    return _numbers(s)


def _counts(s: str) -> tuple:
    vals = _numlist(s)
    if any(v != int(v) for v in vals):
        raise ValueError(f"counts must be integers, got {s!r}")
    return tuple(int(v) for v in vals)


def _sigmas(s: str) -> tuple:
    """Groups separated by ``;``: one number (isotropic) or three (sx, sy, sz)."""
    out = []
    for grp in str(s).split(";"):
        v = _numbers(grp)
        if len(v) == 1:
            v = v * 3
        if len(v) != 3:
            raise ValueError(f"sigma group must have 1 or 3 numbers, got {grp!r}")
        out.append(tuple(v))
    return tuple(out)


def _blobs(s: str) -> list:
    """``cx,cy,cz,sx,sy,sz,amp`` groups separated by ``;``."""
    out = []
    for grp in str(s).split(";"):
        v = _numbers(grp)
        if len(v) != 7:
            raise ValueError(f"blob needs cx,cy,cz,sx,sy,sz,amp, got {grp!r}")
        out.append((tuple(v[:3]), tuple(v[3:6]), v[6]))
    return out


def _dims(s: str) -> tuple:
    v = _vec(3)(s)
    if any(d != int(d) or d < 1 for d in v):
        raise ValueError(f"dims must be positive integers, got {s!r}")
    return tuple(int(d) for d in v)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _pos_int(s) -> int:
    v = int(s)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {s!r}")
    return v


def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none", "auto") else float(s)


def _opt_int(s):
    return None if str(s).strip().lower() in ("", "none", "auto") else int(s)


def _env_jobs() -> str:
    return os.environ.get("STACKFIT_JOBS", "1")


# --- option registry ---------------------------------------------------------------

class _Options:
    """Declares options on a subparser and merges flags over a config file."""

    def __init__(self, parser):
        self.parser = parser
        self.specs = {}

    def add(self, flag, conv=str, default=None, help=None, required=False, boolean=False):
        dest = flag.lstrip("-").replace("-", "_")
        self.specs[dest] = (conv, default, required, flag)
        if boolean:
            self.parser.add_argument(flag, dest=dest, action="store_const", const="true", default=None, help=help)
        else:
            self.parser.add_argument(flag, dest=dest, default=None, help=help)

    def resolve(self, ns, config: dict) -> argparse.Namespace:
        unknown = sorted(k for k in config if k.replace("-", "_") not in self.specs)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        file_vals = {k.replace("-", "_"): v for k, v in config.items()}
        out = argparse.Namespace()
        for dest, (conv, default, required, flag) in self.specs.items():
            raw = getattr(ns, dest, None)
            if raw is None:
                raw = file_vals.get(dest)
            if raw is None:
                raw = default() if callable(default) else default
            if raw is None:
                if required:
                    raise UsageError(f"{flag} is required (flag or config key {dest})")
                setattr(out, dest, None)
                continue
            try:
                setattr(out, dest, conv(raw))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{flag}: {exc}") from None
        return out


def _jobs_option(opts):
    opts.add("--jobs", _pos_int, _env_jobs, "parallel workers (default: $STACKFIT_JOBS or 1)")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# --- preprocess ----------------------------------------------------------------------

def _setup_preprocess(sub):
    p = sub.add_parser("preprocess", help="detect objects in a volume and extract per-layer points")
    o = _Options(p)
    o.add("--volume", Path, None, "directory of PGM slices", required=True)
    o.add("--meta", Path, None, "meta file (default: VOLUME/meta.txt)")
    o.add("--sigmas", _sigmas, "1;2;3", "scales, e.g. '1;2;3' or '1,1,0.5;2,2,1'")
    o.add("--tau", _opt_float, None, "eigenvalue cutoff (< 0); default scales with intensity range")
    o.add("--vote", _opt_int, None, "scales that must agree (default: majority)")
    o.add("--min-voxels", _pos_int, 10, "drop smaller components")
    o.add("--margin", int, 2, "bounding-box margin in voxels")
    o.add("--quantile", float, 0.5, "intensity quantile for point extraction")
    o.add("--max-points", _opt_int, 32, "per-layer point cap, evenly spread in angle ('none' = all)")
    o.add("--out", Path, None, "output directory", required=True)
    _jobs_option(o)
    return o


def _extract_one(v, region, q, cap, points_dir):
    try:
        layers = extract_layer_points(v, region, q, cap)
    except EmptyRegion as exc:
        return region.label, 0, str(exc)
    pts = np.vstack([l.points for l in layers])
    zs = np.concatenate([np.full(len(l.points), l.layer_index) for l in layers])
    write_points_csv(points_dir / f"region_{region.label:04d}.csv", pts, zs)
    return region.label, len(layers), None


def cmd_preprocess(a) -> int:
    try:
        cfg = ScaleConfig(a.sigmas, a.tau, a.vote, a.min_voxels, a.margin)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 0 < a.quantile < 1:
        raise UsageError("--quantile must lie in (0, 1)")
    if a.max_points is not None and a.max_points < 1:
        raise UsageError("--max-points must be positive")
    try:
        v = read_volume_dir(a.volume, a.meta)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read volume: {exc}") from None
    _log(f"volume {v.dims} spacing {v.spacing}")
    res = detect(v, cfg)
    _log("thresholds " + " ".join(f"{t:.6g}" for t in res.thresholds))
    if not res.regions:
        raise EmptyResult("no regions detected; try a smaller --min-voxels or a less negative --tau")
    out = a.out
    (out / "points").mkdir(parents=True, exist_ok=True)
    write_regions_csv(out / "regions.csv", res.regions)
    labels = Volume(res.labels.astype(float), v.spacing)
    write_volume_dir(labels, out / "labels", 8 if len(res.regions) <= 255 else 16)
    with ThreadPoolExecutor(max_workers=a.jobs) as pool:
        done = list(pool.map(lambda r: _extract_one(v, r, a.quantile, a.max_points, out / "points"), res.regions))
    for label, n, err in done:
        _log(f"region {label}: " + (err if err else f"{n} layers"))
    _log(f"{len(res.regions)} regions written to {out}")
    print(len(res.regions))
    return EXIT_OK


# --- fit -------------------------------------------------------------------------------

def _setup_fit(sub):
    p = sub.add_parser("fit", help="fit per-layer ellipses to point sets")
    o = _Options(p)
    o.add("--points", Path, None, "points CSV (x,y or layer,x,y) or a directory of them", required=True)
    o.add("--loss", str, "robust", "robust or squared")
    o.add("--epsilon", float, 0.1, "dead-zone width of the robust loss")
    o.add("--lambda", float, 1.0, "coupling weight between adjacent layers")
    o.add("--no-normalize", _bool, "false", "fit in raw coordinates", boolean=True)
    o.add("--out", Path, None, "fits CSV", required=True)
    o.add("--overlay", Path, None, "directory for per-layer SVG overlays")
    o.add("--volume", Path, None, "volume directory used as overlay background")
    _jobs_option(o)
    return o


def _load_layers(path: Path) -> list:
    try:
        pts, zs = read_points_csv(path)
    except (OSError, ValueError, StopIteration) as exc:
        raise UsageError(f"malformed points file {path}: {exc}") from None
    if len(pts) == 0:
        raise UsageError(f"{path}: no points")
    if zs is None:
        return [LayerPointSet(0, pts)]
    out = []
    for z in np.unique(zs):
        zi = int(z) if float(z).is_integer() else float(z)
        out.append(LayerPointSet(zi, pts[zs == z]))
    return out


def _fit_object(obj, layers, cfg):
    try:
        return obj, fit_stack(layers, cfg), None
    except InternalError as exc:
        return obj, None, ("internal", str(exc))
    except (DegeneratePoints, EmptyLayer, ValueError) as exc:
        return obj, None, ("input", str(exc))


def _overlay(a, obj, res, volume):
    a.overlay.mkdir(parents=True, exist_ok=True)
    for z, e in zip(res.layer_indices, res.ellipses):
        if volume is not None and float(z).is_integer() and 0 <= int(z) < volume.dims[2]:
            bg = volume.data[int(z)]
        else:
            pts = res.coord_map.inverse()(np.zeros((1, 2)))
            size = int(max(8, math.ceil(2 * max(abs(pts).max(), 1) + 4)))
            if e is not None:
                size = max(size, int(math.ceil(max(e.center) + max(e.semi_axes) + 4)))
            bg = np.zeros((size, size))
        render_overlay_svg(bg, [e], a.overlay / f"{obj}_z{z}.svg")


def cmd_fit(a) -> int:
    if a.loss not in ("robust", "squared"):
        raise UsageError(f"--loss must be robust or squared, got {a.loss!r}")
    try:
        cfg = FitConfig(epsilon=a.epsilon, lam=getattr(a, "lambda"), normalize_coords=not a.no_normalize,
                        loss=a.loss)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if a.points.is_dir():
        files = sorted(a.points.glob("*.csv"))
        if not files:
            raise UsageError(f"no *.csv files in {a.points}")
        objects = [(f.stem, _load_layers(f)) for f in files]
    elif a.points.is_file():
        objects = [(a.points.stem, _load_layers(a.points))]
    else:
        raise UsageError(f"points path {a.points} does not exist")
    volume = None
    if a.overlay is not None and a.volume is not None:
        try:
            volume = read_volume_dir(a.volume)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read overlay volume: {exc}") from None
    if a.jobs > 1 and len(objects) > 1:
        with ProcessPoolExecutor(max_workers=a.jobs) as pool:
            done = list(pool.map(_fit_object, *zip(*objects), [cfg] * len(objects)))
    else:
        done = [_fit_object(obj, layers, cfg) for obj, layers in objects]
    results, worst = [], EXIT_OK
    for obj, res, err in done:
        if err is not None:
            kind, msg = err
            _log(f"object {obj}: {kind} error: {msg}")
            worst = max(worst, EXIT_INTERNAL if kind == "internal" else EXIT_USAGE)
            continue
        coup = res.coupling_l1()
        cmax = float(coup.max()) if coup.size else 0.0
        _log(f"object {obj}: layers={len(res.layer_indices)} loss={a.loss} objective={res.objective_value:.6g} "
             f"ellipses={sum(res.is_ellipse)}/{len(res.ellipses)} coupling_l1_max={cmax:.6g}")
        results.append((obj, res))
        if a.overlay is not None:
            _overlay(a, obj, res, volume)
    if worst != EXIT_OK:
        return worst
    atomic_write(a.out, fits_csv(results))
    print(sum(len(r.layer_indices) for _, r in results))
    return EXIT_OK


# --- bench-robust ----------------------------------------------------------------------

def _truth(s) -> GeometricEllipse:
    v = _numbers(s)
    if len(v) != 5:
        raise ValueError(f"truth needs cx,cy,rx,ry,angle, got {s!r}")
    return GeometricEllipse((v[0], v[1]), (v[2], v[3]), v[4])


def _synthspec_options(o, counts=True):
    d = SynthSpec()
    o.add("--truth", _truth, "0,0,1.5,0.8,0", "true ellipse cx,cy,rx,ry,angle")
    o.add("--n-inliers", _pos_int, d.n_inliers, "points on the true ellipse")
    o.add("--inlier-jitter-sigma", float, d.inlier_jitter_sigma, "Gaussian jitter of inliers")
    o.add("--noise-interval", _vec(2), "-3,3", "uniform noise interval lo,hi")
    if counts:
        o.add("--noise-counts", _counts, "0:200:10", "noise counts, list or start:stop:step")
    o.add("--seed", int, d.seed, "random seed")


def _setup_bench(sub):
    p = sub.add_parser("bench-robust", help="squared vs robust error under growing contamination")
    p.add_argument("--spec", dest="config", help="spec file of key: value lines (alias of --config)")
    o = _Options(p)
    _synthspec_options(o)
    o.add("--epsilon", float, BENCH_EPSILON, "dead-zone width of the robust loss")
    o.add("--out", Path, None, "CSV output", required=True)
    o.add("--plot", Path, None, "SVG plot output")
    return o


def _spec_from(a, counts=True) -> SynthSpec:
    kw = dict(truth=a.truth, n_inliers=a.n_inliers, inlier_jitter_sigma=a.inlier_jitter_sigma,
              noise_interval=a.noise_interval, seed=a.seed)
    if counts:
        kw["noise_counts"] = a.noise_counts
    try:
        return SynthSpec(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_bench(a) -> int:
    spec = _spec_from(a)
    try:
        cfg = FitConfig(epsilon=a.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    recs = run_robustness_bench(spec, cfg)
    for r in recs:
        _log(f"noise {r.noise_count:4d}  squared {r.err_squared:.6g}  robust {r.err_robust:.6g}"
             + (f"  [{r.error}]" if r.error else ""))
    atomic_write(a.out, bench_csv(recs))
    if a.plot is not None:
        render_bench_svg(recs, a.plot)
    c = crossover_count(recs)
    print("none" if c is None else c)
    return EXIT_OK


# --- synth -----------------------------------------------------------------------------

def _setup_synth(sub):
    p = sub.add_parser("synth", help="write synthetic fixtures")
    kinds = p.add_subparsers(dest="kind", required=True)
    opts = {}

    q = kinds.add_parser("volume", help="Gaussian blobs plus uniform noise")
    q.add_argument("--config")
    o = opts["volume"] = _Options(q)
    o.add("--dims", _dims, None, "nx,ny,nz", required=True)
    o.add("--blobs", _blobs, None, "cx,cy,cz,sx,sy,sz,amp;...", required=True)
    o.add("--noise", float, 0.0, "uniform noise amplitude")
    o.add("--seed", int, 0, "random seed")
    o.add("--spacing", _vec(3), "1,1,1", "voxel spacing sx,sy,sz")
    o.add("--bit-depth", int, 16, "8 or 16")
    o.add("--out", Path, None, "output directory", required=True)

    q = kinds.add_parser("ellipsoid", help="one rendered axis-aligned ellipsoid")
    q.add_argument("--config")
    o = opts["ellipsoid"] = _Options(q)
    o.add("--dims", _dims, None, "nx,ny,nz", required=True)
    o.add("--center", _vec(3), None, "cx,cy,cz", required=True)
    o.add("--semi-axes", _vec(3), None, "a,b,c", required=True)
    o.add("--amplitude", float, 1.0, "peak intensity")
    o.add("--shell-width", _opt_float, None, "render a Gaussian shell of this width instead of a solid")
    o.add("--spacing", _vec(3), "1,1,1", "voxel spacing sx,sy,sz")
    o.add("--bit-depth", int, 16, "8 or 16")
    o.add("--out", Path, None, "output directory", required=True)

    q = kinds.add_parser("stack", help="points on the cross-sections of an ellipsoid")
    q.add_argument("--config")
    o = opts["stack"] = _Options(q)
    o.add("--center", _vec(3), None, "cx,cy,cz", required=True)
    o.add("--semi-axes", _vec(3), None, "a,b,c", required=True)
    o.add("--z", _numlist, None, "layer heights, list or start:stop:step", required=True)
    o.add("--points-per-layer", _pos_int, 20, "points on the widest layer")
    o.add("--jitter", float, 0.0, "Gaussian jitter")
    o.add("--seed", int, 0, "random seed")
    o.add("--out", Path, None, "points CSV (layer,x,y)", required=True)

    q = kinds.add_parser("points", help="one contaminated ellipse sample, as in the bench")
    q.add_argument("--config")
    o = opts["points"] = _Options(q)
    _synthspec_options(o, counts=False)
    o.add("--noise-count", int, 0, "uniform noise points")
    o.add("--out", Path, None, "points CSV (x,y)", required=True)
    return opts


def cmd_synth(a) -> int:
    try:
        if a.kind == "volume":
            if a.bit_depth not in (8, 16):
                raise ValueError("--bit-depth must be 8 or 16")
            v = synth_volume(a.blobs, a.dims, a.noise, a.seed, a.spacing)
            write_volume_dir(quantize(v, a.bit_depth), a.out, a.bit_depth)
        elif a.kind == "ellipsoid":
            if a.bit_depth not in (8, 16):
                raise ValueError("--bit-depth must be 8 or 16")
            v = render_ellipsoid(a.dims, a.center, a.semi_axes, a.amplitude, a.shell_width, a.spacing)
            write_volume_dir(quantize(v, a.bit_depth), a.out, a.bit_depth)
        elif a.kind == "stack":
            layers = synth_stack(a.center, a.semi_axes, a.z, a.points_per_layer, a.jitter, a.seed)
            if not layers:
                raise ValueError("no layer intersects the ellipsoid")
            pts = np.vstack([l.points for l in layers])
            zs = np.concatenate([np.full(len(l.points), l.layer_index) for l in layers])
            write_points_csv(a.out, pts, zs)
        else:
            spec = _spec_from(a, counts=False)
            if a.noise_count < 0:
                raise ValueError("--noise-count must be nonnegative")
            inl = sample_ellipse_points(spec.truth, spec.n_inliers, spec.inlier_jitter_sigma,
                                        derive_seed(spec.seed, 0))
            noise = sample_uniform_noise(a.noise_count, spec.noise_interval,
                                         derive_seed(spec.seed, 1, a.noise_count))
            write_points_csv(a.out, np.vstack([inl, noise]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _log(f"wrote {a.out}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="stackfit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"stackfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}
    for name, setup in (("preprocess", _setup_preprocess), ("fit", _setup_fit)):
        opts = setup(sub)
        opts.parser.add_argument("--config", help="key: value file; flags override it")
        registry[name] = opts
    registry["bench-robust"] = _setup_bench(sub)
    registry["synth"] = _setup_synth(sub)
    return parser, registry


COMMANDS = {"preprocess": cmd_preprocess, "fit": cmd_fit, "bench-robust": cmd_bench, "synth": cmd_synth}


_NEGATIVE = re.compile(r"^-[0-9.]")


def _glue_negative_values(argv: list) -> list:
    """Turn ``--flag -3:3:1`` into ``--flag=-3:3:1``.

    argparse only accepts plain negative numbers as option values; lists,
    ranges and exponents such as ``-1e6`` would be taken for flags.
    """
    out = []
    for tok in argv:
        if out and _NEGATIVE.match(tok) and out[-1].startswith("--") and "=" not in out[-1]:
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser, registry = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    ns = parser.parse_args(_glue_negative_values(argv))
    try:
        config = {}
        if getattr(ns, "config", None):
            try:
                config = read_keyvalue(ns.config)
            except (OSError, ValueError) as exc:
                raise UsageError(f"config {ns.config}: {exc}") from None
        opts = registry[ns.command]
        if ns.command == "synth":
            opts = opts[ns.kind]
        a = opts.resolve(ns, config)
        if ns.command == "synth":
            a.kind = ns.kind
        if getattr(a, "jobs", None) is None and "jobs" in opts.specs:
            raise UsageError("--jobs must be a positive integer")
        return COMMANDS[ns.command](a)
    except UsageError as exc:
        _log(f"stackfit: error: {exc}")
        return EXIT_USAGE
    except EmptyResult as exc:
        _log(f"stackfit: {exc}")
        return EXIT_EMPTY
    except InternalError as exc:
        _log(f"stackfit: internal solver failure: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
