"""File formats: PGM slices, volume directories, CSV tables and SVG diagnostics.

Every writer produces LF line endings and fixed float formatting so that the
same inputs give the same bytes on every platform.
"""
from __future__ import annotations

import base64
import csv
import io
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conic_geometry import GeometricEllipse
from .preprocess import SeedRegion, Volume

__all__ = [
    "DimensionMismatch",
    "FitRow",
    "MalformedHeader",
    "MissingSlice",
    "TruncatedData",
    "UnsupportedFormat",
    "UnsupportedMaxval",
    "VolumeMeta",
    "atomic_write",
    "fits_csv",
    "format_keyvalue",
    "parse_keyvalue",
    "quantize",
    "read_fits_csv",
    "read_keyvalue",
    "read_pgm",
    "read_points_csv",
    "read_regions_csv",
    "read_volume_dir",
    "render_bench_svg",
    "render_overlay_svg",
    "write_fits_csv",
    "write_pgm",
    "write_points_csv",
    "write_regions_csv",
    "write_volume_dir",
]


class MalformedHeader(ValueError):
    pass


class TruncatedData(ValueError):
    pass


class UnsupportedMaxval(ValueError):
    pass


class UnsupportedFormat(ValueError):
    pass


class MissingSlice(FileNotFoundError):
    pass


class DimensionMismatch(ValueError):
    pass


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) via a temp file in the same directory plus rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _g(v) -> str:
    return f"{float(v) + 0.0:.12g}"


# --- PGM ------------------------------------------------------------------------

_MAXVALS = {255: np.dtype(np.uint8), 65535: np.dtype(">u2")}


def _header_tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens and the data offset."""
    tokens = []
    i, n = 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i] in b" \t\r\n":
            i += 1
        if i < n and buf[i] == ord("#"):
            while i < n and buf[i] not in b"\r\n":
                i += 1
            continue
        if i >= n:
            raise MalformedHeader(f"header ends after {len(tokens)} of {count} fields")
        j = i
        while j < n and buf[j] not in b" \t\r\n#":
            j += 1
        tokens.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    if i >= n or buf[i] not in b" \t\r\n":
        raise MalformedHeader("missing whitespace after maxval")
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Binary PGM (``P5``) as a ``(height, width)`` uint8 or uint16 array."""
    buf = Path(path).read_bytes()
    if buf[:2] in (b"P2", b"P1", b"P3", b"P4", b"P6"):
        raise UnsupportedFormat(f"{path}: magic {buf[:2].decode()} is not supported, only binary P5")
    if buf[:2] != b"P5":
        raise MalformedHeader(f"{path}: not a PGM file")
    tokens, offset = _header_tokens(buf[2:], 3)
    offset += 2
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeader(f"{path}: non-integer header field in {tokens!r}") from None
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"{path}: bad size {w}x{h}")
    if maxval not in _MAXVALS:
        raise UnsupportedMaxval(f"{path}: maxval {maxval} (supported: 255, 65535)")
    dt = _MAXVALS[maxval]
    need = w * h * dt.itemsize
    if len(buf) - offset < need:
        raise TruncatedData(f"{path}: expected {need} data bytes, found {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dt, count=w * h, offset=offset).reshape(h, w)
    return arr.astype(np.uint8 if maxval == 255 else np.uint16)


def pgm_bytes(img, maxval: int | None = None) -> bytes:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"PGM slices are 2D, got shape {a.shape}")
    if maxval is None:
        maxval = 255 if a.dtype == np.uint8 else 65535
    if maxval not in _MAXVALS:
        raise UnsupportedMaxval(f"maxval {maxval} (supported: 255, 65535)")
    if a.size and (a.min() < 0 or a.max() > maxval or not np.array_equal(a, np.round(a))):
        raise ValueError(f"samples must be integers in [0, {maxval}]")
    h, w = a.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + a.astype(_MAXVALS[maxval]).tobytes()


def write_pgm(path, img, maxval: int | None = None) -> None:
    """Write a 2D integer array; maxval defaults to 255 for uint8 input, else 65535."""
    atomic_write(path, pgm_bytes(img, maxval))


# --- key: value text ---------------------------------------------------------------

def parse_keyvalue(text: str) -> dict:
    """``key: value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"line {no}: expected 'key: value', got {raw!r}")
        if key in out:
            raise ValueError(f"line {no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_keyvalue(path) -> dict:
    return parse_keyvalue(Path(path).read_text(encoding="utf-8"))


def format_keyvalue(items: dict) -> str:
    return "".join(f"{k}: {v}\n" for k, v in items.items())


def _floats(s: str, n: int, what: str) -> tuple:
    parts = s.replace(",", " ").split()
    if len(parts) != n:
        raise ValueError(f"{what}: expected {n} numbers, got {s!r}")
    return tuple(float(p) for p in parts)


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple  # (nx, ny, nz)
    spacing: tuple = (1.0, 1.0, 1.0)
    bit_depth: int = 16
    pattern: str = "slice_{z:04d}.pgm"

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if "{z" not in self.pattern:
            raise ValueError(f"pattern must contain a {{z}} field, got {self.pattern!r}")

    @property
    def maxval(self) -> int:
        return 255 if self.bit_depth == 8 else 65535

    def slice_name(self, z: int) -> str:
        return self.pattern.format(z=z)

    @classmethod
    def parse(cls, text: str) -> "VolumeMeta":
        kv = parse_keyvalue(text)
        if "dims" not in kv:
            raise ValueError("meta lacks 'dims'")
        dims = tuple(int(v) for v in _floats(kv["dims"], 3, "dims"))
        spacing = _floats(kv.get("spacing", "1 1 1"), 3, "spacing")
        return cls(dims, spacing, int(kv.get("bit_depth", 16)), kv.get("pattern", cls.pattern))

    def text(self) -> str:
        return format_keyvalue({
            "dims": " ".join(str(int(d)) for d in self.dims),
            "spacing": " ".join(repr(float(s)) for s in self.spacing),
            "bit_depth": self.bit_depth,
            "pattern": self.pattern,
        })


def quantize(v: Volume, bit_depth: int = 16) -> Volume:
    """Linearly rescale ``[0, max]`` onto the integer range of ``bit_depth``."""
    top = 255 if bit_depth == 8 else 65535
    peak = float(v.data.max()) if v.data.size else 0.0
    if v.data.min() < 0:
        raise ValueError("cannot quantize negative intensities")
    data = np.zeros_like(v.data) if peak == 0 else np.round(v.data * (top / peak))
    return Volume(data, v.spacing)


def write_volume_dir(v: Volume, directory, bit_depth: int = 16, pattern: str = VolumeMeta.pattern,
                     meta_name: str = "meta.txt") -> VolumeMeta:
    """One PGM per z-slice plus a meta file; data must already be integral."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = VolumeMeta(v.dims, v.spacing, bit_depth, pattern)
    for z in range(v.dims[2]):
        write_pgm(d / meta.slice_name(z), v.data[z], meta.maxval)
    atomic_write(d / meta_name, meta.text())
    return meta


def read_volume_dir(directory, meta=None) -> Volume:
    """Assemble slices in z order; ``meta`` is a VolumeMeta, a path, or None (``meta.txt``)."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"volume directory {d} does not exist")
    if meta is None:
        meta = d / "meta.txt"
    if not isinstance(meta, VolumeMeta):
        meta = VolumeMeta.parse(Path(meta).read_text(encoding="utf-8"))
    nx, ny, nz = meta.dims
    data = np.empty((nz, ny, nx))
    for z in range(nz):
        p = d / meta.slice_name(z)
        if not p.is_file():
            raise MissingSlice(f"missing slice z={z}: {p}")
        img = read_pgm(p)
        if img.shape != (ny, nx):
            raise DimensionMismatch(f"{p}: slice is {img.shape[1]}x{img.shape[0]}, meta says {nx}x{ny}")
        data[z] = img
    return Volume(data, meta.spacing)


# --- CSV tables ----------------------------------------------------------------------

FITS_HEADER = ["object", "layer", "a", "b", "c", "d", "e", "f",
               "cx", "cy", "rx", "ry", "angle", "loss", "is_ellipse"]


@dataclass
class FitRow:
    object: str
    layer: float
    theta: np.ndarray
    ellipse: GeometricEllipse | None
    loss: float

    @property
    def is_ellipse(self) -> bool:
        return self.ellipse is not None


def _layer_str(z) -> str:
    return str(int(z)) if float(z).is_integer() else _g(z)


def fits_csv(results) -> str:
    """CSV text for ``(object_id, StackFitResult)`` pairs."""
    buf = io.StringIO()
    buf.write(",".join(FITS_HEADER) + "\n")
    for obj, res in results:
        for z, th, e, loss in zip(res.layer_indices, res.conics, res.ellipses, res.losses):
            cells = [str(obj), _layer_str(z)] + [_g(v) for v in th]
            if e is None:
                cells += [""] * 5
            else:
                cells += [_g(e.center[0]), _g(e.center[1]), _g(e.semi_axes[0]), _g(e.semi_axes[1]), _g(e.rotation)]
            cells += [_g(loss), "1" if e is not None else "0"]
            buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_fits_csv(results, path) -> None:
    atomic_write(path, fits_csv(results))


def read_fits_csv(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != FITS_HEADER:
            raise ValueError(f"{path}: unexpected fits CSV header")
        for r in reader:
            theta = np.array([float(v) for v in r[2:8]])
            ell = None
            if r[14] == "1":
                cx, cy, rx, ry, ang = (float(v) for v in r[8:13])
                ell = GeometricEllipse((cx, cy), (rx, ry), ang)
            rows.append(FitRow(r[0], float(r[1]), theta, ell, float(r[13])))
    return rows


def write_points_csv(path, points, layers=None) -> None:
    """``x,y`` rows, or ``layer,x,y`` when per-point layer indices are given.

    Coordinates are written with ``repr`` so that reading them back is lossless.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    buf = io.StringIO()
    if layers is None:
        buf.write("x,y\n")
        for x, y in p.tolist():
            buf.write(f"{x!r},{y!r}\n")
    else:
        buf.write("layer,x,y\n")
        for z, (x, y) in zip(layers, p.tolist()):
            buf.write(f"{_layer_str(z)},{x!r},{y!r}\n")
    atomic_write(path, buf.getvalue())


def read_points_csv(path):
    """Returns ``(points, layers)``; ``layers`` is None for the two-column form."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header not in (["x", "y"], ["layer", "x", "y"]):
            raise ValueError(f"{path}: header must be 'x,y' or 'layer,x,y', got {','.join(header)!r}")
        rows = [r for r in reader if r]
    try:
        vals = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{path}: non-finite coordinate")
    if len(header) == 2:
        return vals, None
    return vals[:, 1:], vals[:, 0]


REGIONS_HEADER = ["label", "x0", "x1", "y0", "y1", "z0", "z1", "cx", "cy", "cz", "voxels"]


def write_regions_csv(path, regions) -> None:
    buf = io.StringIO()
    buf.write(",".join(REGIONS_HEADER) + "\n")
    for r in regions:
        (x0, x1), (y0, y1), (z0, z1) = r.bbox
        cells = [r.label, x0, x1, y0, y1, z0, z1]
        buf.write(",".join(str(int(c)) for c in cells) + ","
                  + ",".join(_g(c) for c in r.centroid) + f",{int(r.voxel_count)}\n")
    atomic_write(path, buf.getvalue())


def read_regions_csv(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != REGIONS_HEADER:
            raise ValueError(f"{path}: unexpected regions CSV header")
        for r in reader:
            i = [int(v) for v in r[:7]]
            out.append(SeedRegion(i[0], ((i[1], i[2]), (i[3], i[4]), (i[5], i[6])),
                                  tuple(float(v) for v in r[7:10]), int(r[10])))
    return out


# --- SVG -------------------------------------------------------------------------------

def _png_gray8(img: np.ndarray) -> bytes:
    h, w = img.shape
    raw = b"".join(b"\x00" + img[i].tobytes() for i in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 9))
            + chunk(b"IEND", b""))


def _to_gray8(slice2d) -> np.ndarray:
    a = np.asarray(slice2d, dtype=float)
    lo, hi = (float(a.min()), float(a.max())) if a.size else (0.0, 0.0)
    if hi > lo:
        a = np.round((a - lo) * (255.0 / (hi - lo)))
    else:
        a = np.zeros_like(a)
    return a.astype(np.uint8)


def _f(v: float) -> str:
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def render_overlay_svg(slice2d, ellipses, path=None) -> str:
    """Slice as an embedded grayscale PNG with fitted ellipses on top.

    Pixel ``(x, y)`` is centred at SVG coordinate ``(x, y)``. ``ellipses`` may
    contain None entries (non-ellipse fits), which are skipped.
    """
    img = _to_gray8(slice2d)
    h, w = img.shape
    png = base64.b64encode(_png_gray8(img)).decode("ascii")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * 4}" height="{h * 4}" '
        f'viewBox="-0.5 -0.5 {w} {h}">\n',
        f'<image x="-0.5" y="-0.5" width="{w}" height="{h}" style="image-rendering:pixelated" '
        f'href="data:image/png;base64,{png}"/>\n',
    ]
    for e in ellipses:
        if e is None:
            continue
        (cx, cy), (rx, ry) = e.center, e.semi_axes
        deg = math.degrees(e.rotation)
        out.append(f'<ellipse cx="{_f(cx)}" cy="{_f(cy)}" rx="{_f(rx)}" ry="{_f(ry)}" '
                   f'transform="rotate({_f(deg)} {_f(cx)} {_f(cy)})" '
                   'fill="none" stroke="#ff3030" stroke-width="0.25"/>\n')
    out.append("</svg>\n")
    text = "".join(out)
    if path is not None:
        atomic_write(path, text)
    return text


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for m in (1, 2, 5, 10):
        if span / (m * step) <= n:
            step *= m
            break
    k0, k1 = math.ceil(lo / step - 1e-9), math.floor(hi / step + 1e-9)
    return [k * step for k in range(k0, k1 + 1)]


def render_bench_svg(records, path=None) -> str:
    """Line plot of squared and robust parameter error against noise count."""
    W, H, L, R, T, B = 640, 400, 60, 20, 20, 50
    xs = [r.noise_count for r in records]
    ys = [v for r in records for v in (r.err_squared, r.err_robust) if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    if x1 == x0:
        x1 = x0 + 1
    ymax = max(ys, default=0.0) or 1.0
    ticks = _nice_ticks(0.0, ymax)
    step = ticks[1] - ticks[0]
    y1 = step * math.ceil(ymax / step - 1e-9)

    def px(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return H - B - y / y1 * (H - T - B)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="12">\n',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>\n',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>\n',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>\n',
    ]
    for t in _nice_ticks(x0, x1):
        out.append(f'<line x1="{_f(px(t))}" y1="{H - B}" x2="{_f(px(t))}" y2="{H - B + 5}" stroke="black"/>'
                   f'<text x="{_f(px(t))}" y="{H - B + 18}" text-anchor="middle">{_f(t)}</text>\n')
    for t in _nice_ticks(0.0, y1):
        out.append(f'<line x1="{L - 5}" y1="{_f(py(t))}" x2="{L}" y2="{_f(py(t))}" stroke="black"/>'
                   f'<text x="{L - 8}" y="{_f(py(t) + 4)}" text-anchor="end">{_f(t)}</text>\n')
    out.append(f'<text x="{(L + W - R) // 2}" y="{H - 12}" text-anchor="middle">noise points</text>\n')
    out.append(f'<text x="16" y="{(T + H - B) // 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + H - B) // 2})">parameter error</text>\n')
    series = (("squared", "#1f5fbf", [r.err_squared for r in records]),
              ("robust", "#d0402b", [r.err_robust for r in records]))
    for name, color, vals in series:
        seg = []
        for x, y in list(zip(xs, vals)) + [(None, math.nan)]:
            if x is not None and math.isfinite(y):
                seg.append(f"{_f(px(x))},{_f(py(y))}")
                continue
            if seg:
                out.append(f'<polyline class="{name}" points="{" ".join(seg)}" fill="none" '
                           f'stroke="{color}" stroke-width="2"/>\n')
            seg = []
    for i, (name, color, _) in enumerate(series):
        y = T + 12 + 18 * i
        out.append(f'<line x1="{W - R - 110}" y1="{y}" x2="{W - R - 85}" y2="{y}" stroke="{color}" '
                   f'stroke-width="2"/><text x="{W - R - 78}" y="{y + 4}">{name} loss</text>\n')
    out.append("</svg>\n")
    text = "".join(out)
    if path is not None:
        atomic_write(path, text)
    return text
