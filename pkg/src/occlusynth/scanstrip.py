"""Scan strips: the raw per-rotation LiDAR raster and the near-road filters.

A strip has one column per mirror rotation and exactly ``STRIP_ROWS`` rows
(returns per rotation). Each pixel stores the measured object point, the
sensor head position at acquisition time, an optional normal, an optional
reflectance and a validity flag.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import FormatError, StripIOError
from .geom import PointCloud

STRIP_ROWS = 3000
SST1_MAGIC = b"SST1"

# plane order in the SST1 container; bit i of the mask flags plane i
PLANES = ("px", "py", "pz", "hx", "hy", "hz", "nx", "ny", "nz", "reflectance", "valid")
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class FilterConfig:
    max_range: float = 15.0
    sensor_height: float = 2.75
    h_min: float = -0.35
    h_max: float = 2.0

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if not self.h_min < self.h_max:
            raise ValueError("h_min must be below h_max")


@dataclass(frozen=True)
class ScanStrip:
    """``rows x cols`` grid of scan records; planes are float64 arrays.

    ``p``, ``h`` and ``n`` have shape ``(rows, cols, 3)``; missing normals and
    reflectances are NaN. ``valid`` marks pixels carrying a usable return.
    """

    p: np.ndarray
    h: np.ndarray
    valid: np.ndarray
    n: Optional[np.ndarray] = None
    reflectance: Optional[np.ndarray] = None
    strip_id: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError("p must have shape (rows, cols, 3)")
        rows, cols = p.shape[:2]
        if rows != STRIP_ROWS:
            raise ValueError(f"a scan strip has exactly {STRIP_ROWS} rows, got {rows}")
        if cols < 1:
            raise ValueError("a scan strip needs at least one column")
        h = np.asarray(self.h, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if h.shape != p.shape or valid.shape != p.shape[:2]:
            raise ValueError("strip planes have inconsistent shapes")
        n = self.n
        if n is None:
            n = np.full(p.shape, np.nan)
        n = np.asarray(n, dtype=np.float64)
        refl = self.reflectance
        if refl is None:
            refl = np.full(p.shape[:2], np.nan)
        refl = np.asarray(refl, dtype=np.float64)
        if n.shape != p.shape or refl.shape != p.shape[:2]:
            raise ValueError("strip planes have inconsistent shapes")
        if np.any(valid & ~np.all(np.isfinite(p), axis=2)):
            raise ValueError("valid pixels need finite object points")
        for name, arr in (("p", p), ("h", h), ("valid", valid), ("n", n), ("reflectance", refl)):
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def has_normal(self) -> np.ndarray:
        return np.all(np.isfinite(self.n), axis=2)


def write_strip(path, strip: ScanStrip) -> None:
    """Serialize to the SST1 container (little-endian, float32 planes, u8 validity)."""
    planes = {
        "px": strip.p[..., 0], "py": strip.p[..., 1], "pz": strip.p[..., 2],
        "hx": strip.h[..., 0], "hy": strip.h[..., 1], "hz": strip.h[..., 2],
        "nx": strip.n[..., 0], "ny": strip.n[..., 1], "nz": strip.n[..., 2],
        "reflectance": strip.reflectance,
    }
    present = set(PLANES[:6]) | {"valid"}
    if np.any(strip.has_normal):
        present |= {"nx", "ny", "nz"}
    if np.any(np.isfinite(strip.reflectance)):
        present.add("reflectance")
    mask = sum(1 << i for i, name in enumerate(PLANES) if name in present)
    rows, cols = strip.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SST1_MAGIC, rows, cols, mask))
        for name in PLANES[:-1]:
            if name in present:
                fh.write(np.ascontiguousarray(planes[name], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(strip.valid, dtype=np.uint8).tobytes())


def load_strip(path, strip_id: int = 0) -> ScanStrip:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise StripIOError(f"{path}: truncated header")
        magic, rows, cols, mask = _HEADER.unpack(head)
        if magic != SST1_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if rows != STRIP_ROWS:
            raise FormatError(f"{path}: strip has {rows} rows, expected {STRIP_ROWS}")
        if cols < 1:
            raise FormatError(f"{path}: strip has no columns")
        if mask >> len(PLANES):
            raise FormatError(f"{path}: unknown plane bits in mask {mask:#x}")
        present = [name for i, name in enumerate(PLANES) if mask & (1 << i)]
        if not {"px", "py", "pz"} <= set(present):
            raise FormatError(f"{path}: object point planes missing")
        npx = rows * cols
        n_float = sum(1 for name in present if name != "valid")
        expected = _HEADER.size + n_float * npx * 4 + ("valid" in present) * npx
        if size < expected:
            raise StripIOError(f"{path}: truncated payload ({size} < {expected} bytes)")
        if size > expected:
            raise FormatError(f"{path}: payload larger than header shape implies")
        data = {}
        for name in present:
            if name == "valid":
                buf = fh.read(npx)
                data[name] = np.frombuffer(buf, dtype=np.uint8).reshape(rows, cols) != 0
            else:
                buf = fh.read(npx * 4)
                data[name] = np.frombuffer(buf, dtype="<f4").reshape(rows, cols).astype(np.float64)
    nan = np.full((rows, cols), np.nan)
    p = np.stack([data["px"], data["py"], data["pz"]], axis=2)
    h = np.stack([data.get(k, nan) for k in ("hx", "hy", "hz")], axis=2)
    n = np.stack([data.get(k, nan) for k in ("nx", "ny", "nz")], axis=2)
    finite = np.all(np.isfinite(p), axis=2)
    valid = data.get("valid", finite) & finite
    return ScanStrip(p, h, valid, n, data.get("reflectance", nan), strip_id)


def _diff(p: np.ndarray, valid: np.ndarray, axis: int):
    """Central difference along ``axis``, one-sided at gaps; NaN where impossible."""
    fwd = np.full(p.shape, np.nan)
    bwd = np.full(p.shape, np.nan)
    vf = np.zeros(valid.shape, dtype=bool)
    vb = np.zeros(valid.shape, dtype=bool)
    sl = [slice(None)] * 2
    lo, hi = list(sl), list(sl)
    lo[axis], hi[axis] = slice(None, -1), slice(1, None)
    lo, hi = tuple(lo), tuple(hi)
    fwd[lo] = p[hi]
    vf[lo] = valid[hi]
    bwd[hi] = p[lo]
    vb[hi] = valid[lo]
    out = np.full(p.shape, np.nan)
    both = vf & vb
    out[both] = fwd[both] - bwd[both]
    only_f = vf & ~vb
    out[only_f] = fwd[only_f] - p[only_f]
    only_b = vb & ~vf
    out[only_b] = p[only_b] - bwd[only_b]
    return out, vf.astype(int) + vb.astype(int)


def estimate_normals(strip: ScanStrip) -> ScanStrip:
    """Per-pixel normals from strip-space differences, oriented toward the head.

    The normal is the cross product of the row-direction and column-direction
    differences of the 4-neighbourhood. Pixels with fewer than two valid
    neighbours, or without a neighbour along both strip axes, get no normal.
    """
    p, valid = strip.p, strip.valid
    d_row, n_row = _diff(p, valid, 0)
    d_col, n_col = _diff(p, valid, 1)
    nrm = np.cross(d_row, d_col)
    length = np.linalg.norm(nrm, axis=2)
    ok = valid & (n_row + n_col >= 2) & (n_row > 0) & (n_col > 0) & (length > 1e-12)
    out = np.full(p.shape, np.nan)
    out[ok] = nrm[ok] / length[ok][:, None]
    to_head = strip.h - p
    flip = ok & (np.einsum("ijk,ijk->ij", np.where(ok[..., None], out, 0.0),
                           np.where(ok[..., None], to_head, 0.0)) < 0)
    out[flip] *= -1.0
    return replace(strip, n=out)


def horizontal_range(strip: ScanStrip) -> np.ndarray:
    dx = strip.p[..., 0] - strip.h[..., 0]
    dy = strip.p[..., 1] - strip.h[..., 1]
    return np.sqrt(dx * dx + dy * dy)


def height_above_ground(strip: ScanStrip, sensor_height: float) -> np.ndarray:
    return strip.p[..., 2] - strip.h[..., 2] + sensor_height


def filter_by_range(strip: ScanStrip, cfg: FilterConfig = FilterConfig()) -> ScanStrip:
    """Invalidate pixels whose horizontal head-to-point distance exceeds ``max_range``."""
    with np.errstate(invalid="ignore"):
        keep = horizontal_range(strip) <= cfg.max_range
    return replace(strip, valid=strip.valid & keep)


def filter_by_height(strip: ScanStrip, cfg: FilterConfig = FilterConfig()) -> ScanStrip:
    """Keep pixels with ``h_min < z_p - z_h + sensor_height < h_max`` (strict)."""
    with np.errstate(invalid="ignore"):
        hgt = height_above_ground(strip, cfg.sensor_height)
        keep = (hgt > cfg.h_min) & (hgt < cfg.h_max)
    return replace(strip, valid=strip.valid & keep)


def apply_filters(strip: ScanStrip, cfg: FilterConfig = FilterConfig()) -> ScanStrip:
    return filter_by_height(filter_by_range(strip, cfg), cfg)


def strip_to_cloud(strip: ScanStrip) -> PointCloud:
    """One point per valid pixel in row-major order.

    Heads always travel with the points. Normals are attached only when every
    valid pixel has one, otherwise they ride along as NaN-padded ``nx/ny/nz``
    extras. Strip coordinates are kept as ``strip_row`` / ``strip_col``.
    """
    rr, cc = np.nonzero(strip.valid)
    extra = {"strip_row": rr.astype(np.int32), "strip_col": cc.astype(np.int32)}
    refl = strip.reflectance[rr, cc]
    if np.any(np.isfinite(refl)):
        extra["reflectance"] = refl.astype(np.float32)
    normals = None
    has_n = strip.has_normal[rr, cc]
    if len(rr) and np.all(has_n):
        normals = strip.n[rr, cc]
    elif np.any(has_n):
        for i, k in enumerate(("nx", "ny", "nz")):
            extra[k] = strip.n[rr, cc, i]
    return PointCloud(strip.p[rr, cc], strip.h[rr, cc], normals, "world", extra)


def cloud_to_strip(cloud: PointCloud, strip_id: int = 0) -> ScanStrip:
    """Rebuild a sparse strip from a cloud made by :func:`strip_to_cloud`."""
    if "strip_row" not in cloud.extra or "strip_col" not in cloud.extra:
        raise FormatError("cloud carries no strip coordinates")
    rr = cloud.extra["strip_row"].astype(np.int64)
    cc = cloud.extra["strip_col"].astype(np.int64)
    cols = int(cc.max()) + 1 if len(cc) else 1
    shape = (STRIP_ROWS, cols)
    p = np.full(shape + (3,), np.nan)
    h = np.full(shape + (3,), np.nan)
    n = np.full(shape + (3,), np.nan)
    valid = np.zeros(shape, dtype=bool)
    p[rr, cc] = cloud.points
    if cloud.heads is not None:
        h[rr, cc] = cloud.heads
    if cloud.normals is not None:
        n[rr, cc] = cloud.normals
    elif all(k in cloud.extra for k in ("nx", "ny", "nz")):
        n[rr, cc] = np.stack([cloud.extra[k] for k in ("nx", "ny", "nz")], axis=1)
    valid[rr, cc] = True
    return ScanStrip(p, h, valid, n, None, strip_id)
