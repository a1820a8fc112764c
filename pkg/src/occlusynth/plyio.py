"""PLY reader/writer for :class:`~occlusynth.geom.PointCloud`.

Handles ``ascii`` and ``binary_little_endian`` vertex data. Recognised
properties: ``x y z`` (required), ``hx hy hz`` (sensor head), ``nx ny nz``
(normal). Any other scalar vertex property round-trips through
``PointCloud.extra``; list properties and non-vertex elements are dropped with
a warning.
"""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import FormatError
from .geom import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}

_HEAD = ("hx", "hy", "hz")
_NORMAL = ("nx", "ny", "nz")
_XYZ = ("x", "y", "z")


def _parse_header(fh) -> Tuple[str, int, list, Optional[str]]:
    magic = fh.readline().strip()
    if magic != b"ply":
        raise FormatError("not a PLY file")
    fmt = None
    frame = None
    elements: List[list] = []
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tok = line.decode("ascii", "replace").split()
        if tok[:2] == ["comment", "frame"] and len(tok) > 2:
            frame = tok[2]
            continue
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise FormatError("first PLY element must be 'vertex'")
    name, count, props = elements[0]
    if len(elements) > 1:
        warnings.warn("non-vertex PLY elements are ignored", stacklevel=3)
    return fmt, count, props, frame


def read_ply(path, frame: Optional[str] = None) -> PointCloud:
    """Read a PLY file; the frame tag comes from the header unless given."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props, stored_frame = _parse_header(fh)
        frame = frame or stored_frame or "world"
        if any(p[1] == "list" for p in props):
            if fmt != "ascii":
                raise FormatError("list vertex properties are only supported in ascii PLY")
            warnings.warn("list vertex properties are dropped", stacklevel=2)
        scalar = [(p[0], p[1]) for p in props if p[1] != "list"]
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in scalar])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise FormatError("truncated PLY payload")
            data = np.frombuffer(raw, dtype=dtype, count=count)
            cols = {n: np.array(data[n]) for n, _ in scalar}
        else:
            rows = [fh.readline().split() for _ in range(count)]
            if any(len(r) == 0 for r in rows):
                raise FormatError("truncated PLY payload")
            cols = {n: np.empty(count, dtype=t) for n, t in scalar}
            for i, r in enumerate(rows):
                pos = 0
                for p in props:
                    if p[1] == "list":
                        pos += 1 + int(r[pos])
                    else:
                        cols[p[0]][i] = float(r[pos]) if p[1][0] == "f" else int(r[pos])
                        pos += 1
    for n in _XYZ:
        if n not in cols:
            raise FormatError("PLY vertex element lacks x/y/z")
    pts = np.stack([cols.pop(n).astype(np.float64) for n in _XYZ], axis=1)
    heads = normals = None
    if all(n in cols for n in _HEAD):
        heads = np.stack([cols.pop(n).astype(np.float64) for n in _HEAD], axis=1)
    if all(n in cols for n in _NORMAL):
        cand = np.stack([cols[n].astype(np.float64) for n in _NORMAL], axis=1)
        norm = np.linalg.norm(cand, axis=1, keepdims=True)
        # partial normals (NaN rows) stay as plain extras
        if np.all(np.isfinite(norm)) and np.all(norm > 0):
            normals = cand / norm
            for n in _NORMAL:
                del cols[n]
    return PointCloud(pts, heads, normals, frame, cols)


def write_ply(path, cloud: PointCloud, binary: bool = True, coord_dtype: str = "f8") -> None:
    """Write ``cloud``; ``coord_dtype`` is ``"f8"`` or ``"f4"`` for x/y/z, heads and normals."""
    if coord_dtype not in ("f4", "f8"):
        raise ValueError("coord_dtype must be 'f4' or 'f8'")
    fields = [(n, coord_dtype) for n in _XYZ]
    cols = {n: cloud.points[:, i] for i, n in enumerate(_XYZ)}
    if cloud.heads is not None:
        fields += [(n, coord_dtype) for n in _HEAD]
        cols.update({n: cloud.heads[:, i] for i, n in enumerate(_HEAD)})
    if cloud.normals is not None:
        fields += [(n, coord_dtype) for n in _NORMAL]
        cols.update({n: cloud.normals[:, i] for i, n in enumerate(_NORMAL)})
    for k, v in cloud.extra.items():
        code = v.dtype.str[1:]
        if v.dtype == np.bool_:
            code = "u1"
        if code not in _NP_TO_PLY:
            warnings.warn(f"extra property {k!r} of dtype {v.dtype} dropped", stacklevel=2)
            continue
        fields.append((k, code))
        cols[k] = v
    dtype = np.dtype([(n, "<" + t) for n, t in fields])
    data = np.empty(len(cloud), dtype=dtype)
    for n, _ in fields:
        data[n] = cols[n]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"comment frame {cloud.frame}", f"element vertex {len(cloud)}"]
    header += [f"property {_NP_TO_PLY[t]} {n}" for n, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(x.item()) for x in row) + "\n").encode("ascii"))
