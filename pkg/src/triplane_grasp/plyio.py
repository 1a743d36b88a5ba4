"""Minimal PLY reader/writer (ascii and binary_little_endian).

Only scalar properties are written. Reading understands list properties too
so that files carrying faces can still be loaded; faces are ignored by the
point-cloud helpers.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .geometry import PointCloud

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


class PlyError(ValueError):
    """Malformed or unsupported PLY content."""


def _parse_header(f):
    magic = f.readline().strip()
    if magic != b"ply":
        raise PlyError("missing 'ply' magic line")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, list_count_dtype or None)])
    while True:
        line = f.readline()
        if not line:
            raise PlyError("unexpected end of file inside header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            fmt = tokens[1]
            if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyError(f"unknown format {fmt!r}")
        elif key == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError("property before any element")
            if tokens[1] == "list":
                try:
                    cnt, item = _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]
                except KeyError as exc:
                    raise PlyError(f"unknown property type {exc}") from None
                elements[-1][2].append((tokens[4], item, cnt))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise PlyError(f"unknown property type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]], None))
        elif key == "end_header":
            break
        else:
            raise PlyError(f"unexpected header line: {line!r}")
    if fmt is None:
        raise PlyError("missing format line")
    return fmt, elements


def read_ply(path) -> dict[str, dict[str, np.ndarray]]:
    """Return ``{element_name: {property_name: array}}``."""
    data = Path(path).read_bytes()
    f = io.BytesIO(data)
    fmt, elements = _parse_header(f)
    out: dict[str, dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        lines = f.read().decode("ascii").splitlines()
        pos = 0
        for name, count, props in elements:
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(count):
                if pos >= len(lines):
                    raise PlyError(f"element {name!r} truncated")
                tok = lines[pos].split()
                pos += 1
                j = 0
                for pname, dt, cnt in props:
                    if cnt is None:
                        cols[pname].append(tok[j])
                        j += 1
                    else:
                        k = int(tok[j])
                        cols[pname].append(np.array(tok[j + 1:j + 1 + k], dtype=dt))
                        j += 1 + k
            out[name] = {
                pname: (np.array(cols[pname], dtype=dt) if cnt is None else cols[pname])
                for pname, dt, cnt in props
            }
        return out

    endian = "<" if fmt == "binary_little_endian" else ">"
    buf = memoryview(data)
    offset = f.tell()
    for name, count, props in elements:
        if all(cnt is None for _, _, cnt in props):
            dtype = np.dtype([(p, endian + dt) for p, dt, _ in props])
            nbytes = dtype.itemsize * count
            if offset + nbytes > len(data):
                raise PlyError(f"element {name!r} truncated")
            arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype, count=count)
            offset += nbytes
            out[name] = {p: arr[p].astype(arr[p].dtype.newbyteorder("=")) for p, _, _ in props}
        else:
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, dt, cnt in props:
                    if cnt is None:
                        v = np.frombuffer(buf[offset:offset + np.dtype(dt).itemsize], dtype=endian + dt)[0]
                        offset += np.dtype(dt).itemsize
                        cols[pname].append(v)
                    else:
                        k = int(np.frombuffer(buf[offset:offset + np.dtype(cnt).itemsize], dtype=endian + cnt)[0])
                        offset += np.dtype(cnt).itemsize
                        size = k * np.dtype(dt).itemsize
                        cols[pname].append(np.frombuffer(buf[offset:offset + size], dtype=endian + dt).copy())
                        offset += size
            out[name] = {p: (np.array(cols[p]) if cnt is None else cols[p]) for p, _, cnt in props}
    return out


def write_ply(path, vertex: dict[str, np.ndarray], binary: bool = True, comments=()) -> None:
    """Write a single ``vertex`` element with scalar properties, in dict order."""
    names = list(vertex)
    arrays = [np.asarray(vertex[n]) for n in names]
    count = len(arrays[0]) if arrays else 0
    for n, a in zip(names, arrays):
        if a.ndim != 1 or len(a) != count:
            raise ValueError(f"property {n!r} must be 1-D with {count} entries")
    codes = [a.dtype.str[1:] for a in arrays]
    for n, c in zip(names, codes):
        if c not in _NP_TO_PLY:
            raise ValueError(f"unsupported dtype {c!r} for property {n!r}")

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {count}")
    header += [f"property {_NP_TO_PLY[c]} {n}" for n, c in zip(names, codes)]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        dtype = np.dtype([(n, "<" + c) for n, c in zip(names, codes)])
        rec = np.empty(count, dtype=dtype)
        for n, a in zip(names, arrays):
            rec[n] = a
        body = rec.tobytes()
    else:
        rows = []
        for i in range(count):
            rows.append(" ".join(_ascii_value(a[i], a.dtype.kind) for a in arrays))
        body = ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")
    Path(path).write_bytes(head + body)


def _ascii_value(v, kind: str) -> str:
    # repr of the widened value round-trips exactly through float32 or float64
    return repr(float(v)) if kind == "f" else str(int(v))


def write_cloud(path, cloud: PointCloud, binary: bool = True, dtype="f8") -> None:
    """Write positions, optional normals and optional 8-bit colors.

    Positions and normals default to double precision so a write/read cycle
    is lossless.
    """
    props = {}
    for i, ax in enumerate("xyz"):
        props[ax] = cloud.points[:, i].astype(dtype)
    if cloud.normals is not None:
        for i, ax in enumerate(("nx", "ny", "nz")):
            props[ax] = cloud.normals[:, i].astype(dtype)
    if cloud.colors is not None:
        rgb = np.round(cloud.colors * 255).astype(np.uint8)
        for i, ax in enumerate(("red", "green", "blue")):
            props[ax] = rgb[:, i]
    write_ply(path, props, binary=binary)


def read_cloud(path) -> PointCloud:
    ply = read_ply(path)
    if "vertex" not in ply:
        raise PlyError("no vertex element")
    v = ply["vertex"]
    try:
        pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise PlyError(f"vertex element lacks property {exc}") from None
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.all(lengths > 0):
            # float32 files drift from unit length; renormalize
            if np.any(np.abs(lengths - 1) > 1e-9):
                normals = normals / lengths
        else:
            normals = None
    colors = None
    if all(k in v for k in ("red", "green", "blue")):
        rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1)
        colors = rgb.astype(np.float64) / (255.0 if rgb.dtype.kind in "ui" else 1.0)
        colors = np.clip(colors, 0, 1)
    return PointCloud(pts, normals, colors)
