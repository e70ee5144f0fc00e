"""Minimal PLY reader/writer for vertex clouds (ascii 1.0 and binary_little_endian 1.0)."""
from __future__ import annotations

import os

import numpy as np

from .pointcloud import PointCloud

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("byte 0: missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"byte {end}: header not terminated by newline")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, raw in enumerate(lines, start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[2] != "1.0" or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported format {' '.join(tok[1:])!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"line {lineno}: malformed element line")
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyError(f"line {lineno}: bad element count {tok[2]!r}") from None
            elements.append({"name": tok[1], "count": count, "props": []})
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if tok[1] == "list":
                if len(tok) != 5:
                    raise PlyError(f"line {lineno}: malformed list property")
                elements[-1]["props"].append((tok[4], "list"))
            else:
                if len(tok) != 3 or tok[1] not in _TYPES:
                    raise PlyError(f"line {lineno}: unknown property type {raw!r}")
                elements[-1]["props"].append((tok[2], _TYPES[tok[1]]))
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements, nl + 1, len(lines) + 1


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body, body_line = _parse_header(data)

    vidx = next((i for i, e in enumerate(elements) if e["name"] == "vertex"), None)
    if vidx is None:
        raise PlyError("no vertex element")
    for e in elements[:vidx + 1]:
        if any(t == "list" for _, t in e["props"]):
            raise PlyError(f"unsupported element layout: list property in {e['name']!r} before vertex data ends")
    vertex = elements[vidx]
    names = [n for n, _ in vertex["props"]]
    for c in "xyz":
        if c not in names:
            raise PlyError(f"vertex element lacks property {c!r}")
    n = vertex["count"]

    if fmt == "ascii":
        text = data[body:].decode("ascii", errors="replace").splitlines()
        skip = sum(e["count"] for e in elements[:vidx])
        rows = text[skip:skip + n]
        if len(rows) < n:
            raise PlyError(f"line {body_line + skip + len(rows)}: truncated payload, "
                           f"expected {n} vertices, found {len(rows)}")
        arr = np.empty((n, len(names)))
        for r, line in enumerate(rows):
            tok = line.split()
            if len(tok) < len(names):
                raise PlyError(f"line {body_line + skip + r}: expected {len(names)} values, got {len(tok)}")
            try:
                arr[r] = [float(t) for t in tok[:len(names)]]
            except ValueError:
                raise PlyError(f"line {body_line + skip + r}: non-numeric value") from None
        cols = {name: arr[:, i] for i, name in enumerate(names)}
    else:
        offset = body
        for e in elements[:vidx]:
            offset += e["count"] * np.dtype([(f"p{i}", "<" + t) for i, (_, t) in enumerate(e["props"])]).itemsize
        dt = np.dtype([(name, "<" + t) for name, t in vertex["props"]])
        need = offset + n * dt.itemsize
        if len(data) < need:
            raise PlyError(f"byte {len(data)}: truncated payload, need {need} bytes for {n} vertices")
        rec = np.frombuffer(data, dtype=dt, count=n, offset=offset)
        cols = {name: rec[name] for name in names}

    points = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(float)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.column_stack([cols["red"], cols["green"], cols["blue"]]).astype(np.uint8)
    normals = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]]).astype(float)
    intens = np.asarray(cols["intensity"], dtype=float) if "intensity" in cols else None
    return PointCloud(points, colors=colors, intensities=intens, normals=normals)


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if cloud.normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
        cols += [cloud.normals[:, 0], cloud.normals[:, 1], cloud.normals[:, 2]]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        cols += [cloud.colors[:, 0], cloud.colors[:, 1], cloud.colors[:, 2]]
    if cloud.intensities is not None:
        fields += [("intensity", "f8")]
        cols += [cloud.intensities]
    plyname = {"f8": "double", "u1": "uchar"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {plyname[t]} {name}" for name, t in fields]
    header.append("end_header")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(len(cloud), dtype=[(name, "<" + t) for name, t in fields])
            for (name, _), c in zip(fields, cols):
                rec[name] = c
            fh.write(rec.tobytes())
        else:
            fmts = ["%d" if t == "u1" else "%.17g" for _, t in fields]
            for i in range(len(cloud)):
                fh.write((" ".join(f % c[i] for f, c in zip(fmts, cols)) + "\n").encode("ascii"))
    os.replace(tmp, path)
