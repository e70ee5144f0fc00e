"""Binary interchange files.

DSC1 (keypoints + descriptors), little-endian::

    magic "DSC1" | kind u8 (2 or 3) | count u64 | dim u32
    per record:  2D -> u, v f64, scale f32, orientation f32, dim x f32
                 3D -> x, y, z f64, dim x f32

TRS1 (labelled training pairs)::

    magic "TRS1" | count u64 | dim u32
    per record:  label u8, dim x f32
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DSC_MAGIC = b"DSC1"
TRS_MAGIC = b"TRS1"
_DSC_HEAD = struct.Struct("<4sBQI")
_TRS_HEAD = struct.Struct("<4sQI")


class FormatError(ValueError):
    pass


@dataclass
class DescriptorFile:
    kind: int                       # 2 or 3
    coords: np.ndarray              # (n, kind) float64
    values: np.ndarray              # (n, dim) float32
    scale: Optional[np.ndarray] = None
    orientation: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in (2, 3):
            raise ValueError("kind must be 2 or 3")
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, self.kind)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.coords), -1)
        if len(self.values) != len(self.coords):
            raise ValueError("one descriptor per keypoint required")
        if self.kind == 2:
            n = len(self.coords)
            self.scale = np.zeros(n, np.float32) if self.scale is None else np.asarray(self.scale, np.float32)
            self.orientation = (np.zeros(n, np.float32) if self.orientation is None
                                else np.asarray(self.orientation, np.float32))

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _record_dtype(kind: int, dim: int) -> np.dtype:
    fields = [("coords", "<f8", (kind,))]
    if kind == 2:
        fields += [("scale", "<f4"), ("orientation", "<f4")]
    fields.append(("values", "<f4", (dim,)))
    return np.dtype(fields)


def _atomic_write(path, chunks) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def write_descriptors(path, df: DescriptorFile) -> None:
    rec = np.empty(len(df), dtype=_record_dtype(df.kind, df.dim))
    rec["coords"] = df.coords
    if df.kind == 2:
        rec["scale"] = df.scale
        rec["orientation"] = df.orientation
    rec["values"] = df.values
    _atomic_write(path, [_DSC_HEAD.pack(DSC_MAGIC, df.kind, len(df), df.dim), rec.tobytes()])


def read_descriptors(path) -> DescriptorFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _DSC_HEAD.size:
        raise FormatError(f"{path}: file shorter than DSC1 header")
    magic, kind, count, dim = _DSC_HEAD.unpack_from(data)
    if magic != DSC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if kind not in (2, 3):
        raise FormatError(f"{path}: bad kind {kind}")
    dt = _record_dtype(kind, dim)
    need = _DSC_HEAD.size + count * dt.itemsize
    if len(data) < need:
        raise FormatError(f"{path}: truncated, need {need} bytes, have {len(data)}")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_DSC_HEAD.size)
    if kind == 2:
        return DescriptorFile(2, rec["coords"].copy(), rec["values"].copy(),
                              rec["scale"].copy(), rec["orientation"].copy())
    return DescriptorFile(3, rec["coords"].copy(), rec["values"].copy())


@dataclass
class TrainingSet:
    features: np.ndarray            # (n, dim) float32
    labels: np.ndarray              # (n,) uint8, 1 = match
    provenance: Optional[np.ndarray] = None   # (n, 3) int: image index, 2D keypoint, 3D keypoint
    meta: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def write_training_set(path, ts: TrainingSet) -> None:
    dim = ts.features.shape[1]
    rec = np.empty(len(ts), dtype=np.dtype([("label", "u1"), ("values", "<f4", (dim,))]))
    rec["label"] = ts.labels
    rec["values"] = ts.features
    _atomic_write(path, [_TRS_HEAD.pack(TRS_MAGIC, len(ts), dim), rec.tobytes()])
    side = {"meta": ts.meta or {}}
    if ts.provenance is not None:
        side["provenance"] = np.asarray(ts.provenance).tolist()
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, sort_keys=True)


def read_training_set(path) -> TrainingSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _TRS_HEAD.size:
        raise FormatError(f"{path}: file shorter than TRS1 header")
    magic, count, dim = _TRS_HEAD.unpack_from(data)
    if magic != TRS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    dt = np.dtype([("label", "u1"), ("values", "<f4", (dim,))])
    need = _TRS_HEAD.size + count * dt.itemsize
    if len(data) < need:
        raise FormatError(f"{path}: truncated, need {need} bytes, have {len(data)}")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_TRS_HEAD.size)
    meta, prov = None, None
    if os.path.exists(f"{path}.json"):
        with open(f"{path}.json") as fh:
            side = json.load(fh)
        meta = side.get("meta")
        if "provenance" in side:
            prov = np.asarray(side["provenance"], dtype=np.int64).reshape(-1, 3)
    return TrainingSet(rec["values"].copy(), rec["label"].copy(), prov, meta)
