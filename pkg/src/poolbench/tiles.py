"""Embedding tile format and dataset manifest.

A tile is a little-endian binary file::

    bytes 0-3    magic b"EMB1"
    bytes 4-15   u32 H, u32 W, u32 D
    bytes 16-    H*W*D binary32 values, row-major, channel fastest

The manifest is JSON lines. The first line is a header object carrying
``class_names`` and ``channels``; every following line is one patch record.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ChannelMismatch,
    DuplicateId,
    IoFailure,
    LabelOutOfRange,
    MalformedLine,
    NonFiniteValue,
    TruncatedFile,
)

TILE_MAGIC = b"EMB1"
HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class PatchTensor:
    """One H x W x D pixel-embedding patch stored as float32, channel-last."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected a non-empty (H, W, D) array, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """(N, D) view of the patch, pixels in row-major order."""
        return self.data.reshape(-1, self.channels)

    def __eq__(self, other):
        if not isinstance(other, PatchTensor):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


def encode_tile(tensor: PatchTensor) -> bytes:
    h, w, d = tensor.data.shape
    return HEADER.pack(TILE_MAGIC, h, w, d) + tensor.data.astype("<f4").tobytes()


def decode_tile(buf: bytes) -> PatchTensor:
    if len(buf) < HEADER.size:
        if buf[:4] != TILE_MAGIC[: len(buf)]:
            raise BadMagic("not an EMB1 tile")
        raise TruncatedFile(f"header needs {HEADER.size} bytes, file has {len(buf)}")
    magic, h, w, d = HEADER.unpack_from(buf)
    if magic != TILE_MAGIC:
        raise BadMagic(f"expected magic {TILE_MAGIC!r}, got {magic!r}")
    if min(h, w, d) < 1:
        raise TruncatedFile(f"header declares an empty tensor ({h}x{w}x{d})")
    expected = h * w * d * 4
    payload = len(buf) - HEADER.size
    if payload < expected:
        raise TruncatedFile(f"payload has {payload} bytes, header promises {expected}")
    if payload > expected:
        raise TruncatedFile(f"payload has {payload - expected} trailing bytes beyond {h}x{w}x{d}")
    values = np.frombuffer(buf, dtype="<f4", count=h * w * d, offset=HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteValue(int(bad[0]), float(values[bad[0]]))
    return PatchTensor(values.astype(np.float32).reshape(h, w, d))


def read_tile(path) -> PatchTensor:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_tile(buf)


def write_tile(tensor: PatchTensor, path) -> None:
    if not np.all(np.isfinite(tensor.data)):
        idx = int(np.flatnonzero(~np.isfinite(tensor.data.ravel()))[0])
        raise NonFiniteValue(idx, float(tensor.data.ravel()[idx]))
    try:
        Path(path).write_bytes(encode_tile(tensor))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class PatchRecord:
    id: str
    tensor_path: str
    label: int
    lon: float
    lat: float
    source: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tensor_path": self.tensor_path,
            "label": self.label,
            "lon": self.lon,
            "lat": self.lat,
            "source": self.source,
        }


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    class_names: list[str]
    channels: int
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def by_id(self) -> dict[str, PatchRecord]:
        return {r.id: r for r in self.records}

    def tile_path(self, record: PatchRecord) -> Path:
        return self.root / record.tensor_path

    def load_tensor(self, record: PatchRecord) -> PatchTensor:
        tensor = read_tile(self.tile_path(record))
        if tensor.channels != self.channels:
            raise ChannelMismatch(
                f"{record.id}: tile has D={tensor.channels}, manifest declares {self.channels}"
            )
        return tensor

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(
            [r for r in self.records if r.id in keep], list(self.class_names), self.channels, self.root
        )


_RECORD_KEYS = ("id", "tensor_path", "label", "lon", "lat", "source")


def _parse_record(obj, line_no: int, n_classes: int) -> PatchRecord:
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "record is not an object")
    missing = [k for k in _RECORD_KEYS if k not in obj]
    if missing:
        raise MalformedLine(line_no, f"missing keys {missing}")
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise MalformedLine(line_no, f"label must be an integer, got {label!r}")
    try:
        lon = float(obj["lon"])
        lat = float(obj["lat"])
    except (TypeError, ValueError):
        raise MalformedLine(line_no, "lon/lat must be numbers") from None
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise MalformedLine(line_no, "lon/lat must be finite")
    if not 0 <= label < n_classes:
        raise LabelOutOfRange(f"line {line_no}: label {label} outside [0, {n_classes})")
    return PatchRecord(str(obj["id"]), str(obj["tensor_path"]), label, lon, lat, str(obj["source"]))


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest. Tiles are not opened."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    class_names: list[str] = []
    channels = 0
    records: list[PatchRecord] = []
    seen: set[str] = set()
    header_seen = False
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
        if not header_seen:
            if not isinstance(obj, dict) or "class_names" not in obj or "channels" not in obj:
                raise MalformedLine(line_no, "first line must be a header with class_names and channels")
            class_names = [str(c) for c in obj["class_names"]]
            channels = obj["channels"]
            if isinstance(channels, bool) or not isinstance(channels, int) or channels < 1:
                raise MalformedLine(line_no, f"channels must be a positive integer, got {channels!r}")
            header_seen = True
            continue
        rec = _parse_record(obj, line_no, len(class_names))
        if rec.id in seen:
            raise DuplicateId(f"line {line_no}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return DatasetManifest(records, class_names, channels, path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [json.dumps({"class_names": manifest.class_names, "channels": manifest.channels})]
    lines += [json.dumps(r.to_json()) for r in manifest.records]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def iter_tensors(manifest: DatasetManifest, ids=None):
    """Yield (record, tensor) pairs in manifest order, optionally restricted to ``ids``."""
    keep = None if ids is None else set(ids)
    for rec in manifest.records:
        if keep is None or rec.id in keep:
            yield rec, manifest.load_tensor(rec)


__all__ = [
    "PatchTensor",
    "PatchRecord",
    "DatasetManifest",
    "read_tile",
    "write_tile",
    "encode_tile",
    "decode_tile",
    "load_manifest",
    "save_manifest",
    "iter_tensors",
    "TILE_MAGIC",
]
