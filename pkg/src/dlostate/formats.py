# Copyright 2026 The dlostate authors
"""On-disk formats: frame records, node sequences, visibility, XYZ text.

All binary integers and floats are little-endian.

Frame record (``.dlof``)::

    4 bytes   magic b"DLOF"
    uint16    version (1)
    uint32    N points, uint32 M nodes
    N*3 f32   point cloud X, row-major
    M*3 f32   ground-truth nodes Y
    M bytes   occlusion mask (0 or 1)
    uint32    metadata length L, then L bytes of UTF-8 JSON (sorted keys)

Node sequence (``.dlon``) and visibility (``.dlov``)::

    4 bytes   magic b"DLON" or b"DLOV"
    uint16    version (1)
    uint32    rows, uint32 columns (3 for nodes, 1 for visibility)
    rows*columns f64 values

XYZ text: ``#``-prefixed ``key: value`` header lines followed by one
``x y z`` line per row, written with 17 significant digits so that values
survive a round trip exactly.
"""

from __future__ import annotations

import json
import os
import struct

from typing import Any, Final, Mapping

import numpy as np

from dlostate.errors import DataFormatError
from dlostate.synth import Frame


FRAME_MAGIC: Final[bytes] = b"DLOF"
NODES_MAGIC: Final[bytes] = b"DLON"
VISIBILITY_MAGIC: Final[bytes] = b"DLOV"
FORMAT_VERSION: Final[int] = 1

_FRAME_HEADER: Final[struct.Struct] = struct.Struct("<4sHII")
_ARRAY_HEADER: Final[struct.Struct] = struct.Struct("<4sHII")


class _Reader:
    """Sequential reader over a byte buffer with bounds checks."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise DataFormatError(f"{self.path}: truncated file")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple[Any, ...]:
        return fmt.unpack(self.take(fmt.size))

    def floats(self, count: int, dtype: str) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * width), dtype=dtype)


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e


def encode_frame(frame: Frame) -> bytes:
    """Serialise a frame record."""
    points = np.ascontiguousarray(frame.points, dtype="<f4")
    nodes = np.ascontiguousarray(frame.nodes, dtype="<f4")
    mask = np.asarray(frame.occluded, dtype=np.uint8)
    blob = json.dumps(frame.meta, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            _FRAME_HEADER.pack(
                FRAME_MAGIC, FORMAT_VERSION, len(points), len(nodes)
            ),
            points.tobytes(),
            nodes.tobytes(),
            mask.tobytes(),
            struct.pack("<I", len(blob)),
            blob,
        ]
    )


def decode_frame(data: bytes, path: str = "<bytes>") -> Frame:
    """Parse a frame record; arrays are returned as float64."""
    reader = _Reader(data, path)
    magic, version, n_points, n_nodes = reader.unpack(_FRAME_HEADER)
    if magic != FRAME_MAGIC:
        raise DataFormatError(f"{path}: not a frame record")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported frame version {version}")
    points = reader.floats(n_points * 3, "<f4").reshape(n_points, 3)
    nodes = reader.floats(n_nodes * 3, "<f4").reshape(n_nodes, 3)
    mask = np.frombuffer(reader.take(n_nodes), dtype=np.uint8).astype(bool)
    (blob_len,) = struct.unpack("<I", reader.take(4))
    meta = json.loads(reader.take(blob_len).decode("utf-8"))
    return Frame(
        points=points.astype(np.float64),
        nodes=nodes.astype(np.float64),
        occluded=mask,
        meta=meta,
    )


def write_frame(path: str, frame: Frame) -> None:
    with open(path, "wb") as f:
        f.write(encode_frame(frame))


def read_frame(path: str) -> Frame:
    return decode_frame(_read_bytes(path), path)


def _write_array(path: str, magic: bytes, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    rows, cols = values.shape
    with open(path, "wb") as f:
        f.write(_ARRAY_HEADER.pack(magic, FORMAT_VERSION, rows, cols))
        f.write(values.tobytes())


def _read_array(path: str, magic: bytes) -> np.ndarray:
    reader = _Reader(_read_bytes(path), path)
    found, version, rows, cols = reader.unpack(_ARRAY_HEADER)
    if found != magic:
        raise DataFormatError(
            f"{path}: expected magic {magic!r}, found {found!r}"
        )
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    values = reader.floats(rows * cols, "<f8").reshape(rows, cols)
    return values.astype(np.float64)


def write_nodes(path: str, nodes: np.ndarray) -> None:
    nodes = np.asarray(nodes)
    if nodes.ndim != 2 or nodes.shape[1] != 3:
        raise DataFormatError(
            f"node sequence must be (M, 3), got {nodes.shape}"
        )
    _write_array(path, NODES_MAGIC, nodes)


def read_nodes(path: str) -> np.ndarray:
    nodes = _read_array(path, NODES_MAGIC)
    if nodes.shape[1] != 3:
        raise DataFormatError(f"{path}: node rows must have 3 columns")
    return nodes


def write_visibility(path: str, visibility: np.ndarray) -> None:
    _write_array(path, VISIBILITY_MAGIC, np.reshape(visibility, (-1, 1)))


def read_visibility(path: str) -> np.ndarray:
    return _read_array(path, VISIBILITY_MAGIC)[:, 0]


def write_xyz(
    path: str, rows: np.ndarray, header: Mapping[str, Any] | None = None
) -> None:
    """Write one ``x y z`` line per row after a ``#`` header."""
    lines = [f"# {key}: {value}" for key, value in (header or {}).items()]
    for row in np.asarray(rows, dtype=np.float64):
        lines.append(" ".join(f"{value:.17g}" for value in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_xyz(path: str) -> np.ndarray:
    """Parse an XYZ text file, ignoring ``#`` lines and blank lines."""
    rows = []
    try:
        with open(path, encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise DataFormatError(
                        f"{path}:{number}: expected 3 values, got {len(parts)}"
                    )
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as e:
                    raise DataFormatError(f"{path}:{number}: {e}") from e
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def read_cloud(path: str) -> tuple[np.ndarray, Frame | None]:
    """Load a point cloud from a frame record or an XYZ text file.

    :return: the points and, for frame records, the whole frame.
    """
    if os.path.splitext(path)[1] == ".dlof":
        frame = read_frame(path)
        return frame.points, frame
    return read_xyz(path), None
