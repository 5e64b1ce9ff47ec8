"""Binary file formats: frame matrices, tensor checkpoints, stylebook files.

All payloads are little-endian. Writers are deterministic: identical inputs
produce byte-identical files, so outputs can be compared by hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"SBM1"
CHECKPOINT_MAGIC = b"SBC1"
STYLEBOOK_MAGIC = b"SBK1"

CHECKPOINT_VERSION = 1
STYLEBOOK_VERSION = 1

_FLAG_HAS_PROVENANCE = 1


class FormatError(ValueError):
    """Raised when a file does not match its declared binary format."""


def write_matrix(path, matrix: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Write a T x D float32 matrix, optionally followed by T int32 labels.

    Layout: 16-byte header (magic, T, D, label-block offset; offset 0 means
    no labels), then row-major float32 data, then the label block.
    """
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    label_offset = 0
    label_bytes = b""
    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype="<i4")
        if labels.shape != (rows,):
            raise ValueError(f"labels must have shape ({rows},), got {labels.shape}")
        label_offset = 16 + matrix.nbytes
        label_bytes = labels.tobytes()
    header = struct.pack("<4sIII", MATRIX_MAGIC, rows, cols, label_offset)
    Path(path).write_bytes(header + matrix.tobytes() + label_bytes)


def read_matrix(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a matrix file written by :func:`write_matrix`."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    magic, rows, cols, label_offset = struct.unpack_from("<4sIII", raw, 0)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    end = 16 + rows * cols * 4
    if len(raw) < end:
        raise FormatError(f"{path}: truncated payload")
    matrix = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=16)
    matrix = matrix.reshape(rows, cols).copy()
    labels = None
    if label_offset:
        if label_offset != end or len(raw) < end + rows * 4:
            raise FormatError(f"{path}: bad label block")
        labels = np.frombuffer(raw, dtype="<i4", count=rows, offset=label_offset)
        labels = labels.astype(np.int64)
    return matrix, labels


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Save named float32 tensors plus a JSON metadata block in one file.

    Layout: magic, u32 version, u64 header length, header JSON (table of
    contents with shapes and offsets, plus user metadata), concatenated
    float32 payload. Tensor names are sorted so the file is deterministic.
    """
    toc = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        toc[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload += arr.tobytes()
    header = {"meta": meta or {}, "tensors": toc}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = struct.pack("<4sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    Path(path).write_bytes(prefix + header_bytes + bytes(payload))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a tensor container written by :func:`save_tensors`."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    magic, version, header_len = struct.unpack_from("<4sIQ", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    data_start = 16 + header_len
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=data_start + entry["offset"])
        tensors[name] = arr.reshape(shape).copy()
    return tensors, header["meta"]


def write_stylebook_file(path, values: np.ndarray, provenance: str = "") -> None:
    """Write an enrollment artifact: a Q x d_s style summary plus provenance.

    Layout: 24-byte header (magic, u32 version, u32 Q, u32 d_s, u32 flags,
    u32 reserved), Q*d_s float32 payload, then u32 length + UTF-8 provenance.
    """
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"stylebook must be 2-D, got shape {values.shape}")
    q, d_s = values.shape
    prov = provenance.encode("utf-8")
    flags = _FLAG_HAS_PROVENANCE if prov else 0
    header = struct.pack("<4sIIIII", STYLEBOOK_MAGIC, STYLEBOOK_VERSION, q, d_s, flags, 0)
    body = values.tobytes()
    if prov:
        body += struct.pack("<I", len(prov)) + prov
    Path(path).write_bytes(header + body)


def read_stylebook_file(path) -> tuple[np.ndarray, str]:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header")
    magic, version, q, d_s, flags, _ = struct.unpack_from("<4sIIIII", raw, 0)
    if magic != STYLEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STYLEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    end = 24 + q * d_s * 4
    if len(raw) < end:
        raise FormatError(f"{path}: truncated payload")
    values = np.frombuffer(raw, dtype="<f4", count=q * d_s, offset=24).reshape(q, d_s).copy()
    provenance = ""
    if flags & _FLAG_HAS_PROVENANCE:
        (prov_len,) = struct.unpack_from("<I", raw, end)
        provenance = raw[end + 4 : end + 4 + prov_len].decode("utf-8")
    return values, provenance


def stylebook_payload_bytes(path) -> int:
    """Size in bytes of the style matrix payload (header and provenance excluded)."""
    raw = Path(path).read_bytes()
    magic, _, q, d_s, _, _ = struct.unpack_from("<4sIIIII", raw, 0)
    if magic != STYLEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    return q * d_s * 4


def write_json(path, obj) -> None:
    """Deterministic JSON writer (sorted keys, trailing newline)."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
