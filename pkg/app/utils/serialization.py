"""File formats shared by checkpoints, benchmark exports and reports.

Binary tensor file layout (all integers little-endian):

    b"QUAD" | version u32 | record count u32
    per record: name length u32 | UTF-8 name | rank u32 | dims u64 * rank
                | raw float64 values (row-major, little-endian)
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"QUAD"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


# ──────────────── Binary tensor files ────────────────

def encode_tensors(named: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named float arrays into the binary tensor layout."""
    chunks: List[bytes] = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(named))]
    for name, array in named.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded_name = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U64.pack(dim) for dim in array.shape)
        chunks.append(array.tobytes(order="C"))
    return b"".join(chunks)


def decode_tensors(payload: bytes) -> Dict[str, np.ndarray]:
    """Inverse of :func:`encode_tensors`."""
    if payload[:4] != MAGIC:
        raise ValueError("Not a tensor file: bad magic")
    offset = 4
    (version,) = _U32.unpack_from(payload, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise ValueError(f"Unsupported tensor file version {version}")
    (count,) = _U32.unpack_from(payload, offset)
    offset += 4

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = _U32.unpack_from(payload, offset)
        offset += 4
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = _U32.unpack_from(payload, offset)
        offset += 4
        shape = []
        for _ in range(rank):
            (dim,) = _U64.unpack_from(payload, offset)
            shape.append(dim)
            offset += 8
        n_values = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(payload, dtype="<f8", count=n_values, offset=offset)
        offset += 8 * n_values
        tensors[name] = values.astype(np.float64).reshape(shape)
    if offset != len(payload):
        raise ValueError("Trailing bytes after last tensor record")
    return tensors


def write_tensor_file(path: str | Path, named: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(named))
    logger.debug("Wrote %d tensors to %s", len(named), path)
    return path


def read_tensor_file(path: str | Path) -> Dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


# ──────────────── Text formats ────────────────

def encode_jsonl(records: Iterable[Mapping[str, Any]]) -> bytes:
    """Compact, key-sorted JSON-lines encoding (the exact bytes write_jsonl stores)."""
    return b"".join(
        json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
        for record in records
    )


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_jsonl(records))
    return path


def read_jsonl(path: str | Path) -> Iterator[Dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """UTF-8, comma-separated, header row always present."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if value is None else value for value in row])
    return path


def read_csv(path: str | Path) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ──────────────── Hashing ────────────────

def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_arrays(arrays: Iterable[np.ndarray]) -> str:
    """Bitwise digest of a sequence of arrays (order-sensitive)."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array, dtype="<f8")
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()
