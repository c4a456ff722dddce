"""Square labelled matrices on disk: TSV and a small binary container.

Binary layout (all little-endian)::

    magic      4 bytes   b"PKS1" (OTU similarity) or b"PKK1" (sample kernel)
    n          uint64
    ids        n x (uint32 byte length, UTF-8 bytes)
    payload    n*n float64, row-major
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from phylokern.errors import DataValidationError

SIMILARITY_MAGIC = b"PKS1"
KERNEL_MAGIC = b"PKK1"
_MAGICS = (SIMILARITY_MAGIC, KERNEL_MAGIC)

PathLike = Union[str, Path]


def to_tsv(ids: Sequence[str], values: np.ndarray, corner: str = "") -> str:
    buf = io.StringIO()
    buf.write("\t".join([corner, *ids]) + "\n")
    for name, row in zip(ids, np.asarray(values, dtype=np.float64)):
        buf.write("\t".join([name, *(repr(float(v)) for v in row)]) + "\n")
    return buf.getvalue()


def from_tsv(text: str) -> tuple[tuple[str, ...], np.ndarray]:
    lines = [ln.rstrip("\r\n") for ln in io.StringIO(text) if ln.strip()]
    if not lines:
        raise DataValidationError("empty matrix file")
    col_ids = tuple(lines[0].split("\t")[1:])
    row_ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(col_ids) + 1:
            raise DataValidationError(f"line {lineno}: expected {len(col_ids) + 1} fields")
        row_ids.append(cells[0])
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise DataValidationError(f"line {lineno}: {exc}") from None
    if tuple(row_ids) != col_ids:
        raise DataValidationError("row ids must match column ids in a square matrix file")
    return col_ids, np.array(rows, dtype=np.float64).reshape(len(row_ids), len(col_ids))


def to_binary(ids: Sequence[str], values: np.ndarray, magic: bytes) -> bytes:
    if magic not in _MAGICS:
        raise ValueError(f"unknown magic {magic!r}")
    values = np.ascontiguousarray(values, dtype="<f8")
    n = len(ids)
    if values.shape != (n, n):
        raise ValueError("matrix must be square and match ids")
    parts = [magic, struct.pack("<Q", n)]
    for name in ids:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(values.tobytes())
    return b"".join(parts)


def from_binary(data: bytes, magic: bytes = None) -> tuple[tuple[str, ...], np.ndarray, bytes]:
    if len(data) < 12 or data[:4] not in _MAGICS:
        raise DataValidationError("not a phylokern binary matrix (bad magic)")
    found = data[:4]
    if magic is not None and found != magic:
        raise DataValidationError(f"expected {magic!r} container, found {found!r}")
    (n,) = struct.unpack_from("<Q", data, 4)
    off = 12
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        ids.append(data[off : off + ln].decode("utf-8"))
        off += ln
    payload = data[off:]
    if len(payload) != 8 * n * n:
        raise DataValidationError("truncated matrix payload")
    values = np.frombuffer(payload, dtype="<f8").reshape(n, n).astype(np.float64)
    return tuple(ids), values, found


def write_matrix(path: PathLike, ids: Sequence[str], values: np.ndarray,
                 magic: bytes, corner: str = "") -> None:
    """Binary when the suffix is ``.bin`` (or ``.pks``/``.pkk``), else TSV."""
    path = Path(path)
    if path.suffix.lower() in (".bin", ".pks", ".pkk"):
        path.write_bytes(to_binary(ids, values, magic))
    else:
        path.write_text(to_tsv(ids, values, corner), encoding="utf-8")


def read_matrix(path: PathLike) -> tuple[tuple[str, ...], np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] in _MAGICS:
        ids, values, _ = from_binary(data)
        return ids, values
    return from_tsv(data.decode("utf-8"))
