"""Tab-separated OTU count tables (samples in rows, OTUs in columns)."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import IO, Sequence, Union

import numpy as np

from phylokern.errors import DataValidationError


@dataclass(frozen=True, eq=False)
class OtuTable:
    sample_ids: tuple[str, ...]
    otu_ids: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.counts)
        if raw.dtype.kind == "f" and not np.all(np.isfinite(raw) & (raw == np.round(raw))):
            raise DataValidationError("counts must be integers")
        counts = np.array(raw, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape != (len(self.sample_ids), len(self.otu_ids)):
            raise DataValidationError(
                f"count matrix shape {counts.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.otu_ids)} OTUs"
            )
        if (counts < 0).any():
            raise DataValidationError("counts must be non-negative")
        _check_unique(self.sample_ids, "sample")
        _check_unique(self.otu_ids, "OTU")
        counts.setflags(write=False)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "otu_ids", tuple(self.otu_ids))
        object.__setattr__(self, "counts", counts)

    def __eq__(self, other):
        if not isinstance(other, OtuTable):
            return NotImplemented
        return (self.sample_ids == other.sample_ids and self.otu_ids == other.otu_ids
                and np.array_equal(self.counts, other.counts))

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def select_otus(self, otu_ids: Sequence[str]) -> "OtuTable":
        index = {o: j for j, o in enumerate(self.otu_ids)}
        cols = [index[o] for o in otu_ids]
        return OtuTable(self.sample_ids, tuple(otu_ids), self.counts[:, cols])

    def select_samples(self, sample_ids: Sequence[str]) -> "OtuTable":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        try:
            rows = [index[s] for s in sample_ids]
        except KeyError as exc:
            raise DataValidationError(f"unknown sample id {exc.args[0]!r}") from None
        return OtuTable(tuple(sample_ids), self.otu_ids, self.counts[rows])

    def to_tsv(self, corner: str = "sample") -> str:
        lines = ["\t".join([corner, *self.otu_ids])]
        for sid, row in zip(self.sample_ids, self.counts):
            lines.append("\t".join([sid, *map(str, row.tolist())]))
        return "\n".join(lines) + "\n"


def _check_unique(ids, what):
    seen = set()
    for x in ids:
        if x in seen:
            raise DataValidationError(f"duplicate {what} id {x!r}")
        seen.add(x)


def parse_otu_table(source: Union[str, bytes, IO]) -> OtuTable:
    """Read a TSV count table; the header names OTUs after a corner cell."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    text = text.lstrip("﻿")

    rows = [line.rstrip("\r\n") for line in io.StringIO(text)]
    rows = [r for r in rows if r.strip()]
    if not rows:
        raise DataValidationError("empty OTU table")
    header = rows[0].split("\t")
    if len(header) < 2:
        raise DataValidationError("OTU table header needs at least one OTU column")
    otu_ids = header[1:]

    sample_ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        cells = row.split("\t")
        if len(cells) != len(header):
            raise DataValidationError(
                f"line {lineno}: expected {len(header)} fields, found {len(cells)}"
            )
        sample_ids.append(cells[0])
        parsed = []
        for cell in cells[1:]:
            cell = cell.strip()
            try:
                v = int(cell)
            except ValueError:
                raise DataValidationError(
                    f"line {lineno}: {cell!r} is not a non-negative integer"
                ) from None
            if v < 0:
                raise DataValidationError(f"line {lineno}: negative count {v}")
            parsed.append(v)
        values.append(parsed)

    counts = np.array(values, dtype=np.int64).reshape(len(sample_ids), len(otu_ids))
    return OtuTable(tuple(sample_ids), tuple(otu_ids), counts)
