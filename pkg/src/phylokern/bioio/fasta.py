"""FASTA reading and writing for OTU representative sequences."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import IO, Iterable, Union

from phylokern.errors import DataValidationError

NUCLEOTIDES = frozenset("ACGT")
# IUPAC nucleotide codes, including ambiguity symbols and U.
IUPAC = frozenset("ACGTURYSWKMBDHVN")


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    bases: str

    @property
    def is_unambiguous(self) -> bool:
        return set(self.bases) <= NUCLEOTIDES


def _as_text(source: Union[str, bytes, IO]) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_fasta(source: Union[str, bytes, IO], mode: str = "strict") -> list[SequenceRecord]:
    """Parse FASTA records.

    Parameters
    ----------
    source : str, bytes or file-like
        FASTA text. Multi-line sequences are concatenated and uppercased.
    mode : {"strict", "lenient"}
        ``strict`` accepts only A, C, G and T. ``lenient`` also keeps IUPAC
        ambiguity codes; k-mers touching them match no feature downstream.

    Returns
    -------
    list of SequenceRecord
        In file order.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown mode {mode!r}")
    text = _as_text(source)

    records: list[SequenceRecord] = []
    seen: set[str] = set()
    current_id = None
    chunks: list[str] = []

    def flush():
        if current_id is None:
            return
        bases = "".join(chunks).upper()
        if not bases:
            raise DataValidationError(f"empty sequence for record {current_id!r}")
        bad = set(bases) - IUPAC
        if bad:
            raise DataValidationError(
                f"record {current_id!r}: invalid characters {''.join(sorted(bad))!r}"
            )
        if mode == "strict" and not set(bases) <= NUCLEOTIDES:
            amb = "".join(sorted(set(bases) - NUCLEOTIDES))
            raise DataValidationError(
                f"record {current_id!r}: non-ACGT characters {amb!r} (strict mode)"
            )
        records.append(SequenceRecord(current_id, bases))

    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].strip()
            if not header:
                raise DataValidationError(f"line {lineno}: empty record id")
            current_id = header.split()[0]
            if current_id in seen:
                raise DataValidationError(f"duplicate sequence id {current_id!r}")
            seen.add(current_id)
            chunks = []
        else:
            if current_id is None:
                raise DataValidationError(f"line {lineno}: sequence data before first header")
            chunks.append("".join(line.split()))
    flush()
    return records


def format_fasta(records: Iterable[SequenceRecord], width: int = 80) -> str:
    out = []
    for rec in records:
        out.append(f">{rec.id}\n")
        for i in range(0, len(rec.bases), width):
            out.append(rec.bases[i : i + width] + "\n")
    return "".join(out)
