"""String kernels between representative sequences and the OTU similarity matrix.

Three feature maps are supported:

* spectrum: one coordinate per k-mer ``u``, counting occurrences of ``u``;
* mismatch: one coordinate per k-mer ``u``, counting substrings within
  Hamming distance ``m`` of ``u``;
* gappy pair: one coordinate per ``(a, j, b)`` with ``0 <= j <= g``,
  counting places where ``a`` is followed by ``j`` arbitrary letters and
  then ``b``.

Overlapping occurrences all count. Any k-mer containing a symbol outside
ACGT (lenient FASTA input) contributes to no coordinate.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy import sparse

from phylokern._threads import ordered_map
from phylokern.bioio.fasta import SequenceRecord

_CODE = np.full(256, 255, dtype=np.uint8)
for _i, _c in enumerate(b"ACGT"):
    _CODE[_c] = _i

BRUTE_FORCE_LIMIT = 10**6
BRUTE_FORCE_GAPPY_LIMIT = 10**7


class Variant(str, Enum):
    SPECTRUM = "spectrum"
    MISMATCH = "mismatch"
    GAPPY = "gappy"


# tie-break order used when ranking kernels with equal objectives
VARIANT_ORDER = {Variant.SPECTRUM: 0, Variant.GAPPY: 1, Variant.MISMATCH: 2}


@dataclass(frozen=True)
class KmerConfig:
    variant: Variant
    k: int
    m: int = 0
    g: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.variant is Variant.MISMATCH:
            # m = 0 is allowed and reduces to the spectrum kernel
            if not 0 <= self.m <= self.k - 1:
                raise ValueError(f"mismatch kernel needs 0 <= m <= k-1, got m={self.m}, k={self.k}")
        elif self.m:
            raise ValueError("m only applies to the mismatch kernel")
        if self.variant is Variant.GAPPY:
            if self.g < 0:
                raise ValueError(f"g must be non-negative, got {self.g}")
        elif self.g:
            raise ValueError("g only applies to the gappy pair kernel")

    @property
    def label(self) -> str:
        if self.variant is Variant.MISMATCH:
            return f"mismatch-k{self.k}-m{self.m}"
        if self.variant is Variant.GAPPY:
            return f"gappy-k{self.k}-g{self.g}"
        return f"spectrum-k{self.k}"

    @classmethod
    def spectrum(cls, k: int) -> "KmerConfig":
        return cls(Variant.SPECTRUM, k)

    @classmethod
    def mismatch(cls, k: int, m: int) -> "KmerConfig":
        return cls(Variant.MISMATCH, k, m=m)

    @classmethod
    def gappy(cls, k: int, g: int) -> "KmerConfig":
        return cls(Variant.GAPPY, k, g=g)


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """OTU-by-OTU string kernel values, rows and columns in ``otu_ids`` order."""

    otu_ids: tuple[str, ...]
    values: np.ndarray
    config: Optional[KmerConfig] = None
    normalized: bool = False
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        p = len(self.otu_ids)
        if values.shape != (p, p):
            raise ValueError(f"similarity matrix must be {p}x{p}, got {values.shape}")
        if not np.array_equal(values, values.T):
            raise ValueError("similarity matrix must be symmetric")
        values.setflags(write=False)
        object.__setattr__(self, "otu_ids", tuple(self.otu_ids))
        object.__setattr__(self, "values", values)

    def cosine_normalized(self) -> "SimilarityMatrix":
        d = np.sqrt(np.diag(self.values))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.values / np.outer(d, d)
        out[~np.isfinite(out)] = 0.0
        out = (out + out.T) / 2
        return SimilarityMatrix(self.otu_ids, out, self.config, normalized=True)


# ---------------------------------------------------------------- features

def _bases(z: Union[SequenceRecord, str]) -> str:
    return z.bases if isinstance(z, SequenceRecord) else z.upper()


def _valid_starts(bases: str, width: int) -> np.ndarray:
    """Start positions whose ``width``-window holds only A, C, G, T."""
    n = len(bases) - width + 1
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    bad = _CODE[np.frombuffer(bases.encode("ascii"), dtype=np.uint8)] == 255
    if not bad.any():
        return np.arange(n)
    csum = np.concatenate([[0], np.cumsum(bad)])
    return np.flatnonzero(csum[width:] - csum[:-width] == 0)


def spectrum_features(z, k: int) -> Counter:
    s = _bases(z)
    return Counter(s[i : i + k] for i in _valid_starts(s, k).tolist())


def gappy_features(z, k: int, g: int) -> Counter:
    """Counts keyed by ``"j:ab"`` (gap length, then the two k-mers)."""
    s = _bases(z)
    ok = np.zeros(max(len(s) - k + 1, 0), dtype=bool)
    ok[_valid_starts(s, k)] = True
    feats: Counter = Counter()
    for j in range(g + 1):
        span = 2 * k + j
        for i in range(len(s) - span + 1):
            if ok[i] and ok[i + k + j]:
                feats[f"{j}:{s[i:i + k]}{s[i + k + j:i + span]}"] += 1
    return feats


def _kmer_table(seqs: Sequence[str], k: int):
    """Distinct valid k-mers per sequence as a code matrix plus owner/count."""
    rows, owner, count = [], [], []
    for idx, s in enumerate(seqs):
        for kmer, c in spectrum_features(s, k).items():
            rows.append(kmer)
            owner.append(idx)
            count.append(c)
    if not rows:
        return np.zeros((0, k), dtype=np.uint8), np.zeros(0, np.int64), np.zeros(0, np.int64)
    codes = _CODE[np.frombuffer("".join(rows).encode("ascii"), dtype=np.uint8)].reshape(-1, k)
    return codes, np.asarray(owner, dtype=np.int64), np.asarray(count, dtype=np.int64)


def mismatch_trie(seqs: Sequence[str], k: int, m: int):
    """Populated leaves of the depth-``k`` mismatch trie over all sequences.

    Depth-first walk of the ``4**k`` trie carrying the k-mers still within
    ``m`` mismatches of the current prefix. Subtrees that no k-mer can reach
    are never entered. A k-mer whose budget is spent can only follow its own
    suffix, so it is sent straight to that leaf.

    Returns ``(owner, leaf, count)`` triplets; summing ``count`` over
    duplicate ``(owner, leaf)`` pairs gives the feature matrix.
    """
    codes, owner, count = _kmer_table(seqs, k)
    out_owner, out_leaf, out_count = [], [], []
    leaf_ids: dict[bytes, int] = {}
    if len(codes) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), 0

    def emit(prefix: bytes, idx: np.ndarray, suffix_from: Optional[int] = None):
        if suffix_from is None:
            key = leaf_ids.setdefault(prefix, len(leaf_ids))
            out_owner.append(owner[idx])
            out_leaf.append(np.full(len(idx), key, dtype=np.int64))
            out_count.append(count[idx])
            return
        tails = codes[idx, suffix_from:]
        keys = [leaf_ids.setdefault(prefix + t.tobytes(), len(leaf_ids)) for t in tails]
        out_owner.append(owner[idx])
        out_leaf.append(np.asarray(keys, dtype=np.int64))
        out_count.append(count[idx])

    stack = [(0, b"", np.arange(len(codes)), np.zeros(len(codes), dtype=np.int64))]
    while stack:
        depth, prefix, idx, mm = stack.pop()
        if depth == k:
            emit(prefix, idx)
            continue
        spent = mm == m
        if spent.any():
            emit(prefix, idx[spent], suffix_from=depth)
            idx, mm = idx[~spent], mm[~spent]
            if len(idx) == 0:
                continue
        column = codes[idx, depth]
        for letter in range(3, -1, -1):
            new_mm = mm + (column != letter)
            keep = new_mm <= m
            if keep.any():
                stack.append((depth + 1, prefix + bytes((letter,)), idx[keep], new_mm[keep]))

    return (np.concatenate(out_owner), np.concatenate(out_leaf),
            np.concatenate(out_count), len(leaf_ids))


def mismatch_neighbourhoods(seqs: Sequence[str], k: int, m: int):
    """Same triplets as :func:`mismatch_trie`, by direct neighbourhood enumeration.

    Every k-mer is packed into an int64 code and all strings within Hamming
    distance ``m`` are generated arithmetically, one (positions,
    substitutions) pattern at a time across all k-mers at once. Needs
    ``k <= 31``.
    """
    if k > 31:
        raise ValueError("packed neighbourhood enumeration needs k <= 31")
    codes, owner, count = _kmer_table(seqs, k)
    if len(codes) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), 0
    weights = 4 ** np.arange(k - 1, -1, -1, dtype=np.int64)
    digits = codes.astype(np.int64)
    packed = digits @ weights
    leaves = [packed]
    for r in range(1, m + 1):
        for pos in itertools.combinations(range(k), r):
            pos = list(pos)
            base = packed - digits[:, pos] @ weights[pos]
            for shift in itertools.product((1, 2, 3), repeat=r):
                moved = (digits[:, pos] + np.asarray(shift)) % 4
                leaves.append(base + moved @ weights[pos])
    n_pat = len(leaves)
    uniq, leaf = np.unique(np.concatenate(leaves), return_inverse=True)
    return np.tile(owner, n_pat), leaf.ravel(), np.tile(count, n_pat), len(uniq)


def feature_matrix(seqs: Sequence[Union[SequenceRecord, str]], cfg: KmerConfig,
                   method: str = "enumerate") -> sparse.csr_matrix:
    """Sparse sequences-by-features count matrix for ``cfg``.

    ``method`` picks the mismatch walker: ``"enumerate"`` (packed
    neighbourhoods, falls back to the trie for k > 31) or ``"trie"``.
    """
    strs = [_bases(z) for z in seqs]
    if cfg.variant is Variant.MISMATCH:
        walk = mismatch_neighbourhoods if (method == "enumerate" and cfg.k <= 31) else mismatch_trie
        owner, leaf, cnt, n_leaves = walk(strs, cfg.k, cfg.m)
        mat = sparse.coo_matrix((cnt, (owner, leaf)), shape=(len(strs), n_leaves), dtype=np.int64)
        return mat.tocsr()

    extract = (lambda s: spectrum_features(s, cfg.k)) if cfg.variant is Variant.SPECTRUM \
        else (lambda s: gappy_features(s, cfg.k, cfg.g))
    vocab: dict = {}
    rows, cols, vals = [], [], []
    for i, s in enumerate(strs):
        for key, c in extract(s).items():
            cols.append(vocab.setdefault(key, len(vocab)))
            rows.append(i)
            vals.append(c)
    return sparse.csr_matrix((np.asarray(vals, dtype=np.int64), (rows, cols)),
                             shape=(len(strs), len(vocab)), dtype=np.int64)


# ------------------------------------------------------------------ kernels

def kernel_entry(z, z2, cfg: KmerConfig) -> float:
    """Exact inner product of the two sequences' feature vectors."""
    if cfg.variant is Variant.SPECTRUM:
        a, b = spectrum_features(z, cfg.k), spectrum_features(z2, cfg.k)
    elif cfg.variant is Variant.GAPPY:
        a, b = gappy_features(z, cfg.k, cfg.g), gappy_features(z2, cfg.k, cfg.g)
    else:
        phi = feature_matrix([z, z2], cfg, method="trie")
        return float(phi[0].multiply(phi[1]).sum())
    if len(a) > len(b):
        a, b = b, a
    return float(sum(c * b[key] for key, c in a.items() if key in b))


def brute_force_entry(z, z2, cfg: KmerConfig) -> float:
    """Reference value from fully materialised dense feature vectors."""
    k = cfg.k
    if cfg.variant is Variant.GAPPY:
        size = (cfg.g + 1) * 4 ** (2 * k)
        if size > BRUTE_FORCE_GAPPY_LIMIT:
            raise ValueError(f"gappy feature space {size} exceeds brute-force guard")
    elif 4**k > BRUTE_FORCE_LIMIT:
        raise ValueError(f"k-mer space 4**{k} exceeds brute-force guard")
    return float(np.dot(_dense_features(_bases(z), cfg), _dense_features(_bases(z2), cfg)))


def _digits(s: str) -> list[int]:
    return ["ACGT".index(c) if c in "ACGT" else -1 for c in s]


def _code_of(digits) -> int:
    if any(d < 0 for d in digits):
        return -1
    code = 0
    for d in digits:
        code = 4 * code + d
    return code


def _dense_features(s: str, cfg: KmerConfig) -> np.ndarray:
    k = cfg.k
    d = _digits(s)
    if cfg.variant is Variant.SPECTRUM:
        phi = np.zeros(4**k, dtype=np.int64)
        for i in range(len(s) - k + 1):
            c = _code_of(d[i : i + k])
            if c >= 0:
                phi[c] += 1
        return phi
    if cfg.variant is Variant.GAPPY:
        phi = np.zeros((cfg.g + 1) * 4 ** (2 * k), dtype=np.int64)
        for j in range(cfg.g + 1):
            for i in range(len(s) - 2 * k - j + 1):
                a = _code_of(d[i : i + k])
                b = _code_of(d[i + k + j : i + 2 * k + j])
                if a >= 0 and b >= 0:
                    phi[j * 4 ** (2 * k) + a * 4**k + b] += 1
        return phi
    # mismatch: compare every k-mer of the alphabet with every window
    space = (np.arange(4**k)[:, None] // 4 ** np.arange(k - 1, -1, -1)[None, :]) % 4
    windows = [d[i : i + k] for i in range(len(s) - k + 1) if min(d[i : i + k]) >= 0]
    phi = np.zeros(4**k, dtype=np.int64)
    for w in windows:
        phi += (space != np.asarray(w)[None, :]).sum(axis=1) <= cfg.m
    return phi


def build_similarity_matrix(seqs: Sequence[SequenceRecord], cfg: KmerConfig,
                            threads: Optional[int] = None, normalize: bool = False,
                            block: int = 256, method: str = "enumerate") -> SimilarityMatrix:
    """Assemble ``S[i, j] = q(z_i, z_j)`` from sparse per-sequence features.

    Row blocks of ``Phi @ Phi.T`` are independent and computed on a thread
    pool. Accumulation is in integers, so the result does not depend on the
    number of workers.
    """
    if not seqs:
        raise ValueError("need at least one sequence")
    phi = feature_matrix(seqs, cfg, method=method)
    phi_t = phi.T.tocsc()
    starts = list(range(0, phi.shape[0], block))

    def rows(start):
        return (phi[start : start + block] @ phi_t).toarray()

    values = np.vstack(ordered_map(rows, starts, threads)).astype(np.float64)
    S = SimilarityMatrix(tuple(r.id if isinstance(r, SequenceRecord) else str(i)
                               for i, r in enumerate(seqs)), values, cfg,
                         meta={"n_features": int(phi.shape[1])})
    return S.cosine_normalized() if normalize else S
