"""Sample-level kernel matrices built from OTU abundances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from phylokern.bioio.newick import PhyloTree
from phylokern.bioio.otutable import OtuTable
from phylokern.errors import DataValidationError, NumericalError
from phylokern.seqkernel import SimilarityMatrix

TRANSFORMS = ("raw", "clr", "log1p", "relative")
KINDS = ("stringphylo", "linear", "rbf", "unifrac_u", "unifrac_w")
PSD_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class AbundanceMatrix:
    sample_ids: tuple[str, ...]
    otu_ids: tuple[str, ...]
    values: np.ndarray
    transform_tag: str = "raw"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.sample_ids), len(self.otu_ids)):
            raise ValueError("abundance matrix shape does not match ids")
        if self.transform_tag not in TRANSFORMS:
            raise ValueError(f"unknown transform tag {self.transform_tag!r}")
        values.setflags(write=False)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "otu_ids", tuple(self.otu_ids))
        object.__setattr__(self, "values", values)

    @classmethod
    def from_table(cls, table: OtuTable) -> "AbundanceMatrix":
        return cls(table.sample_ids, table.otu_ids, table.counts, "raw")


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Symmetric sample-by-sample Gram matrix.

    ``psd_required`` is False only for double-centred distances returned
    without eigenvalue clipping, which may legitimately be indefinite.
    """

    sample_ids: tuple[str, ...]
    values: np.ndarray
    kind: str
    psd_required: bool = True

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        n = len(self.sample_ids)
        if values.shape != (n, n):
            raise ValueError(f"kernel matrix must be {n}x{n}, got {values.shape}")
        if not np.array_equal(values, values.T):
            raise ValueError("kernel matrix must be symmetric")
        values.setflags(write=False)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "values", values)

    def min_eig_ratio(self) -> float:
        """Smallest eigenvalue divided by the largest absolute one (0 for K = 0)."""
        return psd_ratio(self.values)

    def is_psd(self, rtol: float = PSD_RTOL) -> bool:
        return self.min_eig_ratio() >= -rtol

    def subset(self, index: Sequence[int]) -> "KernelMatrix":
        index = list(index)
        return KernelMatrix(tuple(self.sample_ids[i] for i in index),
                            self.values[np.ix_(index, index)], self.kind, self.psd_required)

    def block(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        return self.values[np.ix_(list(rows), list(cols))]

    def reorder(self, sample_ids: Sequence[str]) -> "KernelMatrix":
        pos = {s: i for i, s in enumerate(self.sample_ids)}
        try:
            return self.subset([pos[s] for s in sample_ids])
        except KeyError as exc:
            raise DataValidationError(f"sample {exc.args[0]!r} not in kernel matrix") from None


def psd_ratio(values: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(values)
    top = np.abs(eig).max() if eig.size else 0.0
    return 0.0 if top == 0 else float(eig.min() / top)


def _symmetric(K: np.ndarray) -> np.ndarray:
    return (K + K.T) / 2


# -------------------------------------------------------------- transforms

def transform(table: Union[OtuTable, AbundanceMatrix], mode: str = "clr",
              pseudocount: float = 1.0) -> AbundanceMatrix:
    """Row-wise abundance transforms.

    ``clr`` adds ``pseudocount`` to every count, then takes logs relative to
    the row geometric mean. ``log1p`` is ``log(x + 1)`` elementwise and
    ``relative`` divides each row by its total.
    """
    if isinstance(table, OtuTable):
        sample_ids, otu_ids, x = table.sample_ids, table.otu_ids, table.counts.astype(np.float64)
    else:
        sample_ids, otu_ids, x = table.sample_ids, table.otu_ids, np.asarray(table.values, float)

    if mode == "clr":
        if pseudocount < 0 or (pseudocount == 0 and (x <= 0).any()):
            raise DataValidationError("CLR needs a positive pseudocount when counts contain zeros")
        logx = np.log(x + pseudocount)
        values = logx - logx.mean(axis=1, keepdims=True)
    elif mode == "log1p":
        values = np.log1p(x)
    elif mode == "relative":
        totals = x.sum(axis=1, keepdims=True)
        if (totals <= 0).any():
            raise DataValidationError("relative abundances undefined for an all-zero sample")
        values = x / totals
    elif mode == "raw":
        values = x
    else:
        raise ValueError(f"unknown transform {mode!r}")
    return AbundanceMatrix(sample_ids, otu_ids, values, mode)


# ----------------------------------------------------------------- kernels

def stringphylo_kernel(A: AbundanceMatrix, S: SimilarityMatrix) -> KernelMatrix:
    """``K = A S A^T``."""
    if tuple(A.otu_ids) != tuple(S.otu_ids):
        raise DataValidationError("abundance and similarity matrices use different OTU orders")
    left = A.values @ S.values
    return KernelMatrix(A.sample_ids, _symmetric(left @ A.values.T), "stringphylo")


def linear_kernel(A: AbundanceMatrix) -> KernelMatrix:
    # the copy keeps the product on the same BLAS path as stringphylo_kernel,
    # so S = I reproduces this bit for bit
    left = np.array(A.values, copy=True)
    return KernelMatrix(A.sample_ids, _symmetric(left @ A.values.T), "linear")


def median_heuristic(values: np.ndarray) -> float:
    d = pdist(np.asarray(values, dtype=np.float64))
    if d.size == 0:
        raise DataValidationError("median heuristic needs at least two samples")
    return float(np.median(d))


def rbf_median_kernel(A: AbundanceMatrix) -> KernelMatrix:
    """Gaussian kernel with bandwidth equal to the median pairwise distance."""
    sigma = median_heuristic(A.values)
    if sigma == 0:
        raise NumericalError("median pairwise distance is zero; RBF bandwidth undefined")
    sq = squareform(pdist(A.values, "sqeuclidean"))
    return KernelMatrix(A.sample_ids, np.exp(-sq / (2 * sigma**2)), "rbf")


def unifrac_distance(abundances: Union[AbundanceMatrix, np.ndarray], lengths: np.ndarray,
                     mode: str = "unweighted") -> np.ndarray:
    """Per-taxon UniFrac distances between all pairs of samples.

    ``lengths[j]`` is the root-to-leaf path length of OTU ``j``. Unweighted
    distances use presence (value > 0); weighted distances use relative
    abundances obtained by normalising each row. Pairs with an empty
    denominator get distance 0.
    """
    x = np.asarray(abundances.values if isinstance(abundances, AbundanceMatrix) else abundances,
                   dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.shape != (x.shape[1],):
        raise DataValidationError("need one branch length per OTU")
    if (lengths < 0).any():
        raise DataValidationError("negative branch length")
    if mode == "unweighted":
        b = (x > 0).astype(np.float64)
        # unshared = present in one sample only; no cancellation, so equal
        # presence patterns give exactly 0
        only_first = (b * lengths) @ (1 - b).T
        num = only_first + only_first.T
        den = num + (b * lengths) @ b.T
    elif mode == "weighted":
        if (x < 0).any():
            raise DataValidationError("weighted UniFrac needs non-negative abundances")
        rowsum = x.sum(axis=1, keepdims=True)
        p = np.divide(x, rowsum, out=np.zeros_like(x), where=rowsum > 0)
        lp = p * lengths
        num = cdist(lp, lp, "cityblock")
        t = lp.sum(axis=1)
        den = t[:, None] + t[None, :]
    else:
        raise ValueError(f"unknown UniFrac mode {mode!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    d = np.clip(_symmetric(d), 0.0, 1.0)
    np.fill_diagonal(d, 0.0)
    return d


def distance_to_kernel(D: np.ndarray, square_entries: bool = True, psd_clip: bool = True,
                       sample_ids: Optional[Sequence[str]] = None,
                       kind: str = "unifrac_u") -> KernelMatrix:
    """Double-centre a distance matrix: ``K = -1/2 J Delta J``."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if D.shape != (n, n):
        raise DataValidationError("distance matrix must be square")
    if not np.allclose(D, D.T) or np.any(np.diag(D) != 0):
        raise DataValidationError("distance matrix must be symmetric with zero diagonal")
    delta = D * D if square_entries else D
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    K = _symmetric(-0.5 * J @ delta @ J)
    if psd_clip:
        w, V = np.linalg.eigh(K)
        K = _symmetric((V * np.clip(w, 0.0, None)) @ V.T)
        # rounding in the reconstruction can leave eigenvalues of order -1e-16;
        # lift the diagonal by just enough to remove them
        for _ in range(5):
            low = np.linalg.eigvalsh(K).min()
            if low >= 0:
                break
            scale = max(np.abs(np.diag(K)).max(), np.finfo(float).tiny)
            K = K + np.eye(n) * max(2 * -low, 4 * np.finfo(float).eps * scale)
    ids = tuple(sample_ids) if sample_ids is not None else tuple(str(i) for i in range(n))
    return KernelMatrix(ids, K, kind, psd_required=psd_clip)


def unifrac_kernel(table: OtuTable, tree: PhyloTree, mode: str = "unweighted",
                   square_entries: bool = True, psd_clip: bool = True) -> KernelMatrix:
    """UniFrac kernel from counts: unweighted on the support of ``log(x+1)``,
    weighted on relative abundances."""
    lengths = tree.root_distances(table.otu_ids)
    if mode == "unweighted":
        A = transform(table, "log1p")
        kind = "unifrac_u"
    else:
        A = transform(table, "relative")
        kind = "unifrac_w"
    D = unifrac_distance(A, lengths, mode)
    return distance_to_kernel(D, square_entries, psd_clip, table.sample_ids, kind)
