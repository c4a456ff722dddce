"""Kernel two-sample test: MMD^2 from a pooled Gram matrix with permutation p-values."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from phylokern._threads import ordered_map
from phylokern.errors import DataValidationError
from phylokern.samplekernel import KernelMatrix

DEFAULT_N_PERM = 1000
SCHEMA_VERSION = 1
# permuted statistics within this relative distance of the observed one count as ties
TIE_RTOL = 1e-10
_BATCH = 64


@dataclass(frozen=True)
class TwoSampleResult:
    mmd2: float
    p_value: float
    n_perm: int
    seed: int
    n_x: int
    n_y: int
    estimator: str = "biased"

    def __post_init__(self):
        if not (1.0 / (self.n_perm + 1) <= self.p_value <= 1.0):
            raise ValueError(f"p-value {self.p_value} outside [1/(n_perm+1), 1]")

    @property
    def group_sizes(self) -> tuple[int, int]:
        return self.n_x, self.n_y

    def to_json(self) -> dict:
        out = asdict(self)
        out["schema_version"] = SCHEMA_VERSION
        return out


def _values(K: Union[KernelMatrix, np.ndarray]) -> np.ndarray:
    return np.asarray(K.values if isinstance(K, KernelMatrix) else K, dtype=np.float64)


def _as_second_group(labels) -> np.ndarray:
    """Boolean mask of the second group; the smaller label value is the first."""
    labels = np.asarray(labels)
    values = np.unique(labels)
    if len(values) > 2:
        raise DataValidationError(f"labels must be binary, found {len(values)} distinct values")
    if len(values) < 2:
        raise DataValidationError("both groups must be non-empty")
    return labels == values[1]


def _stats(K: np.ndarray, masks: np.ndarray, unbiased: bool) -> np.ndarray:
    """MMD^2 for each column of a boolean (n, B) membership matrix of the second group."""
    Y = masks.astype(np.float64)
    X = 1.0 - Y
    n_x, n_y = X.sum(axis=0), Y.sum(axis=0)
    KX = K @ X
    sxx = np.einsum("ib,ib->b", X, KX)
    sxy = np.einsum("ib,ib->b", Y, KX)
    syy = np.einsum("ib,ib->b", Y, K @ Y)
    if unbiased:
        d = np.diag(K)
        tx, ty = d @ X, d @ Y
        return ((sxx - tx) / (n_x * (n_x - 1)) + (syy - ty) / (n_y * (n_y - 1))
                - 2 * sxy / (n_x * n_y))
    return sxx / n_x**2 + syy / n_y**2 - 2 * sxy / (n_x * n_y)


def mmd2(K: Union[KernelMatrix, np.ndarray], labels, unbiased: bool = False) -> float:
    """Squared MMD between the two labelled groups of a pooled kernel matrix.

    The default is the block-mean form with diagonal terms included:
    ``mean(K_XX) + mean(K_YY) - 2 mean(K_XY)``. ``unbiased=True`` drops the
    ``i == j`` terms from the within-group means.
    """
    K = _values(K)
    mask = _as_second_group(labels)
    if mask.shape != (K.shape[0],):
        raise DataValidationError("labels must have one entry per kernel row")
    if unbiased and min(mask.sum(), (~mask).sum()) < 2:
        raise DataValidationError("unbiased estimator needs at least two samples per group")
    return float(_stats(K, mask[:, None], unbiased)[0])


def _permutation(seed: int, index: int, n: int) -> np.ndarray:
    # counter-based stream keyed by the seed; permutation i uses its own counter block
    gen = np.random.Generator(np.random.Philox(key=seed, counter=index << 128))
    return gen.permutation(n)


def null_statistics(K: Union[KernelMatrix, np.ndarray], labels, n_perm: int, seed: int,
                    unbiased: bool = False, threads: Optional[int] = None) -> np.ndarray:
    """MMD^2 of ``n_perm`` label shufflings; element ``i`` depends only on (seed, i)."""
    K = _values(K)
    mask = _as_second_group(labels)
    n = len(mask)

    def batch(start):
        idx = range(start, min(start + _BATCH, n_perm))
        cols = np.stack([mask[_permutation(seed, i, n)] for i in idx], axis=1)
        return _stats(K, cols, unbiased)

    parts = ordered_map(batch, range(0, n_perm, _BATCH), threads)
    return np.concatenate(parts) if parts else np.zeros(0)


def permutation_test(K: Union[KernelMatrix, np.ndarray], labels, n_perm: int = DEFAULT_N_PERM,
                     seed: int = 0, unbiased: bool = False,
                     threads: Optional[int] = None) -> TwoSampleResult:
    """Permutation p-value ``(#{perm >= observed} + 1) / (n_perm + 1)``.

    The Gram matrix is computed once; each permutation only re-indexes it.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    Kv = _values(K)
    observed = mmd2(Kv, labels, unbiased)
    null = null_statistics(Kv, labels, n_perm, seed, unbiased, threads)
    scale = max(abs(observed), float(np.abs(np.diag(Kv)).mean()) if len(Kv) else 0.0)
    hits = int(np.count_nonzero(null >= observed - TIE_RTOL * scale))
    mask = _as_second_group(labels)
    return TwoSampleResult(
        mmd2=observed,
        p_value=(hits + 1) / (n_perm + 1),
        n_perm=int(n_perm),
        seed=int(seed),
        n_x=int((~mask).sum()),
        n_y=int(mask.sum()),
        estimator="unbiased" if unbiased else "biased",
    )
