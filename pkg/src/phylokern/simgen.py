"""Simulation of realistic fictitious OTU tables and host traits.

Counts follow a Dirichlet-multinomial whose concentrations are fitted to a
seed table; read depths are negative binomial. Two-population studies
permute concentrations within phylogenetic clusters of OTUs, and host-trait
studies place sparse cluster-level effects on relative abundances.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.special import digamma, gammaln

from phylokern.bioio.dataset import CopheneticMatrix
from phylokern.bioio.otutable import OtuTable
from phylokern.errors import DataValidationError, NumericalError

ALPHA_FLOOR = 1e-6
EPSILON_GRID = (0.0, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
N_EFFECT_CLUSTERS = 10
CLUSTER_EFFECT_VAR = 10.0


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a (seed, replicate, ...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


# ---------------------------------------------------------------- DMN fit

@dataclass(frozen=True, eq=False)
class DmnParams:
    alpha: np.ndarray
    log_likelihood: float = float("nan")
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or not np.all(alpha > 0):
            raise DataValidationError("DMN concentrations must be a positive vector")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def proportions(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()


def dmn_log_likelihood(counts: np.ndarray, alpha: np.ndarray) -> float:
    """Dirichlet-multinomial log-likelihood including the multinomial coefficient."""
    x = np.asarray(counts, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    N = x.sum(axis=1)
    a0 = alpha.sum()
    coef = gammaln(N + 1).sum() - gammaln(x + 1).sum()
    return float(coef + np.sum(gammaln(a0) - gammaln(N + a0))
                 + np.sum(gammaln(x + alpha) - gammaln(alpha)))


def moment_initializer(counts: np.ndarray) -> np.ndarray:
    """Method-of-moments concentrations from per-sample proportions."""
    x = np.asarray(counts, dtype=np.float64)
    N = x.sum(axis=1)
    if np.any(N <= 0):
        raise DataValidationError("every sample needs at least one read")
    props = x / N[:, None]
    p = props.mean(axis=0)
    spread = props.var(axis=0).sum()
    binom = np.sum(p * (1 - p))
    n_bar = N.mean()
    # var(x_j / N) = p_j (1 - p_j) (N + a0) / (N (1 + a0)), pooled over OTUs
    rho = spread / binom if binom > 0 else 1.0
    if n_bar * rho > 1 and rho < 1:
        a0 = n_bar * (1 - rho) / (n_bar * rho - 1)
    else:
        a0 = 1.0
    a0 = float(np.clip(a0, 1e-3, 1e6))
    return np.maximum(a0 * p, ALPHA_FLOOR)


def fit_dmn_ml(table, tol: float = 1e-8, max_iter: int = 10_000) -> DmnParams:
    """Maximum-likelihood DMN concentrations by fixed-point iteration.

    Each sweep applies ``a_j <- a_j * sum_i[psi(x_ij + a_j) - psi(a_j)] /
    sum_i[psi(N_i + a0) - psi(a0)]``, which never lowers the likelihood.
    OTUs absent from every sample stay at ``ALPHA_FLOOR``. Stops when the
    largest relative change in any concentration falls below ``tol``.
    """
    x = np.asarray(table.counts if isinstance(table, OtuTable) else table, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataValidationError("DMN fitting needs at least two samples")
    N = x.sum(axis=1)
    present = x.sum(axis=0) > 0
    alpha = moment_initializer(x)
    alpha[~present] = ALPHA_FLOOR
    xs = x[:, present]

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        a0 = alpha.sum()
        denom = np.sum(digamma(N + a0) - digamma(a0))
        a = alpha[present]
        numer = np.sum(digamma(xs + a) - digamma(a), axis=0)
        new = np.maximum(a * numer / denom, ALPHA_FLOOR)
        change = np.max(np.abs(new - a) / a)
        alpha[present] = new
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"DMN fit did not converge in {max_iter} iterations", stacklevel=2)
    return DmnParams(alpha, dmn_log_likelihood(x, alpha), it, converged)


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class NbReadModel:
    """Negative binomial read depth with mean ``a`` and dispersion ``b``."""

    a: float = 1e5
    b: float = 10.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("negative binomial mean and dispersion must be positive")

    @property
    def variance(self) -> float:
        return self.a + self.a**2 / self.b


def sample_reads(model: NbReadModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Gamma-Poisson draws; zero depths are redrawn."""
    out = np.zeros(n, dtype=np.int64)
    todo = np.arange(n)
    while len(todo):
        lam = rng.gamma(shape=model.b, scale=model.a / model.b, size=len(todo))
        draw = rng.poisson(lam)
        out[todo] = draw
        todo = todo[draw == 0]
    return out


def sample_dmn(params: DmnParams, reads: Sequence[int], rng: np.random.Generator,
               otu_ids: Optional[Sequence[str]] = None, prefix: str = "s") -> OtuTable:
    """One DMN sample per read depth: Dirichlet proportions, then multinomial counts."""
    reads = np.asarray(reads, dtype=np.int64)
    if np.any(reads < 1):
        raise DataValidationError("read depths must be >= 1")
    alpha = params.alpha
    theta = rng.gamma(alpha, size=(len(reads), len(alpha)))
    totals = theta.sum(axis=1)
    # all-zero gamma draws only happen with vanishing concentrations; redraw those rows
    while np.any(totals == 0):
        bad = totals == 0
        theta[bad] = rng.gamma(alpha, size=(int(bad.sum()), len(alpha)))
        totals = theta.sum(axis=1)
    theta /= totals[:, None]
    counts = rng.multinomial(reads, theta)
    otu_ids = tuple(otu_ids) if otu_ids is not None else tuple(f"otu{j}" for j in range(len(alpha)))
    return OtuTable(tuple(f"{prefix}{i}" for i in range(len(reads))), otu_ids, counts)


# -------------------------------------------------------------- clustering

@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """``labels[j]`` is OTU ``j``'s cluster; clusters are numbered by first member."""

    labels: np.ndarray
    epsilon: Optional[float] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.argsort(np.argsort(first))
        labels = rank[inv.ravel()]
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def clusters(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels, minlength=self.n_clusters))[:-1]
        return np.split(order, bounds)

    @property
    def cluster_sizes(self) -> list[int]:
        return sorted(np.bincount(self.labels).tolist(), reverse=True)

    def max_within_distance(self, coph: CopheneticMatrix) -> float:
        worst = 0.0
        for members in self.clusters:
            if len(members) > 1:
                worst = max(worst, float(coph.dist[np.ix_(members, members)].max()))
        return worst


def phylo_clusters(coph: CopheneticMatrix, epsilon: float) -> ClusterAssignment:
    """Complete-linkage clusters cut at ``epsilon * max distance`` (inclusive).

    Every pair inside a cluster is then at most ``epsilon * max_dist`` apart
    along the tree.
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    p = len(coph.otu_ids)
    if p == 1:
        return ClusterAssignment(np.zeros(1, dtype=np.int64), epsilon)
    threshold = epsilon * coph.max_dist
    Z = linkage(squareform(coph.dist, checks=False), method="complete")
    labels = fcluster(Z, t=threshold, criterion="distance")
    assignment = ClusterAssignment(labels, epsilon)
    if assignment.max_within_distance(coph) > threshold:
        # the cut is inclusive in exact arithmetic; split any cluster that
        # rounding let through
        labels = _split_violations(coph.dist, assignment, threshold)
        assignment = ClusterAssignment(labels, epsilon)
    return assignment


def _split_violations(dist, assignment, threshold):
    labels = assignment.labels.copy()
    nxt = labels.max() + 1
    for members in assignment.clusters:
        sub = dist[np.ix_(members, members)]
        if sub.max() <= threshold:
            continue
        for idx in members[1:]:
            labels[idx] = nxt
            nxt += 1
    return labels


def within_cluster_permutation(alpha: np.ndarray, clusters: ClusterAssignment,
                               rng: np.random.Generator) -> np.ndarray:
    """Shuffle concentrations among the members of each cluster.

    Singleton clusters are untouched, and every cluster keeps exactly its
    original multiset of values.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) != len(clusters.labels):
        raise DataValidationError("cluster labels must cover every concentration")
    out = alpha.copy()
    for members in clusters.clusters:
        if len(members) > 1:
            out[members] = alpha[members[rng.permutation(len(members))]]
    return out


def random_label_clusters(sizes: Sequence[int], p: int, rng: np.random.Generator,
                          epsilon: Optional[float] = None) -> ClusterAssignment:
    """Uniformly random partition of ``p`` OTUs into blocks of the given sizes."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != p or any(s < 1 for s in sizes):
        raise DataValidationError("cluster sizes must be positive and sum to p")
    order = rng.permutation(p)
    labels = np.empty(p, dtype=np.int64)
    start = 0
    for c, size in enumerate(sizes):
        labels[order[start : start + size]] = c
        start += size
    return ClusterAssignment(labels, epsilon)


def log10_perm_space(clusters: ClusterAssignment) -> float:
    """log10 of the number of within-cluster permutations, prod_c |c|!."""
    sizes = np.bincount(clusters.labels)
    return float(np.sum(gammaln(sizes + 1.0)) / math.log(10))


# ------------------------------------------------------------- host traits

class Scenario(str, Enum):
    PHYLO = "phylo"  # effects follow phylogenetic clusters
    RANDOM = "random"  # same cluster sizes, members assigned at random


@dataclass(frozen=True)
class PhenotypeSpec:
    kind: str = "regression"
    noise_var: float = 0.3
    n_effect_clusters: int = N_EFFECT_CLUSTERS
    cluster_effect_var: float = CLUSTER_EFFECT_VAR
    scenario: Scenario = Scenario.PHYLO

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown phenotype kind {self.kind!r}")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        object.__setattr__(self, "scenario", Scenario(self.scenario))


def make_effect_sizes(clusters: ClusterAssignment, rng: np.random.Generator,
                      n_effect_clusters: int = N_EFFECT_CLUSTERS,
                      cluster_effect_var: float = CLUSTER_EFFECT_VAR):
    """Sparse OTU effects: chosen clusters share one N(0, var) effect each.

    Returns ``(beta, chosen)`` where ``chosen`` lists the selected cluster ids.
    """
    if clusters.n_clusters < n_effect_clusters:
        raise DataValidationError(
            f"need at least {n_effect_clusters} clusters, found {clusters.n_clusters}")
    chosen = rng.choice(clusters.n_clusters, size=n_effect_clusters, replace=False)
    effects = rng.normal(0.0, math.sqrt(cluster_effect_var), size=n_effect_clusters)
    beta = np.zeros(len(clusters.labels))
    for c, b in zip(chosen, effects):
        beta[clusters.labels == c] = b
    return beta, np.sort(chosen)


def generate_phenotype(table: OtuTable, beta: np.ndarray, spec: PhenotypeSpec,
                       rng: np.random.Generator):
    """Linear (or thresholded) host trait on relative abundances.

    ``beta`` is rescaled so that the sample variance of ``Z beta`` is 1.
    Returns ``(y, scaled_beta)``.
    """
    counts = np.asarray(table.counts, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (counts.shape[1],):
        raise DataValidationError("beta needs one entry per OTU")
    Z = counts / counts.sum(axis=1, keepdims=True)
    signal = Z @ beta
    sd = signal.std()
    if not sd > 0:
        raise NumericalError("Z @ beta is constant; cannot rescale to unit variance")
    beta = beta / sd
    signal = Z @ beta
    eta = rng.normal(0.0, math.sqrt(spec.noise_var), size=len(signal))
    if spec.kind == "regression":
        return signal + eta, beta
    return (signal + eta >= 0).astype(np.int64), beta


# ------------------------------------------------------------ two samples

@dataclass(frozen=True, eq=False)
class TwoSampleDraw:
    X: OtuTable
    Y: OtuTable
    alpha1: np.ndarray
    alpha2: np.ndarray
    clusters: Optional[ClusterAssignment]


def two_sample_scenario(alpha1: np.ndarray, coph: CopheneticMatrix, epsilon: float,
                        reads_model: NbReadModel, n_x: int, n_y: int,
                        rng: np.random.Generator, random_labels: bool = False,
                        clusters: Optional[ClusterAssignment] = None) -> TwoSampleDraw:
    """Draw X from DMN(alpha1) and Y from DMN(alpha2) with alpha2 a
    within-cluster permutation of alpha1 at scale ``epsilon``.

    ``epsilon == 0`` gives ``alpha2 == alpha1``. With ``random_labels`` the
    clusters keep their sizes but receive random members. ``clusters`` may
    be passed to skip re-clustering the same tree.
    """
    alpha1 = np.asarray(alpha1, dtype=np.float64)
    if epsilon == 0:
        alpha2, assignment = alpha1.copy(), None
    else:
        assignment = clusters if clusters is not None else phylo_clusters(coph, epsilon)
        if random_labels:
            sizes = np.bincount(assignment.labels)
            assignment = random_label_clusters(sizes, len(alpha1), rng, epsilon)
        alpha2 = within_cluster_permutation(alpha1, assignment, rng)
    otu_ids = coph.otu_ids
    reads = sample_reads(reads_model, n_x + n_y, rng)
    X = sample_dmn(DmnParams(alpha1), reads[:n_x], rng, otu_ids, prefix="x")
    Y = sample_dmn(DmnParams(alpha2), reads[n_x:], rng, otu_ids, prefix="y")
    return TwoSampleDraw(X, Y, alpha1, alpha2, assignment)
