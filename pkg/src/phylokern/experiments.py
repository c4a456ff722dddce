"""Desk-scale reproductions of the simulation studies.

* ``figure1``: permutation-test rejection rates per kernel and epsilon.
* ``figure2``: MMD^2 at epsilon 0.1 relative to epsilon 1, and MMD^2 under
  phylogenetic versus random-label clusters at the same epsilon.
* ``figure3``: GP training objectives and held-out LPD for string and
  linear kernels when effects follow the tree (scenario 1) or not (2).

Each replicate draws its randomness from ``SeedSequence([seed, replicate,
...])`` so results do not depend on the number of worker threads. Outputs
are lists of flat dicts, one per (kernel, setting, replicate), ready for CSV.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from phylokern._threads import ordered_map
from phylokern.bioio.otutable import OtuTable
from phylokern.gp import (ModelScore, fit_classifier, fit_regression, lpd_classification,
                          lpd_regression, model_select)
from phylokern.mmdtest import mmd2, permutation_test
from phylokern.samplekernel import (KernelMatrix, linear_kernel, rbf_median_kernel,
                                    stringphylo_kernel, transform, unifrac_kernel)
from phylokern.seqkernel import KmerConfig, SimilarityMatrix, Variant, build_similarity_matrix
from phylokern.simgen import (DmnParams, NbReadModel, PhenotypeSpec, Scenario, generate_phenotype,
                              make_effect_sizes, phylo_clusters, random_label_clusters, rng_for,
                              sample_dmn, sample_reads, two_sample_scenario)
from phylokern.synthetic import SyntheticStudy, make_study

SCHEMA_VERSION = 1
ABUNDANCE_KERNELS = ("linear", "rbf", "unifrac_u", "unifrac_w")


def parse_kernel_name(name: str) -> Optional[KmerConfig]:
    """``spectrum-k30`` / ``mismatch-k10-m1`` / ``gappy-k5-g2`` -> KmerConfig;
    abundance-only kernel names -> None."""
    if name in ABUNDANCE_KERNELS:
        return None
    parts = name.split("-")
    try:
        variant = Variant(parts[0])
        opts = {p[0]: int(p[1:]) for p in parts[1:]}
        return KmerConfig(variant, opts["k"], m=opts.get("m", 0), g=opts.get("g", 0))
    except (ValueError, KeyError, IndexError):
        raise ValueError(f"unknown kernel name {name!r}") from None


@dataclass
class ExperimentConfig:
    """Settings shared by the three studies; ``from_dict`` rejects unknown keys."""

    seed: int = 0
    replicates: int = 10
    p: int = 100
    seq_length: int = 200
    tree_height: float = 0.15
    alpha_sigma: float = 1.5
    alpha_total: float = 20.0
    reads_mean: float = 1e5
    reads_dispersion: float = 10.0
    # two-sample studies
    n_x: int = 50
    n_y: int = 50
    n_perm: int = 200
    level: float = 0.1
    epsilons: tuple = (0.0, 0.01, 0.1, 1.0)
    kernels: tuple = ("spectrum-k30", "linear", "rbf", "unifrac_u")
    ratio_epsilons: tuple = (0.1, 1.0)
    # host-trait study
    n: int = 200
    task: str = "regression"
    noise_var: float = 0.3
    cluster_epsilon: float = 0.1
    train_fraction: float = 0.8
    string_grid: tuple = ("spectrum-k10", "spectrum-k20", "spectrum-k30")
    # the phenotype is linear in relative abundances, so the GP kernels see
    # those by default; "clr" matches the two-sample studies
    gp_transform: str = "relative"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("epsilons", "kernels", "ratio_epsilons", "string_grid"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be non-empty")
            setattr(self, name, value)
        for name in list(self.kernels) + list(self.string_grid):
            parse_kernel_name(name)
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.replicates < 1 or self.p < 2:
            raise ValueError("need at least one replicate and two OTUs")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.gp_transform not in ("relative", "clr", "log1p", "raw"):
            raise ValueError(f"unknown gp_transform {self.gp_transform!r}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @property
    def reads_model(self) -> NbReadModel:
        return NbReadModel(self.reads_mean, self.reads_dispersion)

    def study(self) -> SyntheticStudy:
        return make_study(self.p, self.seed, self.seq_length, self.tree_height,
                          self.alpha_sigma, self.alpha_total)


@dataclass
class KernelFactory:
    """Sample kernels for one synthetic study, caching OTU similarity matrices."""

    study: SyntheticStudy
    threads: Optional[int] = None
    transform: str = "clr"
    _cache: dict = field(default_factory=dict, repr=False)

    def similarity(self, cfg: KmerConfig) -> SimilarityMatrix:
        if cfg not in self._cache:
            self._cache[cfg] = build_similarity_matrix(self.study.sequences, cfg,
                                                       threads=self.threads)
        return self._cache[cfg]

    def __call__(self, name: str, table: OtuTable) -> KernelMatrix:
        cfg = parse_kernel_name(name)
        if cfg is not None:
            return stringphylo_kernel(transform(table, self.transform), self.similarity(cfg))
        if name == "linear":
            return linear_kernel(transform(table, self.transform))
        if name == "rbf":
            return rbf_median_kernel(transform(table, self.transform))
        mode = "unweighted" if name == "unifrac_u" else "weighted"
        return unifrac_kernel(table, self.study.tree, mode)


def _pooled(X: OtuTable, Y: OtuTable) -> tuple[OtuTable, np.ndarray]:
    table = OtuTable(X.sample_ids + Y.sample_ids, X.otu_ids, np.vstack([X.counts, Y.counts]))
    labels = np.r_[np.zeros(len(X.sample_ids), int), np.ones(len(Y.sample_ids), int)]
    return table, labels


def _permuted_alpha(study: SyntheticStudy, rng: np.random.Generator) -> np.ndarray:
    # a fresh assignment of the seed concentrations to OTUs for every replicate
    return study.alpha[rng.permutation(len(study.alpha))]


def _warm(factory: KernelFactory, names: Sequence[str]) -> None:
    for name in names:
        cfg = parse_kernel_name(name)
        if cfg is not None:
            factory.similarity(cfg)


# ------------------------------------------------------------------ figure 1

def figure1(cfg: ExperimentConfig, threads: Optional[int] = None) -> list[dict]:
    """Rejection decisions for every (kernel, epsilon, replicate)."""
    study = cfg.study()
    factory = KernelFactory(study, threads)
    _warm(factory, cfg.kernels)
    clusters = {e: phylo_clusters(study.coph, e) for e in cfg.epsilons if e > 0}

    def replicate(r):
        rows = []
        alpha1 = _permuted_alpha(study, rng_for(cfg.seed, r))
        for ei, eps in enumerate(cfg.epsilons):
            rng = rng_for(cfg.seed, r, ei + 1)
            draw = two_sample_scenario(alpha1, study.coph, eps, cfg.reads_model, cfg.n_x,
                                       cfg.n_y, rng, clusters=clusters.get(eps))
            table, labels = _pooled(draw.X, draw.Y)
            perm_seed = int(rng.integers(2**63))
            for name in cfg.kernels:
                res = permutation_test(factory(name, table), labels, cfg.n_perm, perm_seed)
                rows.append({"kernel": name, "epsilon": eps, "replicate": r,
                             "mmd2": res.mmd2, "p_value": res.p_value,
                             "reject": int(res.p_value <= cfg.level)})
        return rows

    return [row for rows in ordered_map(replicate, range(cfg.replicates), threads)
            for row in rows]


def rejection_rates(rows: Sequence[dict]) -> dict:
    """Mean rejection per (kernel, epsilon)."""
    acc: dict = {}
    for row in rows:
        acc.setdefault((row["kernel"], row["epsilon"]), []).append(row["reject"])
    return {key: float(np.mean(v)) for key, v in acc.items()}


# ------------------------------------------------------------------ figure 2

def figure2(cfg: ExperimentConfig, threads: Optional[int] = None) -> list[dict]:
    """Per (kernel, replicate): MMD^2 at the two ratio epsilons and under
    random-label clusters at the smaller one."""
    study = cfg.study()
    factory = KernelFactory(study, threads)
    _warm(factory, cfg.kernels)
    eps_lo, eps_hi = cfg.ratio_epsilons
    clusters = {e: phylo_clusters(study.coph, e) for e in (eps_lo, eps_hi)}
    settings = (("phylo_lo", eps_lo, False), ("phylo_hi", eps_hi, False),
                ("random_lo", eps_lo, True))

    def replicate(r):
        alpha1 = _permuted_alpha(study, rng_for(cfg.seed, r))
        stats = {name: {} for name in cfg.kernels}
        for si, (tag, eps, random_labels) in enumerate(settings):
            rng = rng_for(cfg.seed, r, si + 1)
            draw = two_sample_scenario(alpha1, study.coph, eps, cfg.reads_model, cfg.n_x,
                                       cfg.n_y, rng, random_labels=random_labels,
                                       clusters=clusters[eps])
            table, labels = _pooled(draw.X, draw.Y)
            for name in cfg.kernels:
                stats[name][tag] = mmd2(factory(name, table), labels)
        rows = []
        for name in cfg.kernels:
            s = stats[name]
            rows.append({"kernel": name, "replicate": r, "eps_lo": eps_lo, "eps_hi": eps_hi,
                         "mmd2_phylo_lo": s["phylo_lo"], "mmd2_phylo_hi": s["phylo_hi"],
                         "ratio": s["phylo_lo"] / s["phylo_hi"],
                         "mmd2_random_lo": s["random_lo"]})
        return rows

    return [row for rows in ordered_map(replicate, range(cfg.replicates), threads)
            for row in rows]


# ------------------------------------------------------------------ figure 3

def _split(n: int, frac: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_train = int(round(frac * n))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _fit_and_score(K: np.ndarray, y: np.ndarray, train, test, task: str):
    Ktr = K[np.ix_(train, train)]
    Kx = K[np.ix_(test, train)]
    kdiag = np.diag(K)[test]
    if task == "regression":
        model = fit_regression(Ktr, y[train])
        return model.lml, lpd_regression(model, Kx, kdiag, y[test]), model.summary()
    model = fit_classifier(Ktr, y[train])
    return model.elbo, lpd_classification(model, Kx, kdiag, y[test]), model.summary()


def figure3(cfg: ExperimentConfig, threads: Optional[int] = None) -> list[dict]:
    """Per (scenario, replicate): best string kernel versus linear kernel."""
    study = cfg.study()
    factory = KernelFactory(study, threads, cfg.gp_transform)
    _warm(factory, cfg.string_grid)
    base_clusters = phylo_clusters(study.coph, cfg.cluster_epsilon)
    sizes = np.bincount(base_clusters.labels)
    noise = cfg.noise_var if cfg.task == "regression" else 0.1

    def run(job):
        si, scenario, r = job
        rng = rng_for(cfg.seed, r, si)
        alpha = _permuted_alpha(study, rng)
        reads = sample_reads(cfg.reads_model, cfg.n, rng)
        table = sample_dmn(DmnParams(alpha), reads, rng, study.otu_ids)
        if scenario is Scenario.PHYLO:
            clusters = base_clusters
        else:
            clusters = random_label_clusters(sizes, len(alpha), rng)
        beta, chosen = make_effect_sizes(clusters, rng)
        spec = PhenotypeSpec(cfg.task, noise, scenario=scenario)
        y, _ = generate_phenotype(table, beta, spec, rng)
        train, test = _split(cfg.n, cfg.train_fraction, rng)
        if cfg.task == "classification" and len(np.unique(y[train])) < 2:
            return None

        scores = []
        for name in cfg.string_grid:
            obj, lpd, hyper = _fit_and_score(factory(name, table).values, y, train, test,
                                             cfg.task)
            scores.append(ModelScore(name, obj, lpd, parse_kernel_name(name), hyper))
        best = model_select(scores)[0]
        lin_obj, lin_lpd, _ = _fit_and_score(factory("linear", table).values, y, train, test,
                                             cfg.task)
        return {"scenario": scenario.value, "replicate": r, "task": cfg.task,
                "string_kernel": best.model_id, "string_objective": best.objective,
                "linear_objective": lin_obj, "objective_delta": best.objective - lin_obj,
                "string_lpd": best.held_out_lpd, "linear_lpd": lin_lpd,
                "lpd_delta": best.held_out_lpd - lin_lpd}

    jobs = [(si + 1, sc, r) for si, sc in enumerate((Scenario.PHYLO, Scenario.RANDOM))
            for r in range(cfg.replicates)]
    return [row for row in ordered_map(run, jobs, threads) if row is not None]


# --------------------------------------------------------------------- output

def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def config_template() -> str:
    """Default desk-scale configuration as JSON."""
    return json.dumps(ExperimentConfig().to_dict(), indent=2, sort_keys=True) + "\n"


FIGURES = {"figure1": figure1, "figure2": figure2, "figure3": figure3}
