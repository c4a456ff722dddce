"""``phylokern`` command-line interface.

Data go to files (or stdout for JSON results); timing goes to stderr.
Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from phylokern import __version__
from phylokern._threads import resolve_threads
from phylokern.bioio import (OtuTable, align_dataset, cophenetic, format_fasta,
                             parse_fasta, parse_newick, parse_otu_table)
from phylokern.errors import DataValidationError, PhylokernError
from phylokern.experiments import (FIGURES, ExperimentConfig, config_template, parse_kernel_name,
                                   rows_to_csv)
from phylokern.gp import (GpRegressor, ModelScore, fit_classifier, fit_regression,
                          lpd_classification, lpd_regression, model_select, predict_proba,
                          predict_regression)
from phylokern.matrixio import KERNEL_MAGIC, SIMILARITY_MAGIC, read_matrix, to_binary, to_tsv
from phylokern.mmdtest import DEFAULT_N_PERM, SCHEMA_VERSION, permutation_test
from phylokern.samplekernel import (KernelMatrix, distance_to_kernel, linear_kernel,
                                    rbf_median_kernel, stringphylo_kernel, transform,
                                    unifrac_distance)
from phylokern.seqkernel import KmerConfig, SimilarityMatrix, Variant, build_similarity_matrix
from phylokern.simgen import (DmnParams, NbReadModel, PhenotypeSpec, Scenario, fit_dmn_ml,
                              generate_phenotype, log10_perm_space, make_effect_sizes,
                              phylo_clusters, random_label_clusters, rng_for, sample_dmn,
                              sample_reads, two_sample_scenario)
from phylokern.synthetic import SyntheticStudy, make_study


class UsageError(PhylokernError):
    exit_code = 2


# ------------------------------------------------------------------ helpers

def _write_atomic(path: Path, data: bytes) -> None:
    """Write via a temporary sibling so a failed run never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _emit_json(obj, out: Optional[str]) -> None:
    data = _json_bytes(obj)
    if out:
        _write_atomic(Path(out), data)
    else:
        sys.stdout.write(data.decode())


def _matrix_bytes(path: str, ids, values, magic: bytes, corner: str) -> bytes:
    if Path(path).suffix.lower() in (".bin", ".pks", ".pkk"):
        return to_binary(ids, values, magic)
    return to_tsv(ids, values, corner).encode()


def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _timing(label: str, start: float, extra: str = "") -> None:
    elapsed = time.perf_counter() - start
    print(f"[phylokern] {label}: {elapsed:.3f} s{extra}", file=sys.stderr)


def read_two_column(path: Path, what: str) -> dict:
    """``id<TAB>value`` file with a header line -> {id: value-string}."""
    lines = [ln.rstrip("\r\n") for ln in path.read_text(encoding="utf-8-sig").splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) < 2:
        raise DataValidationError(f"{what} file needs a header and at least one row")
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != 2:
            raise DataValidationError(f"{what} line {lineno}: expected 2 tab-separated fields")
        if cells[0] in out:
            raise DataValidationError(f"{what} line {lineno}: duplicate id {cells[0]!r}")
        out[cells[0]] = cells[1]
    return out


def _read_kernel(path: Path) -> KernelMatrix:
    ids, values = read_matrix(path)
    return KernelMatrix(ids, values, "file")


# ------------------------------------------------------------- kernel seq

def cmd_kernel_seq(args) -> int:
    if args.variant == "mismatch" and args.m is None:
        raise UsageError("--variant mismatch requires --m")
    if args.variant == "gappy" and args.g is None:
        raise UsageError("--variant gappy requires --g")
    if args.variant == "spectrum" and (args.m is not None or args.g is not None):
        raise UsageError("--m/--g do not apply to the spectrum kernel")
    try:
        cfg = KmerConfig(Variant(args.variant), args.k, m=args.m or 0, g=args.g or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = parse_fasta(_existing(args.fasta, "FASTA").read_bytes(), mode=args.mode)
    start = time.perf_counter()
    S = build_similarity_matrix(records, cfg, threads=args.threads, normalize=args.normalize)
    n = len(records)
    elapsed = max(time.perf_counter() - start, 1e-12)
    _write_atomic(Path(args.out), _matrix_bytes(args.out, S.otu_ids, S.values,
                                                SIMILARITY_MAGIC, "otu"))
    _timing(f"kernel seq {cfg.label}", start,
            f", {n} sequences, {n * (n + 1) / 2 / elapsed:.3g} entries/s")
    return 0


# ---------------------------------------------------------- kernel sample

def _similarity_for(path: Path, otu_ids: Sequence[str]) -> SimilarityMatrix:
    ids, values = read_matrix(path)
    pos = {o: i for i, o in enumerate(ids)}
    missing = [o for o in otu_ids if o not in pos]
    if missing:
        raise DataValidationError(f"OTU {missing[0]!r} missing from the similarity matrix")
    idx = [pos[o] for o in otu_ids]
    return SimilarityMatrix(tuple(otu_ids), values[np.ix_(idx, idx)])


def build_sample_kernel(table: OtuTable, kind: Optional[str], s_matrix: Optional[Path],
                        tree_path: Optional[Path], mode: Optional[str],
                        square: bool = True, psd_clip: bool = True) -> KernelMatrix:
    if s_matrix is not None:
        A = transform(table, mode or "clr")
        return stringphylo_kernel(A, _similarity_for(s_matrix, table.otu_ids))
    if kind == "linear":
        return linear_kernel(transform(table, mode or "clr"))
    if kind == "rbf":
        return rbf_median_kernel(transform(table, mode or "clr"))
    if tree_path is None:
        raise UsageError(f"--kind {kind} requires --tree")
    tree = parse_newick(tree_path.read_text(encoding="utf-8"))
    missing = [o for o in table.otu_ids if o not in set(tree.leaf_names)]
    if missing:
        raise DataValidationError(f"OTU {missing[0]!r} is not a leaf of the tree")
    lengths = tree.root_distances(table.otu_ids)
    if kind == "unifrac_u":
        A, unifrac_mode = transform(table, mode or "log1p"), "unweighted"
    else:
        A, unifrac_mode = transform(table, mode or "relative"), "weighted"
    D = unifrac_distance(A, lengths, unifrac_mode)
    return distance_to_kernel(D, square, psd_clip, table.sample_ids, kind)


def cmd_kernel_sample(args) -> int:
    if (args.s_matrix is None) == (args.kind is None):
        raise UsageError("give exactly one of --s-matrix or --kind")
    if args.kind in ("unifrac_u", "unifrac_w") and args.tree is None:
        raise UsageError(f"--kind {args.kind} requires --tree")
    table = parse_otu_table(_existing(args.counts, "counts").read_bytes())
    start = time.perf_counter()
    K = build_sample_kernel(table, args.kind, _existing(args.s_matrix, "similarity matrix"),
                            _existing(args.tree, "tree"), args.transform,
                            not args.unsquared, not args.no_psd_clip)
    _write_atomic(Path(args.out), _matrix_bytes(args.out, K.sample_ids, K.values,
                                                KERNEL_MAGIC, "sample"))
    _timing(f"kernel sample {K.kind}", start, f", {len(K.sample_ids)} samples")
    return 0


# ----------------------------------------------------------------- mmd-test

def cmd_mmd_test(args) -> int:
    K = _read_kernel(_existing(args.kernel, "kernel"))
    labels = read_two_column(_existing(args.labels, "labels"), "labels")
    missing = [s for s in K.sample_ids if s not in labels]
    if missing:
        raise DataValidationError(f"no label for sample {missing[0]!r}")
    lab = np.array([labels[s] for s in K.sample_ids])
    start = time.perf_counter()
    res = permutation_test(K, lab, args.n_perm, args.seed, args.unbiased, args.threads)
    out = res.to_json()
    out["groups"] = sorted(set(lab.tolist()))
    _emit_json(out, args.out)
    _timing("mmd-test", start, f", {args.n_perm} permutations")
    return 0


# ----------------------------------------------------------------------- gp

def _targets(path: Path, sample_ids: Sequence[str], task: str) -> np.ndarray:
    raw = read_two_column(path, "targets")
    missing = [s for s in sample_ids if s not in raw]
    if missing:
        raise DataValidationError(f"no target value for sample {missing[0]!r}")
    try:
        y = np.array([float(raw[s]) for s in sample_ids])
    except ValueError as exc:
        raise DataValidationError(f"non-numeric target: {exc}") from None
    if task == "class" and not set(np.unique(y).tolist()) <= {0.0, 1.0}:
        raise DataValidationError("classification targets must be 0 or 1")
    return y


def _model_id(path: str) -> tuple[str, Optional[KmerConfig]]:
    stem = Path(path).name.split(".")[0]
    try:
        return stem, parse_kernel_name(stem)
    except ValueError:
        return stem, None


def _split_ids(sample_ids, fraction: float, seed: int):
    n = len(sample_ids)
    if fraction >= 1.0:
        return list(range(n)), []
    order = rng_for(seed, 0).permutation(n)
    n_train = max(2, int(round(fraction * n)))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def _fit(K: np.ndarray, y: np.ndarray, task: str):
    return fit_regression(K, y) if task == "reg" else fit_classifier(K, y)


def _score(model, K_cross, kdiag, y_test, task: str) -> float:
    if task == "reg":
        return lpd_regression(model, K_cross, kdiag, y_test)
    return lpd_classification(model, K_cross, kdiag, y_test)


def _predict(model, K_cross, kdiag, task: str) -> tuple[np.ndarray, np.ndarray]:
    if task == "reg":
        return predict_regression(model, K_cross, kdiag)
    p = predict_proba(model, K_cross, kdiag)
    return p, p * (1 - p)


def cmd_gp_fit(args) -> int:
    if not 0 < args.split <= 1:
        raise UsageError("--split must lie in (0, 1]")
    kernels = [_read_kernel(_existing(k, "kernel")) for k in args.kernels]
    ids = kernels[0].sample_ids
    kernels = [K.reorder(ids) for K in kernels]
    y = _targets(_existing(args.y, "targets"), ids, args.task)
    train, test = _split_ids(ids, args.split, args.seed)
    start = time.perf_counter()
    scores, models = [], {}
    for path, K in zip(args.kernels, kernels):
        model_id, cfg = _model_id(path)
        if model_id in models:
            raise UsageError(f"duplicate model id {model_id!r}; rename kernel files")
        V = K.values
        model = _fit(V[np.ix_(train, train)], y[train], args.task)
        summary = model.summary()
        lpd = (_score(model, V[np.ix_(test, train)], np.diag(V)[test], y[test], args.task)
               if test else None)
        scores.append(ModelScore(model_id, summary["objective"], lpd, cfg,
                                 {k: v for k, v in summary.items() if k != "objective"}))
        models[model_id] = (path, model, V)
    ranked = model_select(scores)
    best = ranked[0]
    path, model, V = models[best.model_id]
    out = {
        "schema_version": SCHEMA_VERSION,
        "task": args.task,
        "seed": args.seed,
        "split": args.split,
        "train_ids": [ids[i] for i in train],
        "test_ids": [ids[i] for i in test],
        "selected": best.model_id,
        "selected_kernel_file": str(path),
        "hyperparameters": best.hyperparameters,
        "models": [{"model_id": s.model_id, "objective": s.objective,
                    "held_out_lpd": s.held_out_lpd, "kernel_file": str(models[s.model_id][0]),
                    **s.hyperparameters} for s in ranked],
    }
    _emit_json(out, args.out)
    if args.predictions and test:
        mean, var = _predict(model, V[np.ix_(test, train)], np.diag(V)[test], args.task)
        _write_predictions(Path(args.predictions), [ids[i] for i in test], mean, var, y[test])
    _timing("gp fit", start, f", {len(kernels)} kernel(s), winner {best.model_id}")
    return 0


def _write_predictions(path: Path, ids, mean, var, y=None) -> None:
    lines = ["sample\tmean\tvariance" + ("\ty" if y is not None else "")]
    for i, s in enumerate(ids):
        row = [s, repr(float(mean[i])), repr(float(var[i]))]
        if y is not None:
            row.append(repr(float(y[i])))
        lines.append("\t".join(row))
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def cmd_gp_predict(args) -> int:
    spec = json.loads(_existing(args.model, "model").read_text(encoding="utf-8"))
    if spec.get("schema_version") != SCHEMA_VERSION:
        raise DataValidationError("model file has an unsupported schema_version")
    K = _read_kernel(_existing(args.kernel or spec["selected_kernel_file"], "kernel"))
    train_ids = spec["train_ids"]
    pos = {s: i for i, s in enumerate(K.sample_ids)}
    missing = [s for s in train_ids if s not in pos]
    if missing:
        raise DataValidationError(f"training sample {missing[0]!r} missing from the kernel")
    y = _targets(_existing(args.y, "targets"), train_ids, spec["task"])
    train = [pos[s] for s in train_ids]
    targets = [s for s in K.sample_ids if s not in set(train_ids)] if not args.samples else \
        args.samples
    absent = [s for s in targets if s not in pos]
    if absent:
        raise DataValidationError(f"sample {absent[0]!r} missing from the kernel")
    test = [pos[s] for s in targets]
    V = K.values
    start = time.perf_counter()
    hp = spec["hyperparameters"]
    if spec["task"] == "reg":
        model = GpRegressor.from_hyperparameters(V[np.ix_(train, train)], y, hp["noise_var"],
                                                 hp["signal_var"])
    else:
        # the variational fit is deterministic, so refitting reproduces it
        model = fit_classifier(V[np.ix_(train, train)], y)
    mean, var = _predict(model, V[np.ix_(test, train)], np.diag(V)[test], spec["task"])
    _write_predictions(Path(args.out), targets, mean, var)
    _timing("gp predict", start, f", {len(test)} sample(s)")
    return 0


# --------------------------------------------------------------- simulate

@dataclass
class SimulationConfig:
    """Two-sample and host-trait simulation settings (JSON, versioned).

    Without ``seed_fasta``/``seed_tree``/``seed_counts`` a synthetic seed
    study of ``p`` OTUs is generated from ``seed``; with them, concentrations
    are maximum-likelihood DMN estimates from the seed counts.
    """

    seed: int = 0
    p: int = 100
    seq_length: int = 200
    tree_height: float = 0.15
    alpha_sigma: float = 1.5
    alpha_total: float = 20.0
    seed_fasta: Optional[str] = None
    seed_tree: Optional[str] = None
    seed_counts: Optional[str] = None
    reads_mean: float = 1e5
    reads_dispersion: float = 10.0
    # two-sample
    epsilon: float = 0.1
    n_x: int = 50
    n_y: int = 50
    random_labels: bool = False
    # host-trait
    n: int = 200
    scenario: str = "phylo"
    task: str = "regression"
    noise_var: float = 0.3
    cluster_epsilon: float = 0.1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        Scenario(self.scenario)
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        given = [x is not None for x in (self.seed_fasta, self.seed_tree, self.seed_counts)]
        if any(given) and not all(given):
            raise ValueError("seed_fasta, seed_tree and seed_counts go together")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**data)

    @property
    def reads_model(self) -> NbReadModel:
        return NbReadModel(self.reads_mean, self.reads_dispersion)


def load_study(cfg: SimulationConfig, base: Path) -> tuple[SyntheticStudy, dict]:
    if cfg.seed_fasta is None:
        study = make_study(cfg.p, cfg.seed, cfg.seq_length, cfg.tree_height,
                           cfg.alpha_sigma, cfg.alpha_total)
        return study, {"source": "synthetic"}
    paths = [_existing(str(base / p), what) for p, what in
             ((cfg.seed_fasta, "seed FASTA"), (cfg.seed_tree, "seed tree"),
              (cfg.seed_counts, "seed counts"))]
    seqs = parse_fasta(paths[0].read_bytes())
    tree = parse_newick(paths[1].read_text(encoding="utf-8"))
    table = parse_otu_table(paths[2].read_bytes())
    data = align_dataset(seqs, tree, table, strict=True)
    fit = fit_dmn_ml(data.table)
    study = SyntheticStudy(data.tree, list(data.sequences), np.asarray(fit.alpha),
                           cophenetic(data.tree, data.otu_ids))
    return study, {"source": "seed dataset", "dmn_iterations": fit.iterations,
                   "dmn_converged": fit.converged, "dmn_log_likelihood": fit.log_likelihood}


def _study_files(study: SyntheticStudy) -> dict:
    return {"otus.fasta": format_fasta(study.sequences).encode(),
            "tree.nwk": (study.tree.to_newick() + "\n").encode()}


def _write_bundle(out_dir: Path, files: dict, manifest: dict) -> None:
    manifest = dict(manifest)
    manifest["files"] = {name: hashlib.sha256(data).hexdigest()
                         for name, data in sorted(files.items())}
    for name, data in files.items():
        _write_atomic(out_dir / name, data)
    _write_atomic(out_dir / "manifest.json", _json_bytes(manifest))


def _load_sim_config(args) -> tuple[SimulationConfig, Path]:
    path = _existing(args.config, "config")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        if args.seed is not None:
            raw["seed"] = args.seed
        return SimulationConfig.from_dict(raw), path.parent
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_simulate_two_sample(args) -> int:
    cfg, base = _load_sim_config(args)
    start = time.perf_counter()
    study, source = load_study(cfg, base)
    rng = rng_for(cfg.seed, 1)
    clusters = phylo_clusters(study.coph, cfg.epsilon) if cfg.epsilon > 0 else None
    draw = two_sample_scenario(study.alpha, study.coph, cfg.epsilon, cfg.reads_model,
                               cfg.n_x, cfg.n_y, rng, cfg.random_labels, clusters)
    pooled = OtuTable(draw.X.sample_ids + draw.Y.sample_ids, study.otu_ids,
                      np.vstack([draw.X.counts, draw.Y.counts]))
    labels = "sample\tgroup\n" + "".join(f"{s}\tX\n" for s in draw.X.sample_ids) + \
        "".join(f"{s}\tY\n" for s in draw.Y.sample_ids)
    files = {**_study_files(study), "counts.tsv": pooled.to_tsv().encode(),
             "labels.tsv": labels.encode()}
    used = draw.clusters
    manifest = {
        "schema_version": SCHEMA_VERSION, "kind": "two-sample", "version": __version__,
        "config": asdict(cfg), "study": source,
        "alpha1": draw.alpha1, "alpha2": draw.alpha2,
        "alpha2_equals_alpha1": bool(np.array_equal(draw.alpha1, draw.alpha2)),
        "n_clusters": used.n_clusters if used else len(study.alpha),
        "log10_perm_space": log10_perm_space(used) if used else 0.0,
        "cluster_labels": used.labels if used else list(range(len(study.alpha))),
    }
    _write_bundle(Path(args.out_dir), files, manifest)
    _timing("simulate two-sample", start)
    return 0


def cmd_simulate_host_trait(args) -> int:
    cfg, base = _load_sim_config(args)
    start = time.perf_counter()
    study, source = load_study(cfg, base)
    rng = rng_for(cfg.seed, 2)
    alpha = study.alpha[rng.permutation(len(study.alpha))]
    reads = sample_reads(cfg.reads_model, cfg.n, rng)
    table = sample_dmn(DmnParams(alpha), reads, rng, study.otu_ids)
    clusters = phylo_clusters(study.coph, cfg.cluster_epsilon)
    scenario = Scenario(cfg.scenario)
    if scenario is Scenario.RANDOM:
        clusters = random_label_clusters(np.bincount(clusters.labels), len(alpha), rng)
    beta, chosen = make_effect_sizes(clusters, rng)
    noise = cfg.noise_var if cfg.task == "regression" else 0.1
    y, scaled = generate_phenotype(table, beta, PhenotypeSpec(cfg.task, noise, scenario=scenario),
                                   rng)
    pheno = "sample\ty\n" + "".join(f"{s}\t{v!r}\n" for s, v in
                                    zip(table.sample_ids, y.tolist()))
    files = {**_study_files(study), "counts.tsv": table.to_tsv().encode(),
             "phenotype.tsv": pheno.encode()}
    manifest = {
        "schema_version": SCHEMA_VERSION, "kind": "host-trait", "version": __version__,
        "config": asdict(cfg), "study": source, "alpha": alpha, "noise_var": noise,
        "chosen_clusters": chosen, "cluster_labels": clusters.labels, "beta": scaled,
    }
    _write_bundle(Path(args.out_dir), files, manifest)
    _timing("simulate host-trait", start)
    return 0


# ------------------------------------------------------------ tree clusters

def cmd_tree_clusters(args) -> int:
    tree = parse_newick(_existing(args.tree, "tree").read_text(encoding="utf-8"))
    ids = tree.leaf_names
    coph = cophenetic(tree, ids)
    clusters = phylo_clusters(coph, args.epsilon)
    body = "otu\tcluster\n" + "".join(f"{o}\t{c}\n" for o, c in zip(ids, clusters.labels))
    _write_atomic(Path(args.out), body.encode())
    print(f"[phylokern] {clusters.n_clusters} clusters, log10 permutation space "
          f"{log10_perm_space(clusters):.3f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- experiment

def cmd_experiment(args) -> int:
    if args.figure == "template":
        _write_atomic(Path(args.out), config_template().encode()) if args.out else \
            sys.stdout.write(config_template())
        return 0
    if not args.out:
        raise UsageError("--out is required")
    raw = {}
    if args.config:
        raw = json.loads(_existing(args.config, "config").read_text(encoding="utf-8"))
    for key in ("seed", "replicates"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    try:
        cfg = ExperimentConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    start = time.perf_counter()
    rows = FIGURES[args.figure](cfg, threads=args.threads)
    _write_atomic(Path(args.out), rows_to_csv(rows).encode())
    _timing(f"experiment {args.figure}", start, f", {len(rows)} rows")
    return 0


# ------------------------------------------------------------------- parser

def _threads_arg(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_threads_arg, default=None,
                        help="worker threads (default: $PHYLOKERN_THREADS, else 1)")

    parser = argparse.ArgumentParser(prog="phylokern", formatter_class=fmt,
                                     description="Phylogeny-aware kernels for 16S data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    kernel = sub.add_parser("kernel", help="OTU and sample kernel matrices", formatter_class=fmt)
    ksub = kernel.add_subparsers(dest="kernel_command", required=True)

    p = ksub.add_parser("seq", parents=[common], formatter_class=fmt,
                        help="OTU similarity matrix S from a FASTA file")
    p.add_argument("fasta")
    p.add_argument("--variant", choices=[v.value for v in Variant], default="spectrum")
    p.add_argument("--k", type=int, required=True, help="k-mer length")
    p.add_argument("--m", type=int, default=None, help="mismatches (mismatch kernel)")
    p.add_argument("--g", type=int, default=None, help="maximum gap (gappy pair kernel)")
    p.add_argument("--normalize", action="store_true", help="cosine-normalise S")
    p.add_argument("--mode", choices=("strict", "lenient"), default="strict",
                   help="lenient accepts IUPAC ambiguity codes")
    p.add_argument("--out", required=True, help="output (.bin/.pks binary, else TSV)")
    p.set_defaults(func=cmd_kernel_seq)

    p = ksub.add_parser("sample", parents=[common], formatter_class=fmt,
                        help="sample kernel matrix K from an OTU table")
    p.add_argument("counts")
    p.add_argument("--s-matrix", default=None, help="OTU similarity matrix (StringPhylo)")
    p.add_argument("--kind", choices=("linear", "rbf", "unifrac_u", "unifrac_w"), default=None)
    p.add_argument("--tree", default=None, help="Newick tree (UniFrac kinds)")
    p.add_argument("--transform", choices=("clr", "log1p", "relative", "raw"), default=None,
                   help="abundance transform (default: clr; log1p for unifrac_u; relative "
                        "for unifrac_w)")
    p.add_argument("--unsquared", action="store_true",
                   help="double-centre raw UniFrac distances instead of their squares")
    p.add_argument("--no-psd-clip", action="store_true",
                   help="keep negative eigenvalues of double-centred distances")
    p.add_argument("--out", required=True, help="output (.bin/.pkk binary, else TSV)")
    p.set_defaults(func=cmd_kernel_sample)

    p = sub.add_parser("mmd-test", parents=[common], formatter_class=fmt,
                       help="kernel two-sample permutation test")
    p.add_argument("kernel", help="sample kernel matrix file")
    p.add_argument("labels", help="TSV with header: sample<TAB>group (two groups)")
    p.add_argument("--n-perm", type=int, default=DEFAULT_N_PERM)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unbiased", action="store_true", help="exclude i == j terms")
    p.add_argument("--out", default=None, help="JSON output file (default: stdout)")
    p.set_defaults(func=cmd_mmd_test)

    gp = sub.add_parser("gp", help="Gaussian-process host-trait models", formatter_class=fmt)
    gsub = gp.add_subparsers(dest="gp_command", required=True)
    p = gsub.add_parser("fit", parents=[common], formatter_class=fmt,
                        help="fit one GP per kernel file and rank by training objective")
    p.add_argument("kernels", nargs="+", help="sample kernel files; the name stem is the model id")
    p.add_argument("--y", required=True, help="TSV with header: sample<TAB>value")
    p.add_argument("--task", choices=("reg", "class"), default="reg")
    p.add_argument("--split", type=float, default=0.8, help="training fraction (1 = all)")
    p.add_argument("--seed", type=int, default=0, help="seed for the train/test split")
    p.add_argument("--out", default=None, help="model JSON (default: stdout)")
    p.add_argument("--predictions", default=None, help="TSV of held-out predictions")
    p.set_defaults(func=cmd_gp_fit)

    p = gsub.add_parser("predict", parents=[common], formatter_class=fmt,
                        help="predict with a model written by 'gp fit'")
    p.add_argument("--model", required=True)
    p.add_argument("--y", required=True, help="training targets")
    p.add_argument("--kernel", default=None, help="kernel file (default: the selected one)")
    p.add_argument("--samples", nargs="*", default=None,
                   help="samples to predict (default: every non-training sample)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gp_predict)

    sim = sub.add_parser("simulate", help="simulate datasets", formatter_class=fmt)
    ssub = sim.add_subparsers(dest="sim_command", required=True)
    for name, func in (("two-sample", cmd_simulate_two_sample),
                       ("host-trait", cmd_simulate_host_trait)):
        p = ssub.add_parser(name, parents=[common], formatter_class=fmt,
                            help=f"{name} dataset from a JSON config")
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", required=True)
        p.set_defaults(func=func)

    tree = sub.add_parser("tree", help="tree utilities", formatter_class=fmt)
    tsub = tree.add_subparsers(dest="tree_command", required=True)
    p = tsub.add_parser("clusters", parents=[common], formatter_class=fmt,
                        help="complete-linkage OTU clusters at epsilon * max distance")
    p.add_argument("tree")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tree_clusters)

    p = sub.add_parser("experiment", parents=[common], formatter_class=fmt,
                       help="desk-scale simulation studies (tidy CSV)")
    p.add_argument("figure", choices=(*FIGURES, "template"),
                   help="'template' writes the default config")
    p.add_argument("--config", default=None, help="JSON config; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.threads = resolve_threads(getattr(args, "threads", None))
    except ValueError as exc:
        parser.error(str(exc))
    if args.command == "tree" and not 0 < args.epsilon <= 1:
        parser.error("--epsilon must lie in (0, 1]")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageError as exc:
        print(f"phylokern: usage error: {exc}", file=sys.stderr)
        return exc.exit_code
    except PhylokernError as exc:
        print(f"phylokern: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # library argument checks that reach here are problems with the inputs
        print(f"phylokern: error: {exc}", file=sys.stderr)
        return DataValidationError.exit_code
    except OSError as exc:
        print(f"phylokern: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
