import csv
import io
import json

import numpy as np
import pytest

from phylokern.bioio import cophenetic, parse_fasta, parse_newick
from phylokern.bioio.fasta import format_fasta
from phylokern.experiments import (ExperimentConfig, config_template, figure1, figure2, figure3,
                                   parse_kernel_name, rejection_rates, rows_to_csv)
from phylokern.seqkernel import KmerConfig
from phylokern.simgen import log10_perm_space, phylo_clusters, rng_for
from phylokern.synthetic import evolve_sequences, heavy_tailed_concentrations, make_study, yule_tree


# --------------------------------------------------------------- synthetic

def test_yule_tree_is_ultrametric():
    tree = yule_tree(40, rng_for(1), height=0.2)
    names = sorted(tree.leaf_names)
    assert names == sorted(f"otu{i}" for i in range(40))
    np.testing.assert_allclose(tree.root_distances(names), 0.2, rtol=1e-12)
    again = parse_newick(tree.to_newick())
    np.testing.assert_allclose(again.root_distances(names), 0.2, rtol=1e-9)


def test_evolve_sequences_divergence_tracks_tree():
    tree = yule_tree(30, rng_for(2), height=0.15)
    recs = evolve_sequences(tree, 2000, rng_for(3))
    assert len(recs) == 30 and all(len(r.bases) == 2000 for r in recs)
    assert parse_fasta(format_fasta(recs)) == recs
    seqs = np.array([np.frombuffer(r.bases.encode(), np.uint8) for r in recs])
    d = cophenetic(tree, [r.id for r in recs]).dist
    i, j = np.unravel_index(np.argmax(d), d.shape)
    k, l = np.unravel_index(np.argmin(d + np.eye(30) * 10), d.shape)
    assert (seqs[i] != seqs[j]).mean() > (seqs[k] != seqs[l]).mean()


def test_concentrations_sum_to_total():
    alpha = heavy_tailed_concentrations(500, rng_for(4), sigma=1.5, total=20.0)
    assert alpha.sum() == pytest.approx(20.0)
    assert (alpha > 0).all()


def test_make_study_is_seeded():
    a, b = make_study(25, seed=9), make_study(25, seed=9)
    assert a.sequences == b.sequences
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert a.otu_ids == a.coph.otu_ids
    assert make_study(25, seed=10).sequences != a.sequences


def test_permutation_space_grows_with_epsilon():
    study = make_study(200, seed=0)
    sizes = [log10_perm_space(phylo_clusters(study.coph, e)) for e in (0.01, 0.1, 0.3, 1.0)]
    assert sizes == sorted(sizes)
    assert phylo_clusters(study.coph, 0.1).n_clusters >= 10


# ----------------------------------------------------------------- configs

def test_kernel_names():
    assert parse_kernel_name("spectrum-k30") == KmerConfig.spectrum(30)
    assert parse_kernel_name("mismatch-k10-m1") == KmerConfig.mismatch(10, 1)
    assert parse_kernel_name("gappy-k5-g2") == KmerConfig.gappy(5, 2)
    assert parse_kernel_name("linear") is None
    for bad in ("spectrum", "wavelet-k3", "spectrum-kx"):
        with pytest.raises(ValueError):
            parse_kernel_name(bad)


def test_config_round_trip_and_validation():
    cfg = ExperimentConfig.from_dict(json.loads(config_template()))
    assert cfg == ExperimentConfig()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown config"):
        ExperimentConfig.from_dict({"seeed": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(kernels=())
    with pytest.raises(ValueError):
        ExperimentConfig(schema_version=99)


# ----------------------------------------------------------------- figures

SMALL = dict(p=40, n_x=6, n_y=6, n_perm=19, replicates=2, reads_mean=2000,
             kernels=("spectrum-k8", "linear", "rbf", "unifrac_u"))


def test_figure1_rows():
    cfg = ExperimentConfig(epsilons=(0.0, 1.0), **SMALL)
    rows = figure1(cfg)
    assert len(rows) == 2 * 2 * 4
    assert set(rows[0]) == {"kernel", "epsilon", "replicate", "mmd2", "p_value", "reject"}
    assert all(1 / 20 <= r["p_value"] <= 1 for r in rows)
    rates = rejection_rates(rows)
    assert set(rates) == {(k, e) for k in cfg.kernels for e in (0.0, 1.0)}
    assert rows_to_csv(rows) == rows_to_csv(figure1(cfg, threads=3))


def test_figure2_rows():
    rows = figure2(ExperimentConfig(**SMALL))
    assert len(rows) == 2 * 4
    for row in rows:
        assert row["ratio"] == pytest.approx(row["mmd2_phylo_lo"] / row["mmd2_phylo_hi"])


@pytest.mark.parametrize("task", ["regression", "classification"])
def test_figure3_rows(task):
    cfg = ExperimentConfig(p=60, n=40, replicates=2, task=task, reads_mean=2000,
                           string_grid=("spectrum-k6", "spectrum-k8"))
    rows = figure3(cfg)
    assert 1 <= len(rows) <= 4
    for row in rows:
        assert row["string_kernel"] in cfg.string_grid
        assert row["objective_delta"] == pytest.approx(row["string_objective"]
                                                       - row["linear_objective"])
    parsed = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
    assert parsed[0]["scenario"] in ("phylo", "random")


def test_rows_to_csv_empty():
    assert rows_to_csv([]) == ""
