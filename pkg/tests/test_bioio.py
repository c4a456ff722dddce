import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylokern.bioio import (OtuTable, PhyloTree, SequenceRecord, align_dataset, cophenetic,
                             format_fasta, parse_fasta, parse_newick, parse_otu_table)
from phylokern.errors import DataValidationError


# ------------------------------------------------------------------ FASTA

def test_fasta_single_record():
    assert parse_fasta(">a\nACGT") == [SequenceRecord("a", "ACGT")]


def test_fasta_multiline_and_case():
    recs = parse_fasta(">a\nAC\nGT\n>b\ntttt")
    assert recs == [SequenceRecord("a", "ACGT"), SequenceRecord("b", "TTTT")]


def test_fasta_bytes_and_crlf():
    recs = parse_fasta(b">x desc\r\nacg\r\nt\r\n")
    assert recs == [SequenceRecord("x", "ACGT")]


@pytest.mark.parametrize("text, msg", [
    (">a\nACGT\n>a\nACGT", "duplicate"),
    (">a\n\n>b\nAC", "empty sequence"),
    (">a\nAC*T", "invalid"),
    (">a\nACNT", "strict"),
    ("ACGT\n>a\nAC", "before first header"),
    (">\nACGT", "empty record id"),
])
def test_fasta_errors(text, msg):
    with pytest.raises(DataValidationError, match=msg):
        parse_fasta(text)


def test_fasta_lenient_keeps_ambiguity():
    (rec,) = parse_fasta(">a\nACNTR", mode="lenient")
    assert rec.bases == "ACNTR"
    assert not rec.is_unambiguous


@given(st.lists(st.text("ACGT", min_size=1, max_size=200), min_size=1, max_size=6),
       st.integers(1, 90))
def test_fasta_round_trip(seqs, width):
    recs = [SequenceRecord(f"s{i}", s) for i, s in enumerate(seqs)]
    assert parse_fasta(format_fasta(recs, width)) == recs


# ------------------------------------------------------------------ Newick

def test_newick_two_leaves():
    tree = parse_newick("(a:1,b:1):0;")
    assert sorted(tree.leaf_names) == ["a", "b"]
    np.testing.assert_allclose(tree.root_distances(["a", "b"]), [1.0, 1.0])


def test_newick_internal_height(toy_tree_text):
    tree = parse_newick(toy_tree_text)
    internal = [i for i in range(tree.n_nodes) if tree.children[i] and i != 0]
    assert len(internal) == 1
    assert tree.depths()[internal[0]] == pytest.approx(0.5)
    np.testing.assert_allclose(tree.root_distances(["a", "b", "c"]), [1.5, 2.5, 3.0])


@pytest.mark.parametrize("text, msg", [
    ("(a:1,a:1);", "duplicate"),
    ("((a:1,b:1);", "parenthes"),
    ("(a:1,b:1));", "parenthes"),
    ("", "empty"),
    ("   ", "empty"),
])
def test_newick_errors(text, msg):
    with pytest.raises(DataValidationError, match=msg):
        parse_newick(text)


def test_newick_missing_lengths_warn_once():
    with pytest.warns(UserWarning) as record:
        tree = parse_newick("((a,b),c:2);")
    assert len(record) == 1
    np.testing.assert_allclose(tree.root_distances(["a", "b", "c"]), [0.0, 0.0, 2.0])


def test_newick_comments_and_quoted_labels():
    tree = parse_newick("[root comment]((a:1[x],'b c':2)n1:0.5,c:3);")
    assert sorted(tree.leaf_names) == ["a", "b c", "c"]
    again = parse_newick(tree.to_newick())
    assert sorted(again.leaf_names) == ["a", "b c", "c"]


def test_newick_deep_caterpillar_is_not_recursive():
    depth = 5000
    text = "(" * depth + "x0:1" + "".join(f",x{i + 1}:1):1" for i in range(depth)) + ";"
    tree = parse_newick(text)
    assert len(tree.leaf_names) == depth + 1
    assert len(parse_newick(tree.to_newick()).leaf_names) == depth + 1


@st.composite
def random_trees(draw, max_leaves=8):
    n = draw(st.integers(2, max_leaves))
    lengths = st.floats(0.0, 10.0, allow_nan=False)
    nodes = [f"L{i}:{draw(lengths)!r}" for i in range(n)]
    while len(nodes) > 1:
        i, j = sorted(draw(st.lists(st.integers(0, len(nodes) - 1), min_size=2, max_size=2,
                                    unique=True)))
        b, a = nodes.pop(j), nodes.pop(i)
        nodes.append(f"({a},{b}):{draw(lengths)!r}")
    return nodes[0] + ";"


@given(random_trees())
def test_newick_round_trip(text):
    tree = parse_newick(text)
    again = parse_newick(tree.to_newick())
    ids = sorted(tree.leaf_names)
    np.testing.assert_allclose(cophenetic(again, ids).dist, cophenetic(tree, ids).dist,
                               atol=1e-12)
    np.testing.assert_allclose(again.root_distances(ids), tree.root_distances(ids), atol=1e-12)


@settings(max_examples=60)
@given(random_trees())
def test_cophenetic_four_point_condition(text):
    tree = parse_newick(text)
    ids = tree.leaf_names
    d = cophenetic(tree, ids).dist
    tol = 1e-9 * max(1.0, d.max())
    for i, j, k, l in itertools.combinations(range(len(ids)), 4):
        sums = sorted([d[i, j] + d[k, l], d[i, k] + d[j, l], d[i, l] + d[j, k]])
        # the two largest of the three pair sums coincide for an additive metric
        assert sums[2] - sums[1] <= tol


# -------------------------------------------------------------- cophenetic

def test_cophenetic_examples(toy_tree_text):
    assert cophenetic(parse_newick("(a:1,b:1);"), ["a", "b"]).dist[0, 1] == 2.0
    coph = cophenetic(parse_newick(toy_tree_text), ["a", "b", "c"])
    assert coph.dist[0, 2] == pytest.approx(4.5)
    assert coph.dist[0, 1] == pytest.approx(3.0)
    np.testing.assert_array_equal(np.diag(coph.dist), 0.0)
    np.testing.assert_array_equal(coph.dist, coph.dist.T)
    assert coph.max_dist == pytest.approx(5.5)


def test_cophenetic_order_follows_request(toy_tree_text):
    tree = parse_newick(toy_tree_text)
    fwd = cophenetic(tree, ["a", "b", "c"]).dist
    rev = cophenetic(tree, ["c", "b", "a"]).dist
    np.testing.assert_array_equal(rev, fwd[::-1, ::-1])


def test_cophenetic_missing_otu(toy_tree_text):
    with pytest.raises(DataValidationError, match="zzz"):
        cophenetic(parse_newick(toy_tree_text), ["a", "zzz"])


def test_tree_validation():
    with pytest.raises(DataValidationError):
        PhyloTree.from_parents(["r", "a"], [-1, 0], [0.0, -1.0])
    with pytest.raises(DataValidationError):
        PhyloTree.from_parents(["r", "a", "b"], [-1, -1, 0], [0.0, 1.0, 1.0])


def test_prune_splices_unary_nodes(toy_tree_text):
    tree = parse_newick(toy_tree_text)
    pruned = tree.prune(["a", "c"])
    assert sorted(pruned.leaf_names) == ["a", "c"]
    assert cophenetic(pruned, ["a", "c"]).dist[0, 1] == pytest.approx(4.5)


# ---------------------------------------------------------------- OTU table

def test_otu_table_minimal():
    t = parse_otu_table("sample\to1\to2\ns1\t3\t0\n")
    assert t.shape == (1, 2)
    np.testing.assert_array_equal(t.counts, [[3, 0]])


@pytest.mark.parametrize("cell", ["-1", "2.5", "x", ""])
def test_otu_table_bad_cells(cell):
    with pytest.raises(DataValidationError):
        parse_otu_table(f"sample\to1\to2\ns1\t{cell}\t0\n")


@pytest.mark.parametrize("text", [
    "sample\to1\to2\ns1\t1\n",
    "sample\to1\to1\ns1\t1\t2\n",
    "sample\to1\ns1\t1\ns1\t2\n",
])
def test_otu_table_structure_errors(text):
    with pytest.raises(DataValidationError):
        parse_otu_table(text)


def test_otu_table_bom_and_crlf():
    t = parse_otu_table("﻿sample\to1\r\ns1\t4\r\n".encode("utf-8"))
    assert t.otu_ids == ("o1",) and t.counts[0, 0] == 4


def test_otu_table_is_immutable():
    t = OtuTable(("s",), ("o",), [[1]])
    with pytest.raises(ValueError):
        t.counts[0, 0] = 5


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_otu_table_round_trip(n, p, data):
    counts = data.draw(st.lists(st.lists(st.integers(0, 10**9), min_size=p, max_size=p),
                                min_size=n, max_size=n))
    t = OtuTable(tuple(f"s{i}" for i in range(n)), tuple(f"o{j}" for j in range(p)), counts)
    assert parse_otu_table(t.to_tsv()) == t


# ----------------------------------------------------------------- dataset

def _toy_inputs():
    seqs = parse_fasta(">c\nAAAA\n>a\nCCCC\n>b\nGGGG\n")
    tree = parse_newick("((a:1,b:2):0.5,c:3);")
    table = OtuTable(("s1", "s2"), ("a", "b", "c"), [[1, 2, 3], [4, 5, 6]])
    return seqs, tree, table


def test_align_reindexes_to_fasta_order():
    seqs, tree, table = _toy_inputs()
    data = align_dataset(seqs, tree, table)
    assert data.otu_ids == ("c", "a", "b")
    np.testing.assert_array_equal(data.table.counts, [[3, 1, 2], [6, 4, 5]])


def test_align_lenient_drops_extra_otu():
    seqs, tree, _ = _toy_inputs()
    table = OtuTable(("s1",), ("a", "b", "c", "d"), [[1, 2, 3, 4]])
    with pytest.warns(UserWarning, match="'d'"):
        data = align_dataset(seqs, tree, table, strict=False)
    assert data.table.shape == (1, 3)


def test_align_strict_rejects_mismatch():
    seqs, _, table = _toy_inputs()
    tree = parse_newick("(a:1,b:2);")
    with pytest.raises(DataValidationError, match="tree"):
        align_dataset(seqs, tree, table)


def test_align_lenient_prunes_tree():
    seqs, tree, table = _toy_inputs()
    seqs = seqs[:2]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        data = align_dataset(seqs, tree, table.select_otus(["a", "c"]), strict=False)
    assert sorted(data.tree.leaf_names) == ["a", "c"]
