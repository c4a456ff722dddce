"""Cophenetic distances and cross-file alignment of OTU identifiers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from phylokern.bioio.fasta import SequenceRecord
from phylokern.bioio.newick import PhyloTree
from phylokern.bioio.otutable import OtuTable
from phylokern.errors import DataValidationError


@dataclass(frozen=True, eq=False)
class CopheneticMatrix:
    otu_ids: tuple[str, ...]
    dist: np.ndarray

    @property
    def max_dist(self) -> float:
        return float(self.dist.max()) if self.dist.size else 0.0


def cophenetic(tree: PhyloTree, otu_ids: Sequence[str]) -> CopheneticMatrix:
    """Leaf-to-leaf path lengths, rows and columns in ``otu_ids`` order.

    Each internal node fills the block of leaf pairs it separates with
    ``depth_i + depth_j - 2 * depth(node)``, so every pair is written once.
    """
    otu_ids = tuple(otu_ids)
    leaf_index = {tree.names[n]: n for n in tree.leaves}
    missing = [o for o in otu_ids if o not in leaf_index]
    if missing:
        raise DataValidationError(f"OTU(s) missing from tree: {missing[:5]}")

    depth = tree.depths()
    # position of each leaf node in the full leaf ordering
    all_leaves = tree.leaves
    pos = {node: i for i, node in enumerate(all_leaves)}
    full = np.zeros((len(all_leaves), len(all_leaves)))
    leaf_depth = depth[all_leaves]

    below: dict[int, list[int]] = {}
    for node in reversed(tree._preorder()):
        kids = tree.children[node]
        if not kids:
            below[node] = [pos[node]]
            continue
        groups = [below.pop(c) for c in kids]
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                ga, gb = groups[a], groups[b]
                block = leaf_depth[ga][:, None] + leaf_depth[gb][None, :] - 2 * depth[node]
                full[np.ix_(ga, gb)] = block
                full[np.ix_(gb, ga)] = block.T
        below[node] = [i for g in groups for i in g]

    idx = [pos[leaf_index[o]] for o in otu_ids]
    dist = full[np.ix_(idx, idx)]
    np.fill_diagonal(dist, 0.0)
    np.maximum(dist, 0.0, out=dist)
    dist.setflags(write=False)
    return CopheneticMatrix(otu_ids, dist)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sequences, tree and counts sharing one OTU ordering (FASTA order)."""

    sequences: tuple[SequenceRecord, ...]
    tree: PhyloTree
    table: OtuTable

    @property
    def otu_ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.sequences)


def align_dataset(seqs: Sequence[SequenceRecord], tree: PhyloTree, table: OtuTable,
                  strict: bool = True) -> Dataset:
    """Match OTU identifiers across the three inputs.

    In strict mode the id sets must agree exactly. In lenient mode the
    intersection is kept and every dropped id is reported in a warning.
    """
    fasta_ids = [r.id for r in seqs]
    tree_ids = set(tree.leaf_names)
    table_ids = set(table.otu_ids)
    union = set(fasta_ids) | tree_ids | table_ids
    shared = set(fasta_ids) & tree_ids & table_ids

    if strict and shared != union:
        problems = []
        for name, ids in (("sequences", set(fasta_ids)), ("tree", tree_ids), ("table", table_ids)):
            absent = sorted(union - ids)
            if absent:
                problems.append(f"{len(absent)} id(s) absent from {name} (e.g. {absent[0]!r})")
        raise DataValidationError("OTU ids disagree: " + "; ".join(problems))

    dropped = sorted(union - shared)
    if dropped:
        warnings.warn(f"dropping {len(dropped)} OTU(s) not present in all inputs: {dropped[:10]}",
                      stacklevel=2)
    if not shared:
        raise DataValidationError("no OTU ids shared by sequences, tree and table")

    order = [i for i in fasta_ids if i in shared]
    keep = set(order)
    new_seqs = tuple(r for r in seqs if r.id in keep)
    new_tree = tree if tree_ids == keep else tree.prune(order)
    return Dataset(new_seqs, new_tree, table.select_otus(order))
