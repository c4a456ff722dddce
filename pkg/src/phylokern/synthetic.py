"""Synthetic seed studies: a random tree, sequences evolved along it, and
heavy-tailed DMN concentrations.

These stand in for a real seed dataset (representative sequences, tree and
fitted concentrations) when running the simulation studies at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from phylokern.bioio.dataset import CopheneticMatrix, cophenetic
from phylokern.bioio.fasta import SequenceRecord
from phylokern.bioio.newick import PhyloTree

_BASES = np.frombuffer(b"ACGT", dtype=np.uint8)


def yule_tree(p: int, rng: np.random.Generator, height: float = 0.15,
              prefix: str = "otu") -> PhyloTree:
    """Ultrametric pure-birth tree with ``p`` leaves and root height ``height``.

    Every lineage splits at unit rate until ``p`` exist; the tips are then
    run on for one more waiting time so that no terminal branch is empty.
    Leaves are named ``{prefix}0 .. {prefix}{p-1}`` in order of creation.
    """
    if p < 2:
        raise ValueError("need at least two leaves")
    parent, split_time = [-1], [0.0]
    alive = [0]
    t = 0.0
    while len(alive) < p:
        t += rng.exponential(1.0 / len(alive))
        node = alive.pop(int(rng.integers(len(alive))))
        split_time[node] = t
        for _ in range(2):
            parent.append(node)
            split_time.append(0.0)
            alive.append(len(parent) - 1)
    t += rng.exponential(1.0 / len(alive))
    node_time = np.array(split_time)
    node_time[alive] = t
    parent = np.array(parent)
    lengths = np.zeros(len(parent))
    lengths[1:] = node_time[1:] - node_time[parent[1:]]
    names = [None] * len(parent)
    for k, leaf in enumerate(sorted(alive)):
        names[leaf] = f"{prefix}{k}"
    # the root is the first split, so its tips sit t - node_time[0] below it
    return PhyloTree.from_parents(names, parent, lengths * (height / (t - node_time[0])))


def evolve_sequences(tree: PhyloTree, length: int, rng: np.random.Generator) -> list[SequenceRecord]:
    """Jukes-Cantor evolution from a uniform random root sequence.

    A site on a branch of length ``t`` changes with probability
    ``3/4 (1 - exp(-4t/3))``, to one of the other three bases uniformly.
    Returns one record per leaf, in leaf order.
    """
    seqs = {0: rng.integers(0, 4, size=length)}
    for node in tree._preorder()[1:]:
        t = tree.branch_length[node]
        change = rng.random(length) < 0.75 * (1 - np.exp(-4 * t / 3))
        s = seqs[tree.parent[node]].copy()
        s[change] = (s[change] + rng.integers(1, 4, size=int(change.sum()))) % 4
        seqs[node] = s
    return [SequenceRecord(tree.names[i], _BASES[seqs[i]].tobytes().decode())
            for i in tree.leaves]


def heavy_tailed_concentrations(p: int, rng: np.random.Generator,
                                sigma: float = 1.5, total: float = 20.0) -> np.ndarray:
    """Log-normal concentrations rescaled to sum to ``total``.

    Fitted DMN concentrations for 16S data are dominated by a few abundant
    OTUs and a long tail of rare ones; a wide log-normal mimics that.
    """
    alpha = rng.lognormal(0.0, sigma, size=p)
    return alpha * (total / alpha.sum())


@dataclass(frozen=True, eq=False)
class SyntheticStudy:
    tree: PhyloTree
    sequences: list
    alpha: np.ndarray
    coph: CopheneticMatrix

    @property
    def otu_ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.sequences)


def make_study(p: int, seed: int, length: int = 200, height: float = 0.15,
               sigma: float = 1.5, total: float = 20.0) -> SyntheticStudy:
    """Tree, sequences and concentrations for ``p`` OTUs from one seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    tree = yule_tree(p, rng, height)
    seqs = evolve_sequences(tree, length, rng)
    alpha = heavy_tailed_concentrations(p, rng, sigma, total)
    coph = cophenetic(tree, [r.id for r in seqs])
    return SyntheticStudy(tree, seqs, alpha, coph)
