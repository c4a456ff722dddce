"""Rooted phylogenetic trees: Newick parsing, serialisation and path distances."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from phylokern.errors import DataValidationError

_COMMENT = re.compile(r"\[[^\]]*\]")
_SPECIAL = set("(),:;")


@dataclass(frozen=True)
class PhyloTree:
    """Tree stored as parallel node arrays; node 0 is the root.

    ``parent[0] == -1``. ``branch_length[i]`` is the length of the edge
    above node ``i`` (the root's value is kept for round-tripping but never
    enters a path distance).
    """

    names: tuple[Optional[str], ...]
    parent: tuple[int, ...]
    branch_length: tuple[float, ...]
    children: tuple[tuple[int, ...], ...] = field(repr=False)

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.parent) == len(self.branch_length) == len(self.children) == n):
            raise DataValidationError("inconsistent node arrays")
        roots = [i for i, p in enumerate(self.parent) if p < 0]
        if roots != [0]:
            raise DataValidationError("tree must have exactly one root at node 0")
        if any(b < 0 or not np.isfinite(b) for b in self.branch_length):
            raise DataValidationError("branch lengths must be finite and non-negative")
        labels = [self.names[i] for i in self.leaves]
        if any(not lab for lab in labels):
            raise DataValidationError("every leaf needs a label")
        if len(set(labels)) != len(labels):
            dup = sorted({x for x in labels if labels.count(x) > 1})
            raise DataValidationError(f"duplicate leaf label(s): {dup}")

    @classmethod
    def from_parents(cls, names, parent, branch_length) -> "PhyloTree":
        kids: list[list[int]] = [[] for _ in names]
        for i, p in enumerate(parent):
            if p >= 0:
                kids[p].append(i)
        return cls(tuple(names), tuple(int(p) for p in parent),
                   tuple(float(b) for b in branch_length), tuple(tuple(k) for k in kids))

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    @property
    def leaves(self) -> list[int]:
        return [i for i in self._preorder() if not self.children[i]]

    @property
    def leaf_names(self) -> list[str]:
        return [self.names[i] for i in self.leaves]

    def _preorder(self) -> list[int]:
        order, stack = [], [0]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(reversed(self.children[node]))
        return order

    def depths(self) -> np.ndarray:
        """Path length from the root to every node."""
        depth = np.zeros(self.n_nodes)
        for node in self._preorder()[1:]:
            depth[node] = depth[self.parent[node]] + self.branch_length[node]
        return depth

    def root_distances(self, leaf_ids: Sequence[str]) -> np.ndarray:
        index = {self.names[i]: i for i in self.leaves}
        depth = self.depths()
        try:
            return np.array([depth[index[x]] for x in leaf_ids])
        except KeyError as exc:
            raise DataValidationError(f"OTU {exc.args[0]!r} is not a leaf of the tree") from None

    def prune(self, keep: Sequence[str]) -> "PhyloTree":
        """Restrict to the named leaves, splicing out unary internal nodes."""
        keep = set(keep)
        missing = keep - set(self.leaf_names)
        if missing:
            raise DataValidationError(f"cannot keep leaves absent from tree: {sorted(missing)}")

        order = self._preorder()
        alive = [False] * self.n_nodes
        for node in reversed(order):
            if self.children[node]:
                alive[node] = any(alive[c] for c in self.children[node])
            else:
                alive[node] = self.names[node] in keep
        if not alive[0]:
            raise DataValidationError("pruning would remove every leaf")

        names, parent, length = [], [], []
        # (node, new parent index, length carried down from spliced ancestors)
        stack = [(0, -1, 0.0)]
        while stack:
            node, new_parent, carried = stack.pop()
            live = [c for c in self.children[node] if alive[c]]
            if node != 0 and len(live) == 1:
                stack.append((live[0], new_parent, carried + self.branch_length[node]))
                continue
            idx = len(names)
            names.append(self.names[node])
            parent.append(new_parent)
            length.append(carried + self.branch_length[node])
            stack.extend((c, idx, 0.0) for c in reversed(live))
        return PhyloTree.from_parents(names, parent, length)

    def to_newick(self) -> str:
        text: dict[int, str] = {}
        for node in reversed(self._preorder()):
            label = self.names[node] or ""
            if label and (set(label) & (_SPECIAL | set(" []'\t"))):
                label = "'" + label.replace("'", "''") + "'"
            kids = self.children[node]
            inner = "(" + ",".join(text.pop(c) for c in kids) + ")" if kids else ""
            text[node] = f"{inner}{label}:{self.branch_length[node]!r}"
        return text[0] + ";"


def _tokenize(text: str):
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in _SPECIAL:
            yield ch
            i += 1
        elif ch == "'":
            j, buf = i + 1, []
            while True:
                if j >= n:
                    raise DataValidationError("unterminated quoted label")
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            yield ("label", "".join(buf))
            i = j + 1
        else:
            j = i
            while j < n and text[j] not in _SPECIAL and not text[j].isspace():
                j += 1
            yield ("label", text[i:j])
            i = j


def parse_newick(text: str) -> PhyloTree:
    """Parse a single rooted Newick tree.

    Unlabelled internal nodes and ``[...]`` comments are accepted. Missing
    branch lengths become 0 and trigger one warning per tree.
    """
    if text is None or not text.strip():
        raise DataValidationError("empty Newick input")
    text = _COMMENT.sub("", text).strip()
    if not text.endswith(";"):
        raise DataValidationError("Newick tree must end with ';'")

    names: list[Optional[str]] = [None]
    parent: list[int] = [-1]
    length: list[Optional[float]] = [None]
    opened = [False]
    stack: list[int] = []
    current = 0
    tokens = _tokenize(text)

    def new_child(p):
        names.append(None)
        parent.append(p)
        length.append(None)
        opened.append(False)
        return len(names) - 1

    for tok in tokens:
        if tok == "(":
            if opened[current] or names[current] is not None or length[current] is not None:
                raise DataValidationError("unexpected '('")
            opened[current] = True
            stack.append(current)
            current = new_child(current)
        elif tok == ",":
            if not stack:
                raise DataValidationError("',' outside parentheses")
            current = new_child(stack[-1])
        elif tok == ")":
            if not stack:
                raise DataValidationError("unbalanced parentheses: extra ')'")
            current = stack.pop()
        elif tok == ":":
            value = next(tokens, None)
            if not isinstance(value, tuple):
                raise DataValidationError("missing branch length after ':'")
            if length[current] is not None:
                raise DataValidationError("node has two branch lengths")
            try:
                length[current] = float(value[1])
            except ValueError:
                raise DataValidationError(f"bad branch length {value[1]!r}") from None
        elif tok == ";":
            if stack:
                raise DataValidationError("unbalanced parentheses: missing ')'")
            if next(tokens, None) is not None:
                raise DataValidationError("content after ';'")
            break
        else:
            if names[current] is not None or length[current] is not None:
                raise DataValidationError(f"unexpected label {tok[1]!r}")
            names[current] = tok[1]

    missing = sum(1 for b in length[1:] if b is None)
    if missing:
        warnings.warn(f"{missing} branch length(s) missing in Newick input; set to 0",
                      stacklevel=2)
    lengths = [0.0 if b is None else b for b in length]
    return PhyloTree.from_parents(names, parent, lengths)
