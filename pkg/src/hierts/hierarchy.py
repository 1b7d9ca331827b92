"""Selection, aggregation, and coherency algebra for series hierarchies.

Level 0 is the raw series; selection matrix k maps level k-1 nodes to
level k super-nodes. Stacked collections order levels top-first (the
coarsest block first, the bottom block last); everything downstream,
reconciliation included, relies on that convention. Selection matrices
are stored with integer entries so aggregation identities hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndiff
from .ndiff import Tensor

# count of selection matrices constructed with at least one empty cluster;
# vacated clusters are legal mid-training, so this is a warning, not an error
EMPTY_CLUSTER_EVENTS = 0


class SelectionMatrix:
    """Binary node-to-supernode assignment for one aggregation level."""

    def __init__(self, matrix, level: int):
        m = np.asarray(matrix)
        if m.ndim != 2:
            raise ValueError(f"selection matrix must be 2-d, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("selection matrix entries must be 0 or 1")
        m = m.astype(np.int64)
        if not (m.sum(axis=1) == 1).all():
            raise ValueError("every node must map to exactly one super-node")
        if level < 1:
            raise ValueError(f"selection level must be >= 1, got {level}")
        self.matrix = m
        self.level = level
        self.empty_clusters = tuple(np.flatnonzero(m.sum(axis=0) == 0))
        if self.empty_clusters:
            global EMPTY_CLUSTER_EVENTS
            EMPTY_CLUSTER_EVENTS += 1

    @classmethod
    def from_assignments(cls, labels, n_clusters: int, level: int) -> "SelectionMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        m = np.zeros((labels.size, n_clusters), dtype=np.int64)
        m[np.arange(labels.size), labels] = 1
        return cls(m, level)

    @property
    def n_in(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_out(self) -> int:
        return self.matrix.shape[1]

    def assignments(self) -> np.ndarray:
        return self.matrix.argmax(axis=1)

    def __repr__(self):
        return f"SelectionMatrix(level={self.level}, {self.n_in}->{self.n_out})"


def _mat(S):
    return S.matrix if isinstance(S, SelectionMatrix) else S


def reduce(H, S):
    """Aggregate node rows into super-node rows: S^T H (summation)."""
    Sm = _mat(S)
    if isinstance(H, Tensor) or isinstance(Sm, Tensor):
        Ht = H if isinstance(H, Tensor) else Tensor(H)
        St = Sm if isinstance(Sm, Tensor) else Tensor(Sm)
        if Ht.shape[-2] != St.shape[0]:
            raise ValueError(f"reduce: {Ht.shape[-2]} rows vs selection for {St.shape[0]} nodes")
        return ndiff.matmul(ndiff.transpose(St), Ht)
    H = np.asarray(H)
    if H.shape[-2] != Sm.shape[0]:
        raise ValueError(f"reduce: {H.shape[-2]} rows vs selection for {Sm.shape[0]} nodes")
    return np.matmul(Sm.T.astype(H.dtype, copy=False), H)


def lift(H, S):
    """Broadcast super-node rows back to their member nodes: S H."""
    Sm = _mat(S)
    if isinstance(H, Tensor) or isinstance(Sm, Tensor):
        Ht = H if isinstance(H, Tensor) else Tensor(H)
        St = Sm if isinstance(Sm, Tensor) else Tensor(Sm)
        if St.shape[1] != Ht.shape[-2]:
            raise ValueError(f"lift: selection has {St.shape[1]} super-nodes, features {Ht.shape[-2]}")
        return ndiff.matmul(St, Ht)
    H = np.asarray(H)
    if Sm.shape[1] != H.shape[-2]:
        raise ValueError(f"lift: selection has {Sm.shape[1]} super-nodes, features {H.shape[-2]}")
    return np.matmul(Sm.astype(H.dtype, copy=False), H)


def connect(S, A: np.ndarray) -> np.ndarray:
    """Coarsen the topology by summing edge weights between clusters: S^T A S."""
    Sm = _mat(S)
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] != A.shape[1] or A.shape[0] != Sm.shape[0]:
        raise ValueError(f"connect: adjacency {A.shape} vs selection for {Sm.shape[0]} nodes")
    return Sm.T @ A @ Sm


def cumulative_selection(selections, level: int) -> np.ndarray:
    """Product S^(1) ... S^(level): bottom nodes to level-`level` clusters."""
    out = None
    for S in selections[:level]:
        m = _mat(S)
        out = m if out is None else out @ m
    if out is None:
        raise ValueError("no selections given")
    return out


class Hierarchy:
    """Validated selection stack plus derived per-level adjacencies."""

    def __init__(self, selections: list[SelectionMatrix], base_adjacency: np.ndarray):
        sizes = [selections[0].n_in] if selections else [np.asarray(base_adjacency).shape[0]]
        for k, S in enumerate(selections, start=1):
            if S.n_in != sizes[-1]:
                raise ValueError(f"selection {k} expects {S.n_in} nodes, previous level has {sizes[-1]}")
            sizes.append(S.n_out)
        self.selections = list(selections)
        self.level_sizes = sizes
        adjacencies = [np.asarray(base_adjacency, dtype=np.float64)]
        for S in selections:
            adjacencies.append(connect(S, adjacencies[-1]))
        self.adjacencies = adjacencies

    @property
    def depth(self) -> int:
        return len(self.selections)

    @property
    def n_bottom(self) -> int:
        return self.level_sizes[0]

    @property
    def total_series(self) -> int:
        return int(sum(self.level_sizes))

    def level_offsets(self) -> list[tuple[int, int]]:
        """Row range of each level in the top-first stacked collection."""
        offsets = []
        start = 0
        for size in reversed(self.level_sizes):
            offsets.append((start, start + size))
            start += size
        return list(reversed(offsets))  # index by level: offsets[0] is the bottom block


@dataclass
class LevelStack:
    """Stacked multi-level series, coarsest level first."""

    values: np.ndarray  # (M, T)
    level_sizes: list[int]  # bottom-first

    def __post_init__(self):
        if self.values.shape[0] != sum(self.level_sizes):
            raise ValueError(f"stack has {self.values.shape[0]} rows, sizes sum to {sum(self.level_sizes)}")

    def offsets(self) -> list[tuple[int, int]]:
        out = []
        start = 0
        for size in reversed(self.level_sizes):
            out.append((start, start + size))
            start += size
        return list(reversed(out))

    def level(self, k: int) -> np.ndarray:
        lo, hi = self.offsets()[k]
        return self.values[lo:hi]


def build_C(selections) -> np.ndarray:
    """Aggregation matrix mapping bottom series to every aggregate.

    Row blocks are stacked top-first: the product of all selections
    (transposed) first, down to the first selection last. Entries are 0/1
    because each level is a hard partition.
    """
    if not selections:
        raise ValueError("cannot build an aggregation matrix from an empty selection list")
    blocks = []
    for k in range(len(selections), 0, -1):
        blocks.append(cumulative_selection(selections, k).T)
    return np.vstack(blocks).astype(np.int64)


def build_Q(C: np.ndarray) -> np.ndarray:
    """Coherency constraints [I | -C]; Q Y = 0 iff the stack is coherent."""
    C = np.asarray(C)
    n_agg = C.shape[0]
    return np.hstack([np.eye(n_agg, dtype=np.int64), -C.astype(np.int64)])


def aggregate_series(X: np.ndarray, hierarchy: Hierarchy) -> LevelStack:
    """Stack [C X ; X]: all aggregates (top-first) over the bottom series."""
    X = np.asarray(X)
    if X.shape[0] != hierarchy.n_bottom:
        raise ValueError(f"series have {X.shape[0]} rows, hierarchy expects {hierarchy.n_bottom}")
    if hierarchy.depth == 0:
        return LevelStack(values=X.astype(np.float64, copy=True), level_sizes=[X.shape[0]])
    C = build_C(hierarchy.selections)
    stacked = np.vstack([C.astype(np.float64) @ X, X])
    return LevelStack(values=stacked, level_sizes=list(hierarchy.level_sizes))


def save_selections(path, selections) -> None:
    """One line per level, bottom-up, as `node:cluster` pairs."""
    lines = []
    for S in selections:
        pairs = " ".join(f"{i}:{c}" for i, c in enumerate(_mat(S).argmax(axis=1)))
        lines.append(pairs)
    Path(path).write_text("\n".join(lines) + "\n")


def load_selections(path) -> list[SelectionMatrix]:
    selections = []
    for level, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        pairs = [item.split(":") for item in line.split()]
        labels = np.full(len(pairs), -1, dtype=np.int64)
        for node, cluster in pairs:
            labels[int(node)] = int(cluster)
        if (labels < 0).any():
            raise ValueError(f"level {level}: missing node assignments")
        selections.append(SelectionMatrix.from_assignments(labels, int(labels.max()) + 1, level))
    return selections
