"""Learnable hard clustering of the series into a hierarchy.

Cluster scores are kept as one learnable table per level. Sampling draws
hard one-hot assignments whose categorical law is softmax(scores/tau)
(tempered Gumbel argmax), with gradients routed through the tempered
softmax via the straight-through trick. A graph-aware regularizer,
normalized-cut ratio plus a balance/orthogonality penalty, keeps the
assignments aligned with the topology.

Levels whose target size is one (the total aggregate) are fixed all-ones
and never learned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ndiff
from .graphcore import normalize_sym
from .hierarchy import Hierarchy, SelectionMatrix
from .ndiff import Tensor


@dataclass
class AnnealSchedule:
    """Exponential temperature decay with a floor."""

    tau0: float = 1.0
    rate: float = 0.999
    floor: float = 0.05


@dataclass
class SampledSelection:
    """Hard assignment for the forward pass plus its soft gradient path."""

    hard: Tensor  # exactly one-hot rows; gradients flow through `soft`
    soft: Tensor  # tempered softmax of the (noised) scores
    assignments: np.ndarray  # argmax cluster index per node


class SelectorState:
    """Score tables, current temperature, and annealing schedule."""

    def __init__(self, level_sizes, rng, anneal: AnnealSchedule | None = None,
                 init_scale: float = 0.01):
        if len(level_sizes) < 1:
            raise ValueError("need at least the bottom level size")
        self.level_sizes = [int(n) for n in level_sizes]
        self.anneal = anneal if anneal is not None else AnnealSchedule()
        self.tau = self.anneal.tau0
        self.phi: list[Tensor | None] = []
        for k in range(1, len(self.level_sizes)):
            n_in, n_out = self.level_sizes[k - 1], self.level_sizes[k]
            if n_out == 1:
                self.phi.append(None)  # fixed total aggregate
            else:
                self.phi.append(Tensor(rng.normal(0.0, init_scale, size=(n_in, n_out)),
                                       requires_grad=True, name=f"selector.phi{k}"))

    @property
    def depth(self) -> int:
        return len(self.level_sizes) - 1

    def parameters(self) -> list[Tensor]:
        return [p for p in self.phi if p is not None]

    def learnable_levels(self) -> list[int]:
        return [k for k, p in enumerate(self.phi, start=1) if p is not None]


def _straight_through(soft: Tensor, hard_values: np.ndarray) -> Tensor:
    def bwd(out):
        soft.accumulate_grad(out.grad)

    return ndiff.from_op(hard_values, (soft,), bwd, "straight_through")


def sample_selection(phi: Tensor, tau: float, rng: np.random.Generator | None = None,
                     deterministic: bool = False) -> SampledSelection:
    """Draw a hard assignment; law is softmax(phi/tau) per row.

    Per row, Gumbel(0,1) noise is added to the tempered scores phi/tau and
    the argmax picked (ties break to the first index). The forward value
    is exactly one-hot; the backward route is the tempered softmax of the
    same noised scores. With `deterministic` no noise is drawn and the
    argmax of the scores is used, independent of any seed.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = phi * (1.0 / tau)
    if not deterministic:
        if rng is None:
            raise ValueError("stochastic sampling needs an explicit rng")
        u = rng.uniform(size=phi.shape)
        noise = -np.log(-np.log(u + 1e-20) + 1e-20)
        scores = scores + Tensor(noise)
    soft = ndiff.softmax(scores)
    idx = scores.data.argmax(axis=1)
    hard_values = np.zeros(phi.shape)
    hard_values[np.arange(phi.shape[0]), idx] = 1.0
    return SampledSelection(hard=_straight_through(soft, hard_values),
                            soft=soft, assignments=idx)


def fixed_total_selection(n_in: int) -> SampledSelection:
    """Constant all-ones column mapping every node to one super-node."""
    ones = np.ones((n_in, 1))
    t = Tensor(ones)
    return SampledSelection(hard=t, soft=t, assignments=np.zeros(n_in, dtype=np.int64))


def sample_hierarchy(state: SelectorState, rng: np.random.Generator | None = None,
                     deterministic: bool = False) -> list[SampledSelection]:
    """One sampled (or argmax) selection per level, bottom-up."""
    out = []
    for k, phi in enumerate(state.phi, start=1):
        if phi is None:
            out.append(fixed_total_selection(state.level_sizes[k - 1]))
        else:
            out.append(sample_selection(phi, state.tau, rng, deterministic))
    return out


def hard_selection_matrices(sampled: list[SampledSelection]) -> list[SelectionMatrix]:
    return [SelectionMatrix.from_assignments(s.assignments, s.hard.shape[1], level=k)
            for k, s in enumerate(sampled, start=1)]


def build_hierarchy(sampled: list[SampledSelection], base_adjacency: np.ndarray) -> Hierarchy:
    return Hierarchy(hard_selection_matrices(sampled), base_adjacency)


def anneal_tau(state: SelectorState, step: int) -> float:
    """tau(step) = max(floor, tau0 * rate^step); updates and returns it."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    sched = state.anneal
    state.tau = max(sched.floor, sched.tau0 * sched.rate ** step)
    return state.tau


def mincut_loss(S_soft: Tensor, A_prev: np.ndarray) -> Tensor:
    """Normalized-cut relaxation plus an orthogonality/balance penalty.

    -Tr(S^T A~ S)/Tr(S^T D~ S) + || S^T S / ||S^T S||_F - I/sqrt(n_clusters) ||_F
    with A~ the symmetrically normalized adjacency and D~ its degree
    matrix. The cut term is 0 (with a warning) for an edgeless graph.
    """
    A = np.asarray(A_prev, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if (A < 0).any():
        raise ValueError("adjacency weights must be nonnegative")
    if S_soft.shape[0] != A.shape[0]:
        raise ValueError(f"assignment rows {S_soft.shape[0]} vs adjacency {A.shape[0]}")
    n_clusters = S_soft.shape[1]
    a_norm = normalize_sym(A)
    deg = a_norm.sum(axis=1)
    if deg.sum() <= 0:
        warnings.warn("graph has no edges; cut term set to 0")
        cut = Tensor(0.0)
    else:
        # Tr(S^T M S) = sum(S * (M S)) keeps everything in registered primitives
        num = (S_soft * ndiff.matmul(Tensor(a_norm), S_soft)).sum()
        den = (S_soft * S_soft * Tensor(deg[:, None])).sum()
        cut = -(num / den)
    sts = ndiff.matmul(ndiff.transpose(S_soft), S_soft)
    target = Tensor(np.eye(n_clusters) / np.sqrt(n_clusters))
    ortho = ndiff.fro_norm(sts / ndiff.fro_norm(sts) - target)
    return cut + ortho


def selector_loss(state: SelectorState, hierarchy: Hierarchy, weight: float) -> Tensor:
    """Weighted sum of per-level cut losses over the learnable levels.

    Fixed levels (the single total aggregate) are excluded. Soft
    assignments are the plain softmax of the score tables, without
    temperature or noise.
    """
    if weight == 0:
        return Tensor(0.0)
    total = None
    for k in state.learnable_levels():
        s_mu = ndiff.softmax(state.phi[k - 1])
        term = mincut_loss(s_mu, hierarchy.adjacencies[k - 1])
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * weight


def export_assignments(state: SelectorState) -> list[SelectionMatrix]:
    """Argmax cluster assignment per learnable level, fixed levels included."""
    out = []
    for k, phi in enumerate(state.phi, start=1):
        if phi is None:
            out.append(SelectionMatrix(np.ones((state.level_sizes[k - 1], 1), dtype=np.int64), k))
        else:
            out.append(SelectionMatrix.from_assignments(phi.data.argmax(axis=1),
                                                        state.level_sizes[k], k))
    return out
