"""Projection of stacked forecasts onto the coherent subspace.

The projector is built once per hierarchy from the constraint matrix and
treated as a constant: hard assignments make it piecewise constant, so no
gradient flows through its construction. For collections too large for
the dense solve, a cheap residual-norm penalty replaces the projection in
the training loss (`mode="residual_penalty"`).

Cost of the build: O(M^2) space for the dense projector and O(M^3) time
for the factorization of Q Q^T (M is the stacked series count).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import ndiff
from .ndiff import Tensor

# above this stacked size the auto loss mode drops the dense projection
PROJECTION_SIZE_LIMIT = 2000


@dataclass
class Projector:
    """Symmetric idempotent map onto the null space of Q."""

    P: np.ndarray
    Q: np.ndarray


@dataclass
class LossWeights:
    """Composite-loss configuration."""

    lam: float = 0.25
    p: int = 1
    mincut_weight: float = 1.0
    mode: str = "auto"  # auto | projection | residual_penalty

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"coherency weight must be >= 0, got {self.lam}")
        if self.p not in (1, 2):
            raise ValueError(f"norm order must be 1 or 2, got {self.p}")
        if self.mode not in ("auto", "projection", "residual_penalty"):
            raise ValueError(f"unknown loss mode {self.mode!r}")

    def resolve_mode(self, total_series: int) -> str:
        if self.mode != "auto":
            return self.mode
        return "projection" if total_series <= PROJECTION_SIZE_LIMIT else "residual_penalty"


def build_projector(Q: np.ndarray) -> Projector:
    """P = I - Q^T (Q Q^T)^{-1} Q via a Cholesky solve (jittered on failure)."""
    Q = np.asarray(Q, dtype=np.float64)
    m_total = Q.shape[1]
    if Q.shape[0] == 0:
        return Projector(P=np.eye(m_total), Q=Q.reshape(0, m_total))
    gram = Q @ Q.T
    suspicious = False
    try:
        factor = cho_factor(gram)
    except LinAlgError:
        factor = cho_factor(gram + 1e-10 * np.eye(gram.shape[0]))
        suspicious = True
    pivots = np.abs(np.diag(factor[0]))
    if pivots.min() < 1e-7 * pivots.max():
        suspicious = True
    if suspicious and np.linalg.matrix_rank(Q) < Q.shape[0]:
        # [I | -C] constraints are always full rank; this is malformed input
        raise LinAlgError("constraint matrix is rank deficient; dependent rows: "
                          f"{_deficient_rows(Q)}")
    P = np.eye(m_total) - Q.T @ cho_solve(factor, Q)
    P = 0.5 * (P + P.T)  # exact symmetry; the solve only guarantees it numerically
    return Projector(P=P, Q=Q)


def _deficient_rows(Q: np.ndarray) -> list[int]:
    rank = 0
    bad = []
    basis = np.zeros((0, Q.shape[1]))
    for i, row in enumerate(Q):
        cand = np.vstack([basis, row])
        if np.linalg.matrix_rank(cand) > rank:
            basis = cand
            rank += 1
        else:
            bad.append(i)
    return bad


def reconcile(Y_hat, projector: Projector):
    """Project stacked forecasts columnwise onto the coherent subspace."""
    P = projector.P
    if isinstance(Y_hat, Tensor):
        if Y_hat.shape[-2] != P.shape[0]:
            raise ValueError(f"forecast stack has {Y_hat.shape[-2]} rows, projector expects {P.shape[0]}")
        return ndiff.matmul(Tensor(P), Y_hat)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y_hat.shape[-2] != P.shape[0]:
        raise ValueError(f"forecast stack has {Y_hat.shape[-2]} rows, projector expects {P.shape[0]}")
    return P @ Y_hat


def coherency_residual(Q: np.ndarray, Y):
    """Euclidean norm of Q Y over all entries (before any weighting)."""
    Q = np.asarray(Q, dtype=np.float64)
    if isinstance(Y, Tensor):
        if Q.shape[0] == 0:
            return Tensor(0.0)
        return ndiff.l2_norm(ndiff.matmul(Tensor(Q), Y))
    Y = np.asarray(Y, dtype=np.float64)
    if Q.shape[0] == 0:
        return 0.0
    return float(np.sqrt(np.sum((Q @ Y) ** 2)))


def prediction_error(pred: Tensor, target: Tensor, p: int, mask: np.ndarray | None = None) -> Tensor:
    """Mean |pred - target|^p over every stacked entry.

    With a boolean mask, masked-out entries are dropped from both the sum
    and the denominator.
    """
    diff = pred - target
    err = ndiff.absval(diff) if p == 1 else ndiff.square(diff) if p == 2 else None
    if err is None:
        raise ValueError(f"norm order must be 1 or 2, got {p}")
    if mask is None:
        return err.mean()
    count = float(mask.sum())
    if count == 0:
        raise ValueError("every entry is masked out")
    return (err * Tensor(mask.astype(np.float64))).sum() * (1.0 / count)


def composite_loss(bundle, weights: LossWeights) -> Tensor:
    """Training loss over a forecast bundle.

    Projection mode: err(raw, target) + err(reconciled, target)
                     + lam * err(reconciled, raw).
    Residual mode:   err(raw, target) + lam * ||Q raw||_2.
    The coherency-distance term is never masked; it compares predictions
    with predictions.
    """
    mode = weights.resolve_mode(bundle.raw.shape[-2])
    mask = bundle.mask
    base = prediction_error(bundle.raw, bundle.targets, weights.p, mask)
    if mode == "projection":
        if bundle.reconciled is None:
            raise ValueError("projection mode needs reconciled forecasts in the bundle")
        return (base + prediction_error(bundle.reconciled, bundle.targets, weights.p, mask)
                + prediction_error(bundle.reconciled, bundle.raw, weights.p) * weights.lam)
    if bundle.constraints is None:
        raise ValueError("residual mode needs the constraint matrix in the bundle")
    return base + coherency_residual(bundle.constraints, bundle.raw) * weights.lam
