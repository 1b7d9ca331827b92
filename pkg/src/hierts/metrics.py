"""Forecast quality metrics, cluster agreement, and the persistence floor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle, WindowSet


@dataclass
class MetricsReport:
    mae: float
    mre: float
    mae_at: dict[int, float] = field(default_factory=dict)
    per_level_mae: list[float] = field(default_factory=list)
    coherency_residual: float = 0.0
    ari: float | None = None
    n_samples: int = 0

    def __post_init__(self):
        if self.mae < 0 or self.mre < 0:
            raise ValueError("mae and mre are nonnegative by construction")

    def to_dict(self) -> dict:
        out = {
            "mae": self.mae,
            "mre": self.mre,
            "mae_at": {str(k): v for k, v in self.mae_at.items()},
            "per_level_mae": list(self.per_level_mae),
            "coherency_residual": self.coherency_residual,
            "n_samples": self.n_samples,
        }
        if self.ari is not None:
            out["ari"] = self.ari
        return out


def masked_mae(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = np.abs(pred - target)
    if mask is None:
        return float(err.mean())
    total = mask.sum()
    if total == 0:
        raise ValueError("all entries masked")
    return float((err * mask).sum() / total)


def mean_relative_error(pred: np.ndarray, target: np.ndarray,
                        mask: np.ndarray | None = None) -> float:
    """100 * sum|err| / sum|target| over the (masked) entries."""
    if mask is None:
        mask = np.ones_like(target, dtype=bool)
    denom = np.abs(target[mask]).sum()
    if denom == 0:
        return 0.0
    return float(100.0 * np.abs((pred - target)[mask]).sum() / denom)


def stack_metrics(pred_stack: np.ndarray, target_stack: np.ndarray,
                  bottom_mask: np.ndarray, level_sizes: list[int],
                  mae_steps=(), Q: np.ndarray | None = None,
                  ari_value: float | None = None) -> MetricsReport:
    """Report over stacked forecasts (B, M, H).

    The headline MAE/MRE cover the bottom level; `mae_steps` are 1-based
    forecast steps (step 1 is the first predicted instant).
    """
    n_bottom = level_sizes[0]
    bot_pred = pred_stack[:, -n_bottom:, :]
    bot_target = target_stack[:, -n_bottom:, :]
    mae = masked_mae(bot_pred, bot_target, bottom_mask)
    mre = mean_relative_error(bot_pred, bot_target, bottom_mask)
    mae_at = {}
    for h in mae_steps:
        if not 1 <= h <= pred_stack.shape[2]:
            raise ValueError(f"horizon step {h} outside 1..{pred_stack.shape[2]}")
        mae_at[int(h)] = masked_mae(bot_pred[:, :, h - 1], bot_target[:, :, h - 1],
                                    bottom_mask[:, :, h - 1])
    per_level = []
    start = 0
    for size in reversed(level_sizes):  # stack is top-first
        seg = slice(start, start + size)
        per_level.append(masked_mae(pred_stack[:, seg, :], target_stack[:, seg, :]))
        start += size
    per_level = list(reversed(per_level))  # index by level, bottom first
    resid = 0.0
    if Q is not None and Q.shape[0] > 0:
        resid = float(np.abs(np.einsum("qm,bmh->bqh", Q.astype(np.float64), pred_stack)).max())
    return MetricsReport(mae=mae, mre=mre, mae_at=mae_at, per_level_mae=per_level,
                         coherency_residual=resid, ari=ari_value,
                         n_samples=pred_stack.shape[0])


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def ari(predicted, true) -> float:
    """Adjusted Rand index between two labelings of the same nodes.

    1 for identical partitions up to relabeling, about 0 for independent
    ones. Degenerate pairs with no possible disagreement score 1.
    """
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ValueError(f"label arrays differ in length: {predicted.shape} vs {true.shape}")
    n = predicted.size
    _, p_idx = np.unique(predicted, return_inverse=True)
    _, t_idx = np.unique(true, return_inverse=True)
    contingency = np.zeros((p_idx.max() + 1, t_idx.max() + 1))
    np.add.at(contingency, (p_idx, t_idx), 1)
    sum_cells = _comb2(contingency).sum()
    sum_rows = _comb2(contingency.sum(axis=1)).sum()
    sum_cols = _comb2(contingency.sum(axis=0)).sum()
    total = _comb2(np.array(float(n)))
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def persistence_baseline(dataset: DatasetBundle, span: tuple[int, int],
                         window: int, horizon: int, mae_steps=()) -> MetricsReport:
    """Repeat the last observed value across the horizon; bottom level only."""
    windows = WindowSet(dataset, window, horizon, span)
    x, _, y, mask_y = windows.batch(np.arange(len(windows)))
    pred = np.repeat(x[:, :, -1:], horizon, axis=2)
    mae = masked_mae(pred, y, mask_y)
    mre = mean_relative_error(pred, y, mask_y)
    mae_at = {int(h): masked_mae(pred[:, :, h - 1], y[:, :, h - 1], mask_y[:, :, h - 1])
              for h in mae_steps}
    return MetricsReport(mae=mae, mre=mre, mae_at=mae_at,
                         per_level_mae=[mae], n_samples=x.shape[0])
