"""Training loop, evaluation, and checkpoint serialization.

One training step: sample hard selections, rebuild the hierarchy and its
derived pieces (adjacencies, scaler, projector; cached per assignment),
forecast a batch, take the composite loss plus the weighted cut
regularizer, backpropagate, and apply Adam. The temperature anneals every
step; the learning rate decays on an epoch schedule. Validation each
epoch uses argmax selections and drives early stopping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import ndiff
from .data import DatasetBundle, WindowSet, chrono_split
from .forecaster import ForecastBundle, HierForecaster, LevelScaler, ModelConfig, forecast_loss
from .hierarchy import Hierarchy, build_C, build_Q
from .metrics import MetricsReport, ari, stack_metrics
from .ndiff import AdamState, adam_step, zero_grad
from .reconciler import LossWeights, build_projector, composite_loss, reconcile
from .selector import (AnnealSchedule, SelectorState, anneal_tau, build_hierarchy,
                       sample_hierarchy, selector_loss)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    batches_per_epoch: int = 300
    lr: float = 0.003
    lr_decay_factor: float = 0.25
    lr_decay_every: int = 50
    patience: int = 20
    seed: int = 0
    split: tuple = (0.7, 0.1, 0.2)
    standardize: bool = True
    mae_steps: tuple = ()

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if min(self.batch_size, self.max_epochs, self.batches_per_epoch) < 1:
            raise ValueError("batch_size, max_epochs, batches_per_epoch must all be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Stepwise decay: the rate drops by the factor after every block of epochs."""
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    lr: float
    tau: float

    def to_dict(self):
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_mae": self.val_mae, "lr": self.lr, "tau": self.tau}


@dataclass
class TrainedModel:
    forecaster: HierForecaster
    selector: SelectorState
    loss_weights: LossWeights
    level_sizes: list[int]


@dataclass
class TrainResult:
    trained: TrainedModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float
    diverged: bool
    adam: AdamState
    train_config: TrainConfig


class _HierarchyCache:
    """Derived objects per hard assignment: hierarchy, scaler, projector."""

    def __init__(self, dataset: DatasetBundle, train_span, standardize: bool, limit: int = 128):
        self.dataset = dataset
        self.train_values = dataset.values[train_span[0]:train_span[1]]
        self.train_covs = (dataset.covariates[train_span[0]:train_span[1]]
                           if dataset.covariates is not None else None)
        self.standardize = standardize
        self.limit = limit
        self._cache: dict = {}

    def lookup(self, sampled):
        key = tuple(tuple(s.assignments) for s in sampled)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        hierarchy = build_hierarchy(sampled, self.dataset.graph.to_dense())
        if self.standardize:
            scaler = LevelScaler.fit(self.train_values, self.train_covs, hierarchy.selections)
        else:
            scaler = LevelScaler.identity(hierarchy.level_sizes, self.dataset.n_covariates)
        if hierarchy.depth > 0:
            Q = build_Q(build_C(hierarchy.selections)).astype(np.float64)
            projector = build_projector(Q)
        else:
            Q = np.zeros((0, hierarchy.n_bottom))
            projector = build_projector(Q)
        entry = (hierarchy, scaler, Q, projector)
        if len(self._cache) >= self.limit:
            self._cache.clear()
        self._cache[key] = entry
        return entry


def _stack_mask(mask_y: np.ndarray, hierarchy: Hierarchy) -> np.ndarray | None:
    """Aggregate validity: an aggregate entry is valid iff all children are."""
    if mask_y.all():
        return None
    levels = [mask_y.astype(np.float64)]
    for S in hierarchy.selections:
        Sm = S.matrix.astype(np.float64)
        counts = Sm.sum(axis=0)
        agg = np.einsum("nm,bnh->bmh", Sm, levels[-1])
        levels.append((agg == counts[None, :, None]).astype(np.float64))
    return np.concatenate(list(reversed(levels)), axis=1).astype(bool)


def _forward_bundle(model: HierForecaster, sampled, entry, x, u, y, mask_y,
                    weights: LossWeights) -> ForecastBundle:
    hierarchy, scaler, Q, projector = entry
    raw = model.forward(x, u, sampled, hierarchy.adjacencies, scaler)
    targets = model.stack_targets(y, sampled)
    bundle = ForecastBundle(raw=raw, targets=targets,
                            level_sizes=list(hierarchy.level_sizes),
                            constraints=Q, mask=_stack_mask(mask_y, hierarchy))
    if hierarchy.depth > 0 and weights.resolve_mode(hierarchy.total_series) == "projection":
        bundle.reconciled = reconcile(raw, projector)
    return bundle


def _snapshot(model: HierForecaster, selector: SelectorState):
    params = {p.name: p.data.copy() for p in model.parameters()}
    phi = [None if p is None else p.data.copy() for p in selector.phi]
    return params, phi, selector.tau


def _restore(model: HierForecaster, selector: SelectorState, snap) -> None:
    params, phi, tau = snap
    for p in model.parameters():
        p.data[...] = params[p.name]
    for p, saved in zip(selector.phi, phi):
        if p is not None:
            p.data[...] = saved
    selector.tau = tau


def train(dataset: DatasetBundle, model_config: ModelConfig, train_config: TrainConfig,
          loss_weights: LossWeights, level_sizes: list[int],
          anneal: AnnealSchedule | None = None) -> TrainResult:
    """Fit the model end to end; returns the best-validation state.

    `level_sizes` is the hierarchy specification, bottom size first
    (e.g. [n_nodes, 20, 1]); a single entry trains the flat model.
    BLAS is pinned to one thread for the duration: the step tensors are
    far too small for multithreaded kernels to pay off.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        return _train_inner(dataset, model_config, train_config, loss_weights,
                            level_sizes, anneal)


def _train_inner(dataset: DatasetBundle, model_config: ModelConfig, train_config: TrainConfig,
                 loss_weights: LossWeights, level_sizes: list[int],
                 anneal: AnnealSchedule | None = None) -> TrainResult:
    if level_sizes[0] != dataset.n_nodes:
        raise ValueError(f"hierarchy bottom size {level_sizes[0]} != dataset nodes {dataset.n_nodes}")
    if model_config.levels != len(level_sizes) - 1:
        raise ValueError("model levels and hierarchy specification disagree")
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    spans = chrono_split(dataset.n_steps, cfg.split, model_config.window, model_config.horizon)
    train_windows = WindowSet(dataset, model_config.window, model_config.horizon, spans[0])
    val_windows = WindowSet(dataset, model_config.window, model_config.horizon, spans[1])
    train_idx = train_windows.valid_indices()

    selector = SelectorState(level_sizes, rng, anneal)
    model = HierForecaster(model_config, dataset.n_nodes, dataset.n_covariates, rng)
    trained = TrainedModel(model, selector, loss_weights, list(level_sizes))
    params = model.parameters() + selector.parameters()
    adam = AdamState(lr=cfg.lr)
    cache = _HierarchyCache(dataset, spans[0], cfg.standardize)

    history: list[EpochRecord] = []
    best = _snapshot(model, selector)
    best_val = math.inf
    best_epoch = 0
    stale = 0
    diverged = False
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        adam.lr = cfg.lr_at(epoch)
        epoch_losses = []
        try:
            for _ in range(cfg.batches_per_epoch):
                tau = anneal_tau(selector, step)
                step += 1
                sampled = sample_hierarchy(selector, rng)
                entry = cache.lookup(sampled)
                take = min(cfg.batch_size, train_idx.size)
                idx = rng.choice(train_idx, size=take, replace=train_idx.size < cfg.batch_size)
                x, u, y, mask_y = train_windows.batch(idx)
                bundle = _forward_bundle(model, sampled, entry, x, u, y, mask_y, loss_weights)
                hierarchy = entry[0]
                if hierarchy.depth > 0:
                    loss = composite_loss(bundle, loss_weights)
                    loss = loss + selector_loss(selector, hierarchy, loss_weights.mincut_weight)
                else:
                    loss = forecast_loss(bundle, loss_weights.p)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"loss is {value}")
                ndiff.backward(loss)
                adam_step(params, None, adam)
                zero_grad(params)
                epoch_losses.append(value)
        except FloatingPointError:
            diverged = True
            _restore(model, selector, best)
            break

        val_mae = _validation_mae(trained, dataset, cache, val_windows)
        history.append(EpochRecord(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                                   val_mae=val_mae, lr=adam.lr, tau=tau))
        if val_mae < best_val - 1e-12:
            best_val = val_mae
            best_epoch = epoch
            best = _snapshot(model, selector)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    _restore(model, selector, best)
    return TrainResult(trained=trained, history=history, best_epoch=best_epoch,
                       best_val_mae=best_val, diverged=diverged, adam=adam,
                       train_config=cfg)


def _predict_stacks(trained: TrainedModel, cache: _HierarchyCache, windows: WindowSet,
                    batch_size: int = 256):
    """Deterministic raw and reconciled stacks over a whole window set."""
    with threadpool_limits(limits=1, user_api="blas"):
        return _predict_stacks_inner(trained, cache, windows, batch_size)


def _predict_stacks_inner(trained, cache, windows, batch_size):
    sampled = sample_hierarchy(trained.selector, deterministic=True)
    entry = cache.lookup(sampled)
    hierarchy, scaler, Q, projector = entry
    idx = windows.valid_indices()
    raws, targets, masks = [], [], []
    with ndiff.no_grad():
        for lo in range(0, idx.size, batch_size):
            part = idx[lo:lo + batch_size]
            x, u, y, mask_y = windows.batch(part)
            raw = trained.forecaster.forward(x, u, sampled, hierarchy.adjacencies, scaler)
            raws.append(raw.data)
            targets.append(trained.forecaster.stack_targets(y, sampled).data)
            masks.append(mask_y)
    raw = np.concatenate(raws) if raws else np.zeros((0, hierarchy.total_series, windows.horizon))
    target = np.concatenate(targets) if targets else raw
    mask_y = np.concatenate(masks) if masks else np.zeros((0,) + raw.shape[1:], dtype=bool)
    mode = trained.loss_weights.resolve_mode(hierarchy.total_series)
    reconciled = reconcile(raw, projector) if (hierarchy.depth > 0 and mode == "projection") else raw
    return raw, reconciled, target, mask_y, entry


def _validation_mae(trained, dataset, cache, windows) -> float:
    _, reconciled, target, mask_y, entry = _predict_stacks(trained, cache, windows)
    n_bottom = entry[0].n_bottom
    err = np.abs(reconciled[:, -n_bottom:, :] - target[:, -n_bottom:, :])
    total = mask_y.sum()
    return float((err * mask_y).sum() / total) if total else math.inf


def evaluate(trained: TrainedModel, dataset: DatasetBundle, split: str = "test",
             train_config: TrainConfig | None = None, mae_steps=()) -> MetricsReport:
    """Metrics on one chronological split with argmax selections.

    The headline MAE/MRE cover the bottom level of the reconciled output
    (raw output when reconciliation is off). Standardization statistics
    always come from the train split of `dataset`.
    """
    cfg = train_config if train_config is not None else TrainConfig()
    model_cfg = trained.forecaster.config
    spans = chrono_split(dataset.n_steps, cfg.split, model_cfg.window, model_cfg.horizon)
    names = {"train": 0, "val": 1, "test": 2}
    if split not in names:
        raise ValueError(f"split must be one of {sorted(names)}, got {split!r}")
    if dataset.n_nodes != trained.forecaster.n_nodes:
        raise ValueError(f"dataset has {dataset.n_nodes} nodes, model expects {trained.forecaster.n_nodes}")
    windows = WindowSet(dataset, model_cfg.window, model_cfg.horizon, spans[names[split]])
    cache = _HierarchyCache(dataset, spans[0], cfg.standardize)
    _, reconciled, target, mask_y, entry = _predict_stacks(trained, cache, windows)
    hierarchy, _, Q, _ = entry
    ari_value = None
    if dataset.true_clusters is not None and trained.selector.learnable_levels():
        first = trained.selector.learnable_levels()[0]
        ari_value = ari(trained.selector.phi[first - 1].data.argmax(axis=1), dataset.true_clusters)
    steps = tuple(mae_steps) if mae_steps else tuple(cfg.mae_steps)
    return stack_metrics(reconciled, target, mask_y, list(hierarchy.level_sizes),
                         mae_steps=steps, Q=Q, ari_value=ari_value)


def save_checkpoint(path, result: TrainResult, model_config: ModelConfig) -> None:
    """Single-file container: versioned meta plus all arrays."""
    trained = result.trained
    arrays = {}
    for p in trained.forecaster.parameters():
        arrays[f"param/{p.name}"] = p.data
    for k, phi in enumerate(trained.selector.phi, start=1):
        if phi is not None:
            arrays[f"phi/{k}"] = phi.data
    name_by_id = {p.node_id: p.name for p in trained.forecaster.parameters()}
    for p in trained.selector.parameters():
        name_by_id[p.node_id] = p.name
    for node_id, m in result.adam.first_moment.items():
        if node_id in name_by_id:
            arrays[f"adam_m/{name_by_id[node_id]}"] = m
    for node_id, v in result.adam.second_moment.items():
        if node_id in name_by_id:
            arrays[f"adam_v/{name_by_id[node_id]}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": vars(model_config).copy(),
        "level_sizes": trained.level_sizes,
        "loss_weights": vars(trained.loss_weights).copy(),
        "anneal": vars(trained.selector.anneal).copy(),
        "tau": trained.selector.tau,
        "n_covariates": trained.forecaster.n_covariates,
        "adam": {"lr": result.adam.lr, "beta1": result.adam.beta1,
                 "beta2": result.adam.beta2, "eps": result.adam.eps,
                 "step_count": result.adam.step_count},
        "train_config": {**vars(result.train_config),
                         "split": list(result.train_config.split),
                         "mae_steps": list(result.train_config.mae_steps)},
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
        "diverged": result.diverged,
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> TrainResult:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k: blob[k] for k in blob.files if k != "__meta__"}
    model_config = ModelConfig(**meta["model_config"])
    level_sizes = [int(n) for n in meta["level_sizes"]]
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    model = HierForecaster(model_config, level_sizes[0], int(meta["n_covariates"]), rng)
    for p in model.parameters():
        key = f"param/{p.name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing parameter {p.name}")
        p.data[...] = arrays[key]
    anneal = AnnealSchedule(**meta["anneal"])
    selector = SelectorState(level_sizes, rng, anneal)
    selector.tau = float(meta["tau"])
    for k, phi in enumerate(selector.phi, start=1):
        if phi is not None:
            phi.data[...] = arrays[f"phi/{k}"]
    lw = LossWeights(**meta["loss_weights"])
    adam_meta = meta["adam"]
    adam = AdamState(lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                     beta2=adam_meta["beta2"], eps=adam_meta["eps"],
                     step_count=adam_meta["step_count"])
    by_name = {p.name: p for p in model.parameters() + selector.parameters()}
    for key, arr in arrays.items():
        if key.startswith("adam_m/"):
            adam.first_moment[by_name[key[7:]].node_id] = arr.copy()
        elif key.startswith("adam_v/"):
            adam.second_moment[by_name[key[7:]].node_id] = arr.copy()
    tc_meta = meta["train_config"]
    tc_meta["split"] = tuple(tc_meta["split"])
    tc_meta["mae_steps"] = tuple(tc_meta["mae_steps"])
    train_config = TrainConfig(**tc_meta)
    trained = TrainedModel(model, selector, lw, level_sizes)
    return TrainResult(trained=trained, history=[], best_epoch=int(meta["best_epoch"]),
                       best_val_mae=float(meta["best_val_mae"]),
                       diverged=bool(meta["diverged"]), adam=adam,
                       train_config=train_config)
