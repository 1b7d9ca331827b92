"""Hierarchical time-then-space forecasting model.

Each level of the hierarchy runs a GRU over its (aggregated) input
windows with a learnable node embedding appended to every step, then a
stack of propagation rounds mixes information within levels (message
passing on each level's graph) and across levels (sum-reduce from the
finer level, broadcast-lift from the coarser one, merged by a small MLP).
A per-level readout maps final features to the forecast horizon.

Level inputs, targets, and embeddings are all derived from the bottom
series through the sampled hard selections, so assignment scores receive
gradients from the forecasting objective via the straight-through path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, ndiff
from .graphcore import _glorot, _zeros, init_mp_params, message_pass
from .hierarchy import cumulative_selection, lift, reduce
from .ndiff import Tensor
from .selector import SampledSelection


@dataclass
class ModelConfig:
    window: int
    horizon: int
    levels: int  # aggregation rounds above the bottom level
    hidden_size: int = 32
    embed_size: int = 16
    mp_layers: int = 2
    scheme: str = "gconv"
    diffusion_order: int = 2
    share_encoders: bool = False
    intra_level_base_only: bool = True
    mu_residual: bool = False
    decoder_hidden_layers: int = 1

    def __post_init__(self):
        if min(self.window, self.horizon, self.hidden_size, self.embed_size) < 1:
            raise ValueError("window, horizon, hidden_size, embed_size must all be >= 1")
        if self.mp_layers < 1:
            raise ValueError("need at least one propagation layer")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")


@dataclass
class GRUParams:
    wx: Tensor  # (d_in, 3*d_h), gate order [update | reset | candidate]
    wh_zr: Tensor  # (d_h, 2*d_h)
    wh_n: Tensor  # (d_h, d_h)
    bias: Tensor  # (3*d_h,)

    @classmethod
    def init(cls, d_in: int, d_h: int, rng, prefix: str):
        return cls(_glorot(rng, d_in, 3 * d_h, f"{prefix}.wx"),
                   _glorot(rng, d_h, 2 * d_h, f"{prefix}.wh_zr"),
                   _glorot(rng, d_h, d_h, f"{prefix}.wh_n"),
                   _zeros(3 * d_h, f"{prefix}.bias"))

    def tensors(self):
        return [self.wx, self.wh_zr, self.wh_n, self.bias]


@dataclass
class MLPParams:
    """Dense hidden blocks (each followed by ELU) and a linear output."""

    hidden: list[tuple[Tensor, Tensor]]
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, n_hidden: int, rng, prefix: str):
        hidden = []
        width = d_in
        for i in range(n_hidden):
            hidden.append((_glorot(rng, width, d_hidden, f"{prefix}.h{i}.w"),
                           _zeros(d_hidden, f"{prefix}.h{i}.b")))
            width = d_hidden
        return cls(hidden, _glorot(rng, width, d_out, f"{prefix}.out.w"),
                   _zeros(d_out, f"{prefix}.out.b"))

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in self.hidden:
            x = ndiff.elu(x @ w + b)
        return x @ self.out_w + self.out_b

    def tensors(self):
        out = [t for pair in self.hidden for t in pair]
        return out + [self.out_w, self.out_b]


def gru_encode(x_seq: Tensor, params: GRUParams) -> Tensor:
    """Run the fused GRU kernel over (rows, steps, features) sequences.

    Input projections for all steps are batched into one matmul and
    handed to the kernel in time-major layout; the sequential recursion
    runs in the selected backend. Returns the final hidden state
    (rows, d_h). Zero initial state.
    """
    rows, steps, d_in = x_seq.shape
    d_h = params.wh_n.shape[0]
    if params.wx.shape[0] != d_in:
        raise ValueError(f"encoder expects {params.wx.shape[0]} input features, got {d_in}")
    x_tmajor = np.ascontiguousarray(x_seq.data.transpose(1, 0, 2))  # (W, rows, d_in)
    xw = x_tmajor @ params.wx.data + params.bias.data
    h0 = np.zeros((rows, d_h))
    h_all, zrn = kernels.gru_forward(xw, h0, params.wh_zr.data, params.wh_n.data)

    def bwd(out):
        d_final = np.ascontiguousarray(out.grad)
        dxw, _, dwh_zr, dwh_n = kernels.gru_backward(
            d_final, h_all, zrn, params.wh_zr.data, params.wh_n.data)
        if params.wh_zr.requires_grad:
            params.wh_zr.accumulate_grad(dwh_zr)
        if params.wh_n.requires_grad:
            params.wh_n.accumulate_grad(dwh_n)
        flat = dxw.reshape(steps * rows, 3 * d_h)
        if params.bias.requires_grad:
            params.bias.accumulate_grad(flat.sum(axis=0))
        if params.wx.requires_grad:
            params.wx.accumulate_grad(x_tmajor.reshape(steps * rows, d_in).T @ flat)
        if x_seq.requires_grad:
            x_seq.accumulate_grad((dxw @ params.wx.data.T).transpose(1, 0, 2))

    parents = (x_seq, params.wx, params.wh_zr, params.wh_n, params.bias)
    return ndiff.from_op(np.array(h_all[-1]), parents, bwd, "gru_sequence")


class LevelScaler:
    """Per-level standardization statistics fitted on training data only.

    Aggregate levels get statistics of their own aggregated training
    series, so every level is scaled to a comparable range on input while
    predictions are mapped back to the raw scale.
    """

    def __init__(self, means, stds, cov_means=None, cov_stds=None):
        self.means = means  # list per level, each (N_k,)
        self.stds = stds
        self.cov_means = cov_means  # list per level, each (N_k, d_u) or None
        self.cov_stds = cov_stds

    @classmethod
    def fit(cls, values_train: np.ndarray, covariates_train: np.ndarray | None,
            selections) -> "LevelScaler":
        means, stds = [], []
        cov_means, cov_stds = [], []
        vals = values_train
        covs = covariates_train
        for k in range(len(selections) + 1):
            if k > 0:
                cum = cumulative_selection(selections, k).astype(np.float64)
                vals = values_train @ cum
                if covs is not None:
                    covs = np.einsum("tnc,nm->tmc", covariates_train, cum)
            means.append(vals.mean(axis=0))
            stds.append(np.maximum(vals.std(axis=0), 1e-8))
            if covs is not None:
                cov_means.append(covs.mean(axis=0))
                cov_stds.append(np.maximum(covs.std(axis=0), 1e-8))
        if covariates_train is None:
            cov_means = cov_stds = None
        return cls(means, stds, cov_means, cov_stds)

    @classmethod
    def identity(cls, level_sizes, n_covariates: int = 0) -> "LevelScaler":
        means = [np.zeros(n) for n in level_sizes]
        stds = [np.ones(n) for n in level_sizes]
        if n_covariates:
            return cls(means, stds,
                       [np.zeros((n, n_covariates)) for n in level_sizes],
                       [np.ones((n, n_covariates)) for n in level_sizes])
        return cls(means, stds)

    def scale_values(self, level: int, y: Tensor) -> Tensor:
        inv = 1.0 / self.stds[level]
        shift = -self.means[level] * inv
        return y * Tensor(inv[:, None]) + Tensor(shift[:, None])

    def unscale_values(self, level: int, y: Tensor) -> Tensor:
        return y * Tensor(self.stds[level][:, None]) + Tensor(self.means[level][:, None])

    def scale_covariates(self, level: int, u: Tensor) -> Tensor:
        inv = 1.0 / self.cov_stds[level]
        shift = -self.cov_means[level] * inv
        return u * Tensor(inv[:, None, :]) + Tensor(shift[:, None, :])


@dataclass
class ForecastBundle:
    """Raw and reconciled forecast stacks with their targets, all (B, M, H)."""

    raw: Tensor
    targets: Tensor
    level_sizes: list[int]
    reconciled: Tensor | None = None
    constraints: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.raw.shape != self.targets.shape:
            raise ValueError(f"raw {self.raw.shape} and targets {self.targets.shape} differ")
        if self.raw.shape[-2] != sum(self.level_sizes):
            raise ValueError(f"stack rows {self.raw.shape[-2]} != sum of level sizes {sum(self.level_sizes)}")


def forecast_loss(bundle: ForecastBundle, p: int) -> Tensor:
    """Mean |raw - target|^p over every level, node, and horizon step."""
    from .reconciler import prediction_error
    return prediction_error(bundle.raw, bundle.targets, p, bundle.mask)


def _zeros_like_features(batch: int, n_nodes: int, d: int) -> Tensor:
    return Tensor(np.zeros((batch, n_nodes, d)))


def hier_propagate(feats: list[Tensor], adjacencies: list[np.ndarray],
                   selections: list[Tensor], mp_params: dict, mu_params: list,
                   mu_residual: bool = False) -> list[Tensor]:
    """One propagation round across the pyramid.

    Intra-level message passing runs where `mp_params` has an entry;
    other levels pass through. Each level's update MLP then merges
    [own | reduced from below | lifted from above], with zeros where a
    neighbor level does not exist.
    """
    n_levels = len(feats)
    if len(mu_params) != n_levels:
        raise ValueError(f"got {len(mu_params)} update MLPs for {n_levels} levels")
    if len(selections) != n_levels - 1:
        raise ValueError(f"got {len(selections)} selections for {n_levels} levels")
    z = []
    for k, h in enumerate(feats):
        z.append(message_pass(h, adjacencies[k], mp_params[k]) if k in mp_params else h)
    out = []
    for k in range(n_levels):
        batch, n_k, d = z[k].shape
        below = reduce(z[k - 1], selections[k - 1]) if k > 0 else _zeros_like_features(batch, n_k, d)
        above = lift(z[k + 1], selections[k]) if k < n_levels - 1 else _zeros_like_features(batch, n_k, d)
        merged = mu_params[k](ndiff.concat([z[k], below, above], axis=-1))
        out.append(merged + feats[k] if mu_residual else merged)
    return out


def encode_level(y_window: Tensor, u_window: Tensor | None, embeddings: Tensor,
                 params: GRUParams) -> Tensor:
    """Encode one level's windows into per-node states.

    `y_window` is (batch, nodes, steps), `u_window` optionally
    (batch, nodes, steps, d_u), `embeddings` (nodes, d_e); the embedding
    is appended to every step. Returns (batch, nodes, d_h).
    """
    batch, n_nodes, steps = y_window.shape
    d_e = embeddings.shape[-1]
    parts = [y_window.reshape((batch, n_nodes, steps, 1))]
    if u_window is not None:
        parts.append(u_window)
    emb = embeddings.reshape((1, n_nodes, 1, d_e))
    parts.append(ndiff.broadcast_to(emb, (batch, n_nodes, steps, d_e)))
    seq = ndiff.concat(parts, axis=-1)
    h = gru_encode(seq.reshape((batch * n_nodes, steps, seq.shape[-1])), params)
    return h.reshape((batch, n_nodes, params.wh_n.shape[0]))


class HierForecaster:
    """Template network: GRU encoders, propagation rounds, MLP readouts."""

    def __init__(self, config: ModelConfig, n_nodes: int, n_covariates: int,
                 rng: np.random.Generator):
        self.config = config
        self.n_nodes = n_nodes
        self.n_covariates = n_covariates
        d_h, d_e = config.hidden_size, config.embed_size
        d_in = 1 + n_covariates + d_e
        n_levels = config.levels + 1
        self.embeddings = Tensor(rng.normal(0.0, 0.1, size=(n_nodes, d_e)),
                                 requires_grad=True, name="embeddings")
        n_encoders = 1 if config.share_encoders else n_levels
        self.encoders = [GRUParams.init(d_in, d_h, rng, f"enc{k}") for k in range(n_encoders)]
        self.mp: list[dict] = []
        self.mu: list[list[MLPParams]] = []
        for layer in range(config.mp_layers):
            mp_levels = [0] if config.intra_level_base_only else list(range(n_levels))
            self.mp.append({k: init_mp_params(config.scheme, d_h, rng,
                                              order=config.diffusion_order,
                                              prefix=f"mp{layer}.level{k}")
                            for k in mp_levels})
            self.mu.append([MLPParams.init(3 * d_h, d_h, d_h, 1, rng, f"mu{layer}.level{k}")
                            for k in range(n_levels)])
        self.readouts = [MLPParams.init(d_h + d_e, d_h, config.horizon,
                                        config.decoder_hidden_layers, rng, f"readout{k}")
                         for k in range(n_levels)]

    def encoder_for(self, level: int) -> GRUParams:
        return self.encoders[0] if self.config.share_encoders else self.encoders[level]

    def parameters(self) -> list[Tensor]:
        out = [self.embeddings]
        for enc in self.encoders:
            out.extend(enc.tensors())
        for layer_mp, layer_mu in zip(self.mp, self.mu):
            for params in layer_mp.values():
                out.extend(params.tensors())
            for params in layer_mu:
                out.extend(params.tensors())
        for params in self.readouts:
            out.extend(params.tensors())
        return out

    def _level_inputs(self, x: np.ndarray, u: np.ndarray | None,
                      selections: list[Tensor]):
        """Aggregate bottom windows level by level through the hard selections."""
        batch, _, window = x.shape
        values = [Tensor(x)]
        covs = [Tensor(u)] if u is not None else None
        embeds = [self.embeddings]
        for S in selections:
            values.append(reduce(values[-1], S))
            embeds.append(reduce(embeds[-1], S))
            if covs is not None:
                n_prev = covs[-1].shape[1]
                flat = covs[-1].reshape((batch, n_prev, window * self.n_covariates))
                red = reduce(flat, S)
                covs.append(red.reshape((batch, red.shape[1], window, self.n_covariates)))
        return values, covs, embeds

    def forward(self, x: np.ndarray, u: np.ndarray | None,
                sampled: list[SampledSelection], adjacencies: list[np.ndarray],
                scaler: LevelScaler | None = None) -> Tensor:
        """Forecast every level; returns the raw top-first stack (B, M, H).

        `x` is (batch, n_nodes, window); `u` optionally
        (batch, n_nodes, window, d_u). Inputs are standardized per level,
        outputs mapped back to the raw scale.
        """
        cfg = self.config
        if x.shape[1] != self.n_nodes or x.shape[2] != cfg.window:
            raise ValueError(f"expected windows ({self.n_nodes}, {cfg.window}), got {x.shape[1:]}")
        if len(sampled) != cfg.levels:
            raise ValueError(f"model has {cfg.levels} aggregation levels, got {len(sampled)} selections")
        if scaler is None:
            sizes = [self.n_nodes] + [s.hard.shape[1] for s in sampled]
            scaler = LevelScaler.identity(sizes, self.n_covariates)
        selections = [s.hard for s in sampled]
        batch = x.shape[0]
        values, covs, embeds = self._level_inputs(x, u, selections)

        feats = []
        for k in range(cfg.levels + 1):
            try:
                scaled_y = scaler.scale_values(k, values[k])
                scaled_u = scaler.scale_covariates(k, covs[k]) if covs is not None else None
                feats.append(encode_level(scaled_y, scaled_u, embeds[k], self.encoder_for(k)))
            except FloatingPointError as exc:
                raise FloatingPointError(f"level {k} encoder: {exc}") from None

        for layer in range(cfg.mp_layers):
            try:
                feats = hier_propagate(feats, adjacencies, selections,
                                       self.mp[layer], self.mu[layer], cfg.mu_residual)
            except FloatingPointError as exc:
                raise FloatingPointError(f"propagation layer {layer}: {exc}") from None

        outs = []
        for k, h in enumerate(feats):
            try:
                n_k = h.shape[1]
                emb = ndiff.broadcast_to(embeds[k].reshape((1, n_k, cfg.embed_size)),
                                         (batch, n_k, cfg.embed_size))
                pred = self.readouts[k](ndiff.concat([h, emb], axis=-1))
                outs.append(scaler.unscale_values(k, pred))
            except FloatingPointError as exc:
                raise FloatingPointError(f"level {k} readout: {exc}") from None
        return ndiff.concat(list(reversed(outs)), axis=1)

    def stack_targets(self, y: np.ndarray, sampled: list[SampledSelection]) -> Tensor:
        """Aggregate raw targets through the same hard selections, top-first."""
        levels = [Tensor(y)]
        for s in sampled:
            levels.append(reduce(levels[-1], s.hard))
        return ndiff.concat(list(reversed(levels)), axis=1)
