"""Graph storage, adjacency normalization, and message-passing schemes.

Edge lists are the interchange format (one `src,dst,weight` per line,
zero-based); dense matrices are used internally since the target scale is
a few hundred nodes. Three propagation schemes are provided: plain graph
convolution, bidirectional diffusion convolution, and a gated
message-passing layer with an edge-conditioned message MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndiff
from .ndiff import Tensor


@dataclass
class Graph:
    """Weighted graph over nodes 0..n-1.

    For undirected graphs each edge is stored once; `to_dense` mirrors it.
    """

    n: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    directed: bool = False

    def __post_init__(self):
        seen = set()
        for src, dst, w in self.edges:
            if not (0 <= src < self.n and 0 <= dst < self.n):
                raise ValueError(f"edge ({src},{dst}) outside node range [0,{self.n})")
            if w < 0:
                raise ValueError(f"negative edge weight {w} on ({src},{dst})")
            if (src, dst) in seen:
                raise ValueError(f"duplicate edge ({src},{dst})")
            seen.add((src, dst))

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for src, dst, w in self.edges:
            A[src, dst] = w
            if not self.directed:
                A[dst, src] = w
        return A

    @classmethod
    def from_dense(cls, A: np.ndarray, directed: bool | None = None) -> "Graph":
        A = np.asarray(A, dtype=np.float64)
        if directed is None:
            directed = not np.allclose(A, A.T)
        edges = []
        for i, j in zip(*np.nonzero(A)):
            if not directed and j < i:
                continue
            edges.append((int(i), int(j), float(A[i, j])))
        return cls(n=A.shape[0], edges=edges, directed=directed)

    def save(self, path) -> None:
        lines = [f"{s},{d},{w:.12g}" for s, d, w in self.edges]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path, n: int | None = None, directed: bool = False) -> "Graph":
        edges = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            s, d, w = line.split(",")
            edges.append((int(s), int(d), float(w)))
        if n is None:
            n = 1 + max((max(s, d) for s, d, _ in edges), default=-1)
        return cls(n=n, edges=edges, directed=directed)


def normalize_sym(A: np.ndarray) -> np.ndarray:
    """Symmetric normalization D^{-1/2} A D^{-1/2} with a zero-degree guard."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if (A < 0).any():
        raise ValueError("adjacency weights must be nonnegative")
    deg = A.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


def row_normalize(A: np.ndarray) -> np.ndarray:
    """Random-walk transition matrix D^{-1} A (zero rows stay zero)."""
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    return inv[:, None] * A


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)),
                  requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class GConvParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng, prefix: str = "gconv"):
        return cls(_glorot(rng, d_in, d_out, f"{prefix}.weight"),
                   _zeros(d_out, f"{prefix}.bias"))

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class DiffusionParams:
    order: int
    w_self: Tensor
    w_fwd: list[Tensor]
    w_bwd: list[Tensor]
    bias: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, order: int, rng, prefix: str = "diff"):
        if order < 1:
            raise ValueError(f"diffusion order must be >= 1, got {order}")
        return cls(order,
                   _glorot(rng, d_in, d_out, f"{prefix}.w_self"),
                   [_glorot(rng, d_in, d_out, f"{prefix}.w_fwd{q}") for q in range(1, order + 1)],
                   [_glorot(rng, d_in, d_out, f"{prefix}.w_bwd{q}") for q in range(1, order + 1)],
                   _zeros(d_out, f"{prefix}.bias"))

    def tensors(self):
        return [self.w_self, *self.w_fwd, *self.w_bwd, self.bias]


@dataclass
class GatedParams:
    msg_w: Tensor
    msg_b: Tensor
    out_w: Tensor
    out_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    upd_w1: Tensor
    upd_b1: Tensor
    upd_w2: Tensor
    upd_b2: Tensor

    @classmethod
    def init(cls, d: int, rng, prefix: str = "gated"):
        return cls(
            _glorot(rng, 2 * d + 1, d, f"{prefix}.msg_w"), _zeros(d, f"{prefix}.msg_b"),
            _glorot(rng, d, d, f"{prefix}.out_w"), _zeros(d, f"{prefix}.out_b"),
            _glorot(rng, d, d, f"{prefix}.gate_w"), _zeros(d, f"{prefix}.gate_b"),
            _glorot(rng, 2 * d, d, f"{prefix}.upd_w1"), _zeros(d, f"{prefix}.upd_b1"),
            _glorot(rng, d, d, f"{prefix}.upd_w2"), _zeros(d, f"{prefix}.upd_b2"),
        )

    def tensors(self):
        return [self.msg_w, self.msg_b, self.out_w, self.out_b, self.gate_w,
                self.gate_b, self.upd_w1, self.upd_b1, self.upd_w2, self.upd_b2]


def init_mp_params(scheme: str, d: int, rng, order: int = 2, prefix: str = "mp"):
    if scheme == "gconv":
        return GConvParams.init(d, d, rng, prefix)
    if scheme == "diffusion":
        return DiffusionParams.init(d, d, order, rng, prefix)
    if scheme == "gated":
        return GatedParams.init(d, rng, prefix)
    raise ValueError(f"unknown message-passing scheme {scheme!r}")


def _check_features(op: str, H: Tensor, A: np.ndarray) -> None:
    if H.shape[-2] != A.shape[0]:
        raise ValueError(f"{op}: features have {H.shape[-2]} nodes, adjacency has {A.shape[0]}")


def gconv(H: Tensor, A: np.ndarray, params: GConvParams, activation: str = "elu") -> Tensor:
    """Graph convolution: act(norm(A + I) H W + b)."""
    _check_features("gconv", H, A)
    A_hat = normalize_sym(np.asarray(A, dtype=np.float64) + np.eye(A.shape[0]))
    out = ndiff.matmul(Tensor(A_hat), H) @ params.weight + params.bias
    if activation == "elu":
        return ndiff.elu(out)
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def diffusion_conv(H: Tensor, A: np.ndarray, k: int, params: DiffusionParams) -> Tensor:
    """Bidirectional diffusion convolution of order k (linear readout).

    H' = sum_q P_fwd^q H W_q^f + P_bwd^q H W_q^b, plus a self term H W_0 + b,
    with P_fwd the row-normalized adjacency and P_bwd its transpose twin.
    """
    if k < 1:
        raise ValueError(f"diffusion order must be >= 1, got {k}")
    _check_features("diffusion_conv", H, A)
    A = np.asarray(A, dtype=np.float64)
    p_fwd = row_normalize(A)
    p_bwd = row_normalize(A.T)
    out = H @ params.w_self + params.bias
    pf = np.eye(A.shape[0])
    pb = np.eye(A.shape[0])
    for q in range(k):
        pf = pf @ p_fwd
        pb = pb @ p_bwd
        out = out + ndiff.matmul(Tensor(pf), H) @ params.w_fwd[q]
        out = out + ndiff.matmul(Tensor(pb), H) @ params.w_bwd[q]
    return out


def gated_mp(H: Tensor, A: np.ndarray, params: GatedParams) -> Tensor:
    """Gated message passing with edge-conditioned messages.

    Messages are computed for each (receiver i, sender j) pair from
    [h_i | h_j | a_ji], gated by a sigmoid head, aggregated as a sum
    weighted by the incoming edge weights, and fed with h_i to a residual
    update MLP. Edge weights enter both the message MLP and the
    aggregation weights.
    """
    _check_features("gated_mp", H, A)
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    d = H.shape[-1]
    batch = H.shape[:-2]
    grid = batch + (n, n)
    h_i = ndiff.broadcast_to(H.reshape(batch + (n, 1, d)), grid + (d,))
    h_j = ndiff.broadcast_to(H.reshape(batch + (1, n, d)), grid + (d,))
    # a_ji: weight of the edge j -> i, indexed [i, j]
    in_w = Tensor(A.T.reshape((1,) * len(batch) + (n, n, 1)))
    a_feat = ndiff.broadcast_to(in_w, grid + (1,))
    pair = ndiff.concat([h_i, h_j, a_feat], axis=-1)
    hidden = ndiff.elu(pair @ params.msg_w + params.msg_b)
    msg = (hidden @ params.out_w + params.out_b) * ndiff.sigmoid(hidden @ params.gate_w + params.gate_b)
    agg = (msg * ndiff.broadcast_to(in_w, grid + (d,))).sum(axis=-2)
    upd = ndiff.concat([H, agg], axis=-1)
    return ndiff.elu(upd @ params.upd_w1 + params.upd_b1) @ params.upd_w2 + params.upd_b2 + H


def message_pass(H: Tensor, A: np.ndarray, params) -> Tensor:
    """Dispatch on the parameter bundle type."""
    if isinstance(params, GConvParams):
        return gconv(H, A, params)
    if isinstance(params, DiffusionParams):
        return diffusion_conv(H, A, params.order, params)
    if isinstance(params, GatedParams):
        return gated_mp(H, A, params)
    raise TypeError(f"unknown message-passing parameters {type(params).__name__}")
