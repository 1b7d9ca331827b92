"""Dataset containers, chronological splits, windowing, and synthesis.

A dataset directory holds `values.csv` (T rows, one column per node),
optional `covariates.csv` (columns `<node>__u<j>`), `edges.csv`
(`src,dst,weight` lines), optional `clusters.csv` (node,label) and an
optional `meta` file with `key=value` lines. NaNs in `values.csv` become
masked entries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphcore import Graph


@dataclass
class DatasetBundle:
    values: np.ndarray  # (T, N)
    covariates: np.ndarray | None  # (T, N, d_u)
    graph: Graph
    mask: np.ndarray  # (T, N) bool, True where observed
    node_ids: list[str] = field(default_factory=list)
    true_clusters: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, N = self.values.shape
        if self.mask.shape != (T, N):
            raise ValueError(f"mask shape {self.mask.shape} != values {self.values.shape}")
        if self.graph.n != N:
            raise ValueError(f"graph has {self.graph.n} nodes, values have {N}")
        if self.covariates is not None and self.covariates.shape[:2] != (T, N):
            raise ValueError(f"covariates shape {self.covariates.shape} incompatible with ({T},{N})")
        if not self.node_ids:
            self.node_ids = [f"n{i}" for i in range(N)]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_covariates(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[2]

    def observed_fraction(self) -> float:
        return float(self.mask.mean())


def chrono_split(n_steps: int, ratios, window: int, horizon: int) -> list[tuple[int, int]]:
    """Contiguous train/val/test index ranges, in time order.

    Windows are drawn inside each range only, so no sample straddles a
    boundary. Each range must fit at least one window.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    t1 = int(round(n_steps * ratios[0]))
    t2 = int(round(n_steps * (ratios[0] + ratios[1])))
    ranges = [(0, t1), (t1, t2), (t2, n_steps)]
    min_len = window + horizon
    for name, (lo, hi) in zip(("train", "val", "test"), ranges):
        if hi - lo < min_len:
            raise ValueError(f"{name} split [{lo},{hi}) is shorter than window+horizon={min_len}")
    return ranges


class WindowSet:
    """Stride-1 sliding windows over one split range.

    A sample indexed by prediction time t pairs the input window
    values[t-W:t] with the target values[t:t+H]. Iterating yields
    (x, u, y, t) tuples with x (N, W), u (N, W, d_u) or None, y (N, H);
    `batch` gathers many samples at once.
    """

    def __init__(self, dataset: DatasetBundle, window: int, horizon: int,
                 span: tuple[int, int]):
        lo, hi = span
        self.dataset = dataset
        self.window = window
        self.horizon = horizon
        self.starts = np.arange(lo + window, hi - horizon + 1)

    def __len__(self) -> int:
        return self.starts.size

    def __iter__(self):
        for t in self.starts:
            x, u, y, _ = self.batch(single=int(t))
            yield x[0], (None if u is None else u[0]), y[0], int(t)

    def valid_indices(self) -> np.ndarray:
        """Indices of samples whose target window is not fully masked."""
        keep = [i for i, t in enumerate(self.starts)
                if self.dataset.mask[t:t + self.horizon].any()]
        return np.asarray(keep, dtype=np.int64)

    def batch(self, indices=None, single: int | None = None):
        """Gather samples as (x, u, y, mask_y) batch arrays.

        `indices` index into `starts`; `single` selects one explicit
        prediction time instead.
        """
        if indices is None and single is None:
            raise ValueError("pass either sample indices or a single prediction time")
        ts = np.array([single]) if single is not None else self.starts[np.asarray(indices)]
        W, H = self.window, self.horizon
        ds = self.dataset
        x = np.stack([ds.values[t - W:t].T for t in ts])
        y = np.stack([ds.values[t:t + H].T for t in ts])
        mask_y = np.stack([ds.mask[t:t + H].T for t in ts])
        u = None
        if ds.covariates is not None:
            u = np.stack([ds.covariates[t - W:t].transpose(1, 0, 2) for t in ts])
        return x, u, y, mask_y


def make_windows(dataset: DatasetBundle, window: int, horizon: int,
                 span: tuple[int, int]) -> WindowSet:
    """Sliding samples over one split range (see WindowSet)."""
    return WindowSet(dataset, window, horizon, span)


def synth_generate(n_clusters: int, nodes_per_cluster: int, n_steps: int,
                   noise: float, seed: int, inter_edge_prob: float = 0.05,
                   ar_coeff: float = 0.9, ar_scale: float = 0.08) -> DatasetBundle:
    """Clustered sinusoid-plus-AR(1) series with a matching graph.

    Every cluster has a latent signal (sinusoid with its own period and
    phase plus an AR(1) component); member series are the latent plus
    independent Gaussian noise. The graph densely connects nodes within a
    cluster (weight 1) and sparsely across clusters (weight 0.1).
    """
    if n_clusters < 2:
        raise ValueError(f"need at least 2 clusters, got {n_clusters}")
    rng = np.random.default_rng(seed)
    n = n_clusters * nodes_per_cluster
    t = np.arange(n_steps)
    periods = rng.uniform(18.0, 60.0, size=n_clusters)
    phases = rng.uniform(0.0, 2 * np.pi, size=n_clusters)
    latents = np.empty((n_steps, n_clusters))
    for c in range(n_clusters):
        wave = np.sin(2 * np.pi * t / periods[c] + phases[c])
        ar = np.empty(n_steps)
        eps = rng.normal(0.0, ar_scale, size=n_steps)
        ar[0] = eps[0]
        for i in range(1, n_steps):
            ar[i] = ar_coeff * ar[i - 1] + eps[i]
        latents[:, c] = wave + ar
    labels = np.repeat(np.arange(n_clusters), nodes_per_cluster)
    values = latents[:, labels] + noise * rng.normal(size=(n_steps, n))

    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] == labels[j]:
                edges.append((i, j, 1.0))
            elif rng.uniform() < inter_edge_prob:
                edges.append((i, j, 0.1))
    graph = Graph(n=n, edges=edges, directed=False)
    return DatasetBundle(values=values, covariates=None, graph=graph,
                         mask=np.ones((n_steps, n), dtype=bool),
                         true_clusters=labels,
                         meta={"generator": "synth", "seed": seed, "noise": noise})


def save_dataset(path, dataset: DatasetBundle) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    vals = np.where(dataset.mask, dataset.values, np.nan)
    with open(path / "values.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.node_ids)
        for row in vals:
            writer.writerow([f"{v:.12g}" if np.isfinite(v) else "" for v in row])
    if dataset.covariates is not None:
        T, N, d_u = dataset.covariates.shape
        header = [f"{nid}__u{j}" for nid in dataset.node_ids for j in range(d_u)]
        with open(path / "covariates.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            flat = dataset.covariates.reshape(T, N * d_u)
            for row in flat:
                writer.writerow([f"{v:.12g}" for v in row])
    dataset.graph.save(path / "edges.csv")
    if dataset.true_clusters is not None:
        with open(path / "clusters.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "label"])
            for nid, lab in zip(dataset.node_ids, dataset.true_clusters):
                writer.writerow([nid, int(lab)])
    if dataset.meta:
        lines = [f"{k}={v}" for k, v in sorted(dataset.meta.items())]
        (path / "meta").write_text("\n".join(lines) + "\n")


def load_dataset(path) -> DatasetBundle:
    path = Path(path)
    values_file = path / "values.csv"
    if not values_file.exists():
        raise FileNotFoundError(f"no values.csv under {path}")
    with open(values_file, newline="") as fh:
        reader = csv.reader(fh)
        node_ids = next(reader)
        rows = [[float(v) if v not in ("", "nan") else np.nan for v in row] for row in reader]
    values = np.asarray(rows, dtype=np.float64)
    mask = np.isfinite(values)
    values = np.where(mask, values, 0.0)
    T, N = values.shape

    covariates = None
    cov_file = path / "covariates.csv"
    if cov_file.exists():
        with open(cov_file, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            flat = np.asarray([[float(v) for v in row] for row in reader])
        d_u = len(header) // N
        covariates = flat.reshape(T, N, d_u)

    graph = Graph.load(path / "edges.csv", n=N)
    true_clusters = None
    cl_file = path / "clusters.csv"
    if cl_file.exists():
        by_node = {}
        with open(cl_file, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for nid, lab in reader:
                by_node[nid] = int(lab)
        true_clusters = np.array([by_node[nid] for nid in node_ids], dtype=np.int64)

    meta = {}
    meta_file = path / "meta"
    if meta_file.exists():
        for line in meta_file.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return DatasetBundle(values=values, covariates=covariates, graph=graph,
                         mask=mask, node_ids=list(node_ids),
                         true_clusters=true_clusters, meta=meta)
