import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

logger = logging.getLogger(__package__)

DEFAULT_DIFFUSION_STEPS = 10
_KNN_CHUNK = 1024


@dataclass(eq=False)
class MeshGraph:
    """
    Nodes with positions and features, directed (src, dst) edges, optional clusters.

    Messages flow along edges from ``src`` to ``dst``; the in-neighbourhood of node i
    is every ``src`` of an edge whose ``dst`` is i.
    """
    positions: np.ndarray  # (N, D)
    features: np.ndarray  # (N, d)
    edges: np.ndarray  # (E, 2) int64 (src, dst)
    targets: Optional[np.ndarray] = None  # (N, d')
    clusters: Optional[list[np.ndarray]] = None
    _operators: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        self.features = np.asarray(self.features)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.targets is not None:
            self.targets = np.asarray(self.targets)
            if self.targets.ndim == 1:
                self.targets = self.targets[:, None]
        self.check()

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters) if self.clusters else 0

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    def check(self):
        n = self.n_nodes
        if len(self.features) != n:
            raise ValueError(f"{len(self.features)} feature rows for {n} nodes")
        if self.targets is not None and len(self.targets) != n:
            raise ValueError(f"{len(self.targets)} target rows for {n} nodes")
        if self.n_edges:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise IndexError(f"edge endpoint out of range for {n} nodes")
            if len(np.unique(self.src * n + self.dst)) != self.n_edges:
                raise ValueError("duplicate (src, dst) edges")
        if self.clusters:
            merged = np.sort(np.concatenate(self.clusters))
            if not np.array_equal(merged, np.arange(n)):
                raise ValueError("clusters do not partition the node set")

    def operators(self, dtype=np.float64) -> tuple[sparse.csr_array, sparse.csr_array, sparse.csr_array]:
        """
        Sparse gather/scatter operators ``(gather_dst, gather_src, mean_in)``.

        ``gather_dst @ h`` is ``h[dst]`` (E x N), ``mean_in @ m`` averages edge rows over
        each node's in-edges (N x E); nodes without in-edges receive zeros.
        """
        key = np.dtype(dtype).str
        if key not in self._operators:
            n, e = self.n_nodes, self.n_edges
            rows = np.arange(e)
            ones = np.ones(e, dtype=dtype)
            gather_dst = sparse.csr_array((ones, (rows, self.dst)), shape=(e, n))
            gather_src = sparse.csr_array((ones, (rows, self.src)), shape=(e, n))
            deg = np.bincount(self.dst, minlength=n).astype(dtype)
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            mean_in = sparse.csr_array((inv[self.dst], (self.dst, rows)), shape=(n, e))
            self._operators[key] = (gather_dst, gather_src, mean_in)
        return self._operators[key]

    def neighbour_mean(self, dtype=np.float64) -> tuple[sparse.csr_array, np.ndarray]:
        """Row-normalized in-neighbour adjacency without self-loops, and the isolated-node mask."""
        key = 'diffusion' + np.dtype(dtype).str
        if key not in self._operators:
            keep = self.src != self.dst
            src, dst = self.src[keep], self.dst[keep]
            n = self.n_nodes
            deg = np.bincount(dst, minlength=n).astype(dtype)
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            adj = sparse.csr_array((inv[dst], (dst, src)), shape=(n, n))
            self._operators[key] = (adj, deg == 0)
        return self._operators[key]


@dataclass
class LossField:
    raw: np.ndarray
    smoothed: np.ndarray


def build_knn_graph(positions: np.ndarray, k: int, self_loops: bool = True) -> np.ndarray:
    """
    Directed kNN edges ``(j, i)`` for the k nearest neighbours j of every node i.

    Equal distances go to the smaller index. With ``self_loops`` the node itself is
    one of its k neighbours.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 1:
        positions = positions[:, None]
    n = len(positions)
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    candidates = n if self_loops else n - 1
    if k > candidates:
        raise ValueError(f"k={k} exceeds the {candidates} available neighbours")
    edges = []
    for start in range(0, n, _KNN_CHUNK):
        stop = min(start + _KNN_CHUNK, n)
        dist = cdist(positions[start:stop], positions)
        rows = np.arange(stop - start)
        if self_loops:
            dist[rows, start + rows] = -1.0  # a node is always its own nearest neighbour
        else:
            dist[rows, start + rows] = np.inf
        nearest = np.argsort(dist, axis=1, kind='stable')[:, :k]
        dst = np.repeat(np.arange(start, stop), k)
        edges.append(np.stack([nearest.ravel(), dst], axis=1))
    return np.concatenate(edges).astype(np.int64) if edges else np.empty((0, 2), dtype=np.int64)


def normalize_loss(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("loss contains non-finite entries")
    if np.any(raw < 0):
        raise ValueError("loss must be nonnegative")
    peak = raw.max(initial=0.0)
    if peak == 0:
        return np.zeros_like(raw)
    return raw / peak


def diffuse_loss(values: np.ndarray, graph: MeshGraph, steps: int = DEFAULT_DIFFUSION_STEPS) -> np.ndarray:
    """``steps`` rounds of v_i <- v_i / 2 + mean over in-neighbours (self-loops excluded) / 2."""
    values = np.asarray(values, dtype=np.float64)
    if steps < 0:
        raise ValueError(f"steps must be nonnegative, got {steps}")
    if values.shape != (graph.n_nodes,):
        raise ValueError(f"expected {graph.n_nodes} values, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("values contain non-finite entries")
    adj, isolated = graph.neighbour_mean()
    for _ in range(steps):
        values = np.where(isolated, values, 0.5 * values + 0.5 * (adj @ values))
    return values


def smooth_loss(raw: np.ndarray, graph: MeshGraph, steps: int = DEFAULT_DIFFUSION_STEPS) -> LossField:
    return LossField(raw=np.asarray(raw, dtype=np.float64),
                     smoothed=diffuse_loss(normalize_loss(raw), graph, steps))


def grid_clusters(shape: Sequence[int], patch: int) -> list[np.ndarray]:
    """Square ``patch`` x ``patch`` clusters over a row-major lattice of ``shape``."""
    rows, cols = shape
    ids = (np.arange(rows)[:, None] // patch) * (-(-cols // patch)) + np.arange(cols)[None, :] // patch
    ids = ids.ravel()
    return [np.flatnonzero(ids == c) for c in range(ids.max() + 1)]
