import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__package__)

RATIO_TOLERANCE = 1e-9
# keeps N * alpha from losing a node to binary rounding, e.g. 0.29 * 100
_FLOOR_EPS = 1e-9


def validate_levels(levels: Sequence[int], ratios: Sequence[float]):
    if len(levels) == 0:
        raise ValueError("at least one quantization level is required")
    if len(levels) != len(ratios):
        raise ValueError(f"{len(levels)} levels but {len(ratios)} ratios")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"levels must be strictly ascending, got {list(levels)}")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be nonnegative, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")


def bucket_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    sizes = [int(np.floor(n * r + _FLOOR_EPS)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError(f"ratios {list(ratios)} overflow {n} items")
    return sizes


def assign_quant(w: np.ndarray, levels: Sequence[int], ratios: Sequence[float]) -> list[np.ndarray]:
    """
    Split indices into one bucket per level, lowest weights to the lowest level.

    Bucket i (i < K) receives floor(N * ratios[i]) indices; the last bucket also takes
    whatever the flooring leaves over. Ties are resolved by original index.
    """
    validate_levels(levels, ratios)
    w = np.asarray(w)
    if w.ndim != 1:
        raise ValueError(f"weights must be a vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("complexity weights contain non-finite entries")
    order = np.argsort(w, kind='stable')
    buckets, start = [], 0
    for size in bucket_sizes(len(w), ratios):
        buckets.append(order[start:start + size])
        start += size
    return buckets


def derive_edge_weights(w: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """An edge j -> i inherits the weight of its target node i."""
    w = np.asarray(w)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges[:, 1].min() < 0 or edges[:, 1].max() >= len(w)):
        raise IndexError(f"edge target out of range for {len(w)} nodes")
    return w[edges[:, 1]]


def derive_cluster_weights(w: np.ndarray, clusters: Sequence[Sequence[int]]) -> np.ndarray:
    w = np.asarray(w)
    out = np.empty(len(clusters), dtype=np.float64)
    for c, members in enumerate(clusters):
        if len(members) == 0:
            raise ValueError(f"cluster {c} is empty")
        out[c] = np.mean(w[np.asarray(members, dtype=np.int64)])
    return out


def _row_levels(buckets: Sequence[np.ndarray], n: int) -> np.ndarray:
    out = np.full(n, -1, dtype=np.int64)
    for k, idx in enumerate(buckets):
        out[idx] = k
    return out


@dataclass
class BitAllocation:
    levels: tuple[int, ...]
    ratios: tuple[float, ...]
    node_buckets: list[np.ndarray]
    edge_buckets: list[np.ndarray]
    cluster_buckets: list[np.ndarray] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return sum(len(b) for b in self.node_buckets)

    @property
    def n_edges(self) -> int:
        return sum(len(b) for b in self.edge_buckets)

    def node_levels(self) -> np.ndarray:
        """Index into ``levels`` for every node."""
        return _row_levels(self.node_buckets, self.n_nodes)

    def edge_levels(self) -> np.ndarray:
        return _row_levels(self.edge_buckets, self.n_edges)

    def check(self, n_nodes: int, n_edges: int, n_clusters: int = 0):
        for kind, buckets, n in (('node', self.node_buckets, n_nodes),
                                 ('edge', self.edge_buckets, n_edges),
                                 ('cluster', self.cluster_buckets, n_clusters)):
            if not buckets and n == 0:
                continue
            if len(buckets) != len(self.levels):
                raise ValueError(f"{kind} buckets do not match the {len(self.levels)} levels")
            merged = np.sort(np.concatenate(buckets)) if buckets else np.empty(0, dtype=np.int64)
            if len(merged) != n or not np.array_equal(merged, np.arange(n)):
                raise ValueError(f"{kind} buckets do not partition {n} indices")

    def histogram(self) -> dict[str, dict[int, int]]:
        out = {'nodes': {b: len(idx) for b, idx in zip(self.levels, self.node_buckets)},
               'edges': {b: len(idx) for b, idx in zip(self.levels, self.edge_buckets)}}
        if self.cluster_buckets:
            out['clusters'] = {b: len(idx) for b, idx in zip(self.levels, self.cluster_buckets)}
        return out


def allocate(w: np.ndarray, edges: np.ndarray, levels: Sequence[int], ratios: Sequence[float],
             clusters: Optional[Sequence[Sequence[int]]] = None) -> BitAllocation:
    """Bucket nodes, edges and clusters with the same ratios."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("complexity weights must be nonnegative")
    node_buckets = assign_quant(w, levels, ratios)
    edge_buckets = assign_quant(derive_edge_weights(w, edges), levels, ratios)
    cluster_buckets = []
    if clusters:
        cluster_buckets = assign_quant(derive_cluster_weights(w, clusters), levels, ratios)
    allocation = BitAllocation(tuple(levels), tuple(ratios), node_buckets, edge_buckets, cluster_buckets)
    logger.debug(f"allocation {allocation.histogram()}")
    return allocation


def uniform_allocation(n_nodes: int, n_edges: int, bits: int) -> BitAllocation:
    return BitAllocation((bits,), (1.0,), [np.arange(n_nodes)], [np.arange(n_edges)])
