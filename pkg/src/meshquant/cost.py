"""MAC accounting for uniform and mixed-precision allocations, normalized to Int8 x Int8."""
import logging
from dataclasses import dataclass, field
from typing import Optional

from .assign import BitAllocation
from .graph import MeshGraph
from .model import MPNNConfig

logger = logging.getLogger(__package__)

INT8_PRODUCT = 64


def layer_mac_cost(rows: int, d_in: int, d_out: int, b_a: int, b_w: int) -> float:
    """Int8-equivalent MACs of a (rows x d_in) @ (d_in x d_out) product; the bias is ignored."""
    if min(rows, d_in, d_out) < 0:
        raise ValueError("layer dimensions must be nonnegative")
    return rows * d_in * d_out * b_a * b_w / INT8_PRODUCT


@dataclass
class CostEntry:
    layer: str
    rows: int
    d_in: int
    d_out: int
    b_a: int
    b_w: int

    @property
    def raw_macs(self) -> int:
        return self.rows * self.d_in * self.d_out

    @property
    def int8_macs(self) -> float:
        return layer_mac_cost(self.rows, self.d_in, self.d_out, self.b_a, self.b_w)


@dataclass
class CostReport:
    main: list[CostEntry] = field(default_factory=list)
    aux: list[CostEntry] = field(default_factory=list)

    @property
    def main_macs(self) -> float:
        return sum(e.int8_macs for e in self.main)

    @property
    def aux_macs(self) -> float:
        return sum(e.int8_macs for e in self.aux)

    @property
    def total_macs(self) -> float:
        return self.main_macs + self.aux_macs

    def by_layer(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.main + self.aux:
            out[e.layer] = out.get(e.layer, 0.0) + e.int8_macs
        return out


def _linear_shapes(config: MPNNConfig) -> list[tuple[str, str, int, int]]:
    """(name, row kind, d_in, d_out) of every linear layer in evaluation order."""
    h = config.hidden_dim
    shapes = [('encoder.0', 'node', config.in_dim + config.pos_dim, h), ('encoder.1', 'node', h, h)]
    for i in range(config.n_layers):
        shapes += [(f"processor.{i}.message.0", 'edge', config.message_dim, h),
                   (f"processor.{i}.message.1", 'edge', h, h),
                   (f"processor.{i}.update.0", 'node', 2 * h, h),
                   (f"processor.{i}.update.1", 'node', h, h)]
    shapes += [('decoder.0', 'node', h, h), ('decoder.1', 'node', h, config.out_dim)]
    return shapes


def _entries(config: MPNNConfig, prefix: str, node_sizes: dict[int, int],
             edge_sizes: dict[int, int]) -> list[CostEntry]:
    entries = []
    for name, kind, d_in, d_out in _linear_shapes(config):
        sizes = node_sizes if kind == 'node' else edge_sizes
        for bits, rows in sizes.items():
            entries.append(CostEntry(f"{prefix}{name}", rows, d_in, d_out, bits, config.weight_bits))
    return entries


def model_cost_report(config: MPNNConfig, allocation: BitAllocation, graph: MeshGraph,
                      aux_config: Optional[MPNNConfig] = None) -> CostReport:
    """
    Per-layer MACs of the main model under ``allocation``; node layers are split by the node
    buckets and message layers by the edge buckets. ``aux_config`` adds the auxiliary model
    at its own uniform precision.
    """
    n_nodes, n_edges = graph.n_nodes, graph.n_edges
    allocation.check(n_nodes, n_edges, sum(len(b) for b in allocation.cluster_buckets))
    node_sizes = {b: len(idx) for b, idx in zip(allocation.levels, allocation.node_buckets)}
    edge_sizes = {b: len(idx) for b, idx in zip(allocation.levels, allocation.edge_buckets)}
    report = CostReport(main=_entries(config, '', node_sizes, edge_sizes))
    if aux_config is not None:
        bits = aux_config.levels[0]
        report.aux = _entries(aux_config, 'aux.', {bits: n_nodes}, {bits: n_edges})
    return report
