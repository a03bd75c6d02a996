"""
Encode-process-decode message-passing network with mixed-precision activations.

The processor follows the MP-PDE message function: the message MLP of edge j -> i sees
(x_i, u_i - u_j, x_j, p_i - p_j), where u is a scalar input field. With
``solution_difference`` off the message is the plain (x_i, x_j, p_i - p_j) form.
Messages are mean-aggregated and every processor layer is residual.
"""
import logging
from dataclasses import dataclass, field, asdict
from typing import Literal, NamedTuple, Optional

import numpy as np

from ..assign import BitAllocation
from ..graph import MeshGraph
from .layers import (
    QuantState, QuantContext, RowLevels, MLPCache,
    mlp_forward, mlp_backward, init_mlp, sigmoid,
)
from .optim import AdamState

logger = logging.getLogger(__package__)


@dataclass
class MPNNConfig:
    in_dim: int = 1
    out_dim: int = 1
    hidden_dim: int = 32
    n_layers: int = 4
    pos_dim: int = 2
    activation: Literal['gelu'] = 'gelu'
    solution_difference: bool = True
    field_channel: int = 0
    output_activation: Literal['identity', 'sigmoid'] = 'identity'
    levels: tuple[int, ...] = (4, 8)
    base_bits: int = 4
    weight_bits: int = 8

    def __post_init__(self):
        self.levels = tuple(int(b) for b in self.levels)

    def validate(self):
        for key in ('in_dim', 'out_dim', 'hidden_dim', 'n_layers', 'pos_dim'):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be at least 1, got {getattr(self, key)}")
        if self.activation != 'gelu':
            raise ValueError(f"unsupported activation '{self.activation}'")
        if self.output_activation not in ('identity', 'sigmoid'):
            raise ValueError(f"unsupported output activation '{self.output_activation}'")
        if not (0 <= self.field_channel < self.in_dim):
            raise ValueError(f"field_channel {self.field_channel} outside the {self.in_dim} input channels")
        if not self.levels or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError(f"levels must be strictly ascending, got {self.levels}")
        for bits in self.levels + (self.weight_bits,):
            if not (2 <= bits <= 16):
                raise ValueError(f"bit-width {bits} outside [2, 16]")
        if any(b % self.base_bits for b in self.levels):
            raise ValueError(f"levels {self.levels} must be multiples of base_bits={self.base_bits}")

    @property
    def message_dim(self) -> int:
        return 2 * self.hidden_dim + self.pos_dim + (1 if self.solution_difference else 0)

    def quant_context(self, calibrate: bool = False, kernel='simulated') -> QuantContext:
        return QuantContext(enabled=True, weight_bits=self.weight_bits, base_bits=self.base_bits,
                            calibrate=calibrate, kernel=kernel)

    def to_dict(self) -> dict:
        out = asdict(self)
        out['levels'] = list(self.levels)
        return out


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    quant: QuantState = field(default_factory=QuantState)
    moments: AdamState = field(default_factory=AdamState)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> 'ModelParams':
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.quant, self.moments)

    def copy(self) -> 'ModelParams':
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           QuantState.from_dict(self.quant.to_dict()), self.moments.copy())

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


class LayerCache(NamedTuple):
    message: MLPCache
    update: MLPCache


@dataclass
class ForwardCache:
    graph: MeshGraph
    encoder: MLPCache
    layers: list[LayerCache]
    decoder: MLPCache
    output: np.ndarray


def _rows(allocation: Optional[BitAllocation], kind: str) -> RowLevels:
    if allocation is None:
        return RowLevels((), [])
    buckets = allocation.node_buckets if kind == 'node' else allocation.edge_buckets
    return RowLevels(allocation.levels, buckets)


def mpnn_layer_forward(index: int, x: np.ndarray, graph: MeshGraph, params: ModelParams,
                       node_rows: RowLevels, edge_rows: RowLevels, config: MPNNConfig,
                       ctx: QuantContext, u: Optional[np.ndarray] = None) -> tuple[np.ndarray, LayerCache]:
    """One residual message-passing layer: message, mean-aggregate, update."""
    if x.shape != (graph.n_nodes, config.hidden_dim):
        raise ValueError(f"layer input has shape {x.shape}, expected ({graph.n_nodes}, {config.hidden_dim})")
    gather_dst, gather_src, mean_in = graph.operators(x.dtype)
    pos = graph.positions.astype(x.dtype, copy=False)
    parts = [gather_dst @ x]
    if config.solution_difference:
        if u is None:
            raise ValueError("the solution-difference message needs an input field")
        parts.append((gather_dst @ u - gather_src @ u)[:, None])
    parts += [gather_src @ x, gather_dst @ pos - gather_src @ pos]
    name = f"processor.{index}"
    msg, msg_cache = mlp_forward(f"{name}.message", np.concatenate(parts, axis=1), params.tensors,
                                 edge_rows, params.quant, ctx)
    agg = mean_in @ msg
    upd, upd_cache = mlp_forward(f"{name}.update", np.concatenate([x, agg], axis=1), params.tensors,
                                 node_rows, params.quant, ctx)
    return x + upd, LayerCache(msg_cache, upd_cache)


def mpnn_layer_backward(index: int, dx_out: np.ndarray, cache: LayerCache, graph: MeshGraph,
                        config: MPNNConfig, grads: dict[str, np.ndarray]) -> np.ndarray:
    h = config.hidden_dim
    gather_dst, gather_src, mean_in = graph.operators(dx_out.dtype)
    name = f"processor.{index}"
    d_update_in = mlp_backward(f"{name}.update", dx_out, cache.update, grads)
    dx = dx_out + d_update_in[:, :h]
    d_msg = mean_in.T @ d_update_in[:, h:]
    d_msg_in = mlp_backward(f"{name}.message", d_msg, cache.message, grads)
    src_start = h + (1 if config.solution_difference else 0)
    dx = dx + gather_dst.T @ d_msg_in[:, :h] + gather_src.T @ d_msg_in[:, src_start:src_start + h]
    return dx


class MPNN:
    def __init__(self, config: MPNNConfig):
        config.validate()
        self.config = config

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
        """Uniform fan-in initialization of every linear layer."""
        c = self.config
        tensors = init_mlp(rng, 'encoder', c.in_dim + c.pos_dim, c.hidden_dim, c.hidden_dim, dtype)
        for i in range(c.n_layers):
            tensors |= init_mlp(rng, f"processor.{i}.message", c.message_dim, c.hidden_dim, c.hidden_dim, dtype)
            tensors |= init_mlp(rng, f"processor.{i}.update", 2 * c.hidden_dim, c.hidden_dim, c.hidden_dim, dtype)
        tensors |= init_mlp(rng, 'decoder', c.hidden_dim, c.hidden_dim, c.out_dim, dtype)
        return ModelParams(tensors)

    def check_sample(self, graph: MeshGraph, allocation: Optional[BitAllocation]):
        c = self.config
        if graph.features.shape[1] != c.in_dim:
            raise ValueError(f"sample has {graph.features.shape[1]} feature channels, model expects {c.in_dim}")
        if graph.positions.shape[1] != c.pos_dim:
            raise ValueError(f"sample positions are {graph.positions.shape[1]}-D, model expects {c.pos_dim}-D")
        if allocation is not None:
            allocation.check(graph.n_nodes, graph.n_edges,
                             graph.n_clusters if allocation.cluster_buckets else 0)

    def forward(self, graph: MeshGraph, params: ModelParams, allocation: Optional[BitAllocation],
                ctx: QuantContext) -> tuple[np.ndarray, ForwardCache]:
        c = self.config
        if ctx.enabled and allocation is None:
            raise ValueError("a quantized forward pass needs a bit allocation")
        self.check_sample(graph, allocation)
        dtype = params.dtype
        node_rows, edge_rows = _rows(allocation, 'node'), _rows(allocation, 'edge')
        features = graph.features.astype(dtype, copy=False)
        x_in = np.concatenate([features, graph.positions.astype(dtype, copy=False)], axis=1)
        x, enc_cache = mlp_forward('encoder', x_in, params.tensors, node_rows, params.quant, ctx)
        u = features[:, c.field_channel]
        layers = []
        for i in range(c.n_layers):
            x, layer_cache = mpnn_layer_forward(i, x, graph, params, node_rows, edge_rows, c, ctx, u)
            layers.append(layer_cache)
        out, dec_cache = mlp_forward('decoder', x, params.tensors, node_rows, params.quant, ctx)
        if c.output_activation == 'sigmoid':
            out = sigmoid(out)
        return out, ForwardCache(graph, enc_cache, layers, dec_cache, out)

    def backward(self, cache: ForwardCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        c = self.config
        grads: dict[str, np.ndarray] = {}
        if c.output_activation == 'sigmoid':
            d_out = d_out * cache.output * (1.0 - cache.output)
        dx = mlp_backward('decoder', d_out, cache.decoder, grads)
        for i in reversed(range(c.n_layers)):
            dx = mpnn_layer_backward(i, dx, cache.layers[i], cache.graph, c, grads)
        mlp_backward('encoder', dx, cache.encoder, grads)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for '{name}'")
        return grads


def _columns(x) -> np.ndarray:
    x = np.asarray(x)
    return x[:, None] if x.ndim == 1 else x


class NodeLoss(NamedTuple):
    raw: np.ndarray  # per-node mean squared error over output channels
    scalar: float


def per_node_loss(pred: np.ndarray, target: np.ndarray) -> NodeLoss:
    pred, target = _columns(pred), _columns(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    raw = np.mean((pred - target) ** 2, axis=1)
    return NodeLoss(raw, float(np.mean(raw)))


def mse_gradient(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of mean_i mean_c (pred - target)^2 with respect to ``pred``."""
    return (2.0 / pred.size) * (pred - target.astype(pred.dtype, copy=False))


def relative_l2(pred: np.ndarray, target: np.ndarray) -> float:
    norm = float(np.linalg.norm(target))
    if norm == 0:
        return float(np.linalg.norm(pred - target))
    return float(np.linalg.norm(pred - target)) / norm


def mp_pde_forward(graph: MeshGraph, params: ModelParams, allocation: Optional[BitAllocation],
                   config: MPNNConfig, ctx: Optional[QuantContext] = None) -> np.ndarray:
    if ctx is None:
        ctx = config.quant_context() if allocation is not None else QuantContext.full_precision()
    return MPNN(config).forward(graph, params, allocation, ctx)[0]


def backward_gradients(graph: MeshGraph, params: ModelParams, allocation: Optional[BitAllocation],
                       target: np.ndarray, config: MPNNConfig,
                       ctx: Optional[QuantContext] = None) -> tuple[dict[str, np.ndarray], NodeLoss]:
    """Gradients of the scalar MSE with respect to every tensor, plus the per-node loss."""
    if ctx is None:
        ctx = config.quant_context() if allocation is not None else QuantContext.full_precision()
    model = MPNN(config)
    pred, cache = model.forward(graph, params, allocation, ctx)
    target = np.asarray(target).reshape(pred.shape)
    loss = per_node_loss(pred, target)
    return model.backward(cache, mse_gradient(pred, target)), loss
