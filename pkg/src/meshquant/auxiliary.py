"""
Auxiliary complexity predictor.

A small uniformly quantized MPNN with a sigmoid head, trained to regress the smoothed,
detached per-node loss of the main model. Its output drives the bit allocation.
"""
import logging
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .assign import uniform_allocation
from .graph import MeshGraph, smooth_loss, DEFAULT_DIFFUSION_STEPS
from .model import MPNN, MPNNConfig, ModelParams, QuantContext

logger = logging.getLogger(__package__)

AUX_PRESETS = {
    'default': {'hidden_dim': 32, 'n_layers': 3, 'bits': 8},
    'small': {'hidden_dim': 32, 'n_layers': 3, 'bits': 4},
    'tiny': {'hidden_dim': 24, 'n_layers': 2, 'bits': 8},
}


@dataclass
class AuxConfig:
    preset: str = 'default'
    hidden_dim: Optional[int] = None
    n_layers: Optional[int] = None
    bits: Optional[int] = None
    weight_bits: int = 8
    diffusion_steps: int = DEFAULT_DIFFUSION_STEPS

    def __post_init__(self):
        if self.preset not in AUX_PRESETS:
            raise ValueError(f"unknown auxiliary preset '{self.preset}', choose from {sorted(AUX_PRESETS)}")
        for key, value in AUX_PRESETS[self.preset].items():
            if getattr(self, key) is None:
                setattr(self, key, value)

    def validate(self):
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ValueError("auxiliary dims must be at least 1")
        if self.diffusion_steps < 0:
            raise ValueError(f"diffusion_steps must be nonnegative, got {self.diffusion_steps}")

    def mpnn_config(self, in_dim: int, pos_dim: int) -> MPNNConfig:
        return MPNNConfig(in_dim=in_dim, out_dim=1, hidden_dim=self.hidden_dim, n_layers=self.n_layers,
                          pos_dim=pos_dim, solution_difference=False, output_activation='sigmoid',
                          levels=(self.bits,), base_bits=self.bits, weight_bits=self.weight_bits)

    def to_dict(self) -> dict:
        return asdict(self)


class AuxiliaryModel:
    def __init__(self, config: AuxConfig, in_dim: int, pos_dim: int):
        config.validate()
        self.config = config
        self.network = MPNN(config.mpnn_config(in_dim, pos_dim))

    @property
    def mpnn_config(self) -> MPNNConfig:
        return self.network.config

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
        return self.network.init_params(rng, dtype)

    def context(self, calibrate: bool = False) -> QuantContext:
        return self.mpnn_config.quant_context(calibrate=calibrate)

    def forward(self, graph: MeshGraph, params: ModelParams, calibrate: bool = False):
        allocation = uniform_allocation(graph.n_nodes, graph.n_edges, self.config.bits)
        out, cache = self.network.forward(graph, params, allocation, self.context(calibrate))
        return out[:, 0], cache

    def loss_and_gradients(self, graph: MeshGraph, params: ModelParams, target: np.ndarray,
                           calibrate: bool = False, cached=None) -> tuple[float, dict[str, np.ndarray]]:
        """MSE between the sigmoid output and ``target``, and its gradients."""
        if cached is None:
            cached = self.forward(graph, params, calibrate)
        w, cache = cached
        target = np.asarray(target, dtype=w.dtype)
        if target.shape != w.shape:
            raise ValueError(f"target shape {target.shape} does not match {w.shape}")
        diff = w - target
        loss = float(np.mean(diff ** 2))
        grads = self.network.backward(cache, ((2.0 / len(w)) * diff)[:, None])
        return loss, grads


def aux_forward(graph: MeshGraph, params: ModelParams, model: AuxiliaryModel) -> np.ndarray:
    """Per-node complexity weights in (0, 1)."""
    return model.forward(graph, params)[0]


def build_aux_target(raw_loss: np.ndarray, graph: MeshGraph, steps: int = DEFAULT_DIFFUSION_STEPS) -> np.ndarray:
    # copy: the target never aliases main-model buffers
    return smooth_loss(np.array(raw_loss, dtype=np.float64), graph, steps).smoothed
