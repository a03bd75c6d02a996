from .layers import QuantState, QuantContext, RowLevels, gelu, sigmoid
from .optim import AdamConfig, AdamState, adam_step, lr_schedule, clip_by_global_norm
from .mpnn import (
    MPNN, MPNNConfig, ModelParams, NodeLoss,
    mpnn_layer_forward, mp_pde_forward, per_node_loss, backward_gradients, mse_gradient, relative_l2,
)
