from .quantizer import Quantizer, calibrate_maxabs, ema_update, quantize, dequantize, fake_quant
from .assign import BitAllocation, assign_quant, derive_edge_weights, derive_cluster_weights, allocate
from .graph import MeshGraph, LossField, build_knn_graph, normalize_loss, diffuse_loss
from .mixed_gemm import QuantizedLinear, mp_linear_basic, mp_linear_optimized, encode_segments, segment_scales
from .cost import CostReport, layer_mac_cost, model_cost_report
