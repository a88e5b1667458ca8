"""Backpropagation-free weight quantization for multi-head attention blocks."""

from .hessian import HessianFactors, LayerKind, build_all_factors, build_factors, dampen
from .linalg import NotPositiveDefinite, cholesky_lower, inverse_cholesky_upper, kron
from .model import (
    AttentionBlock,
    CalibrationSet,
    attention_recon_error,
    layer_recon_error,
    mha_forward,
)
from .quant import QuantConfig, QuantGrid, fit_row_scales, quantize_affine
from .solver import (
    QuantResult,
    boa_quantize_layer,
    gptq_core,
    prepare_head_factors,
    quantize_block,
    row_update,
    rtn_quantize,
)

__version__ = "0.1.0"
