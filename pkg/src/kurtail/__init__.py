"""Kurtosis-driven rotation learning for low-bit quantization, desk scale."""

__version__ = "0.1.0"

from .linalg import (
    OrthogonalMatrix,
    fast_hadamard_transform,
    hadamard_matrix,
    matmul,
    qr_orthogonalize,
    random_orthogonal,
    randomized_hadamard,
)
from .quant import (
    QuantSpec,
    QuantizedTensor,
    SensitivityReport,
    dequantize,
    optimal_step_size,
    quant_mse,
    quantize,
    quantize_dequantize,
    rtn_quantize_weights,
    sensitivity,
)
from .stats import kurtosis, kurtosis_gradient, kurtosis_loss
from .manifold import CayleyState, cayley_adam_step, cayley_retract, cayley_sgd_step, skew_project
from .rotor import ActivationSet, ProxyNet, TrainConfig, proxy_forward, train_r1, train_r2
from .toyformer import (
    DecoderModel,
    ModelConfig,
    OnlineModes,
    QuantConfigSet,
    RotationSet,
    fold_rmsnorm,
    forward,
    fuse_rotations,
    invariance_report,
    random_model,
    rope_apply,
    success_rate,
)
from .gptq import HessianEstimate, collect_hessian, gptq_quantize
from .pipeline import RunConfig, run_end_to_end, run_sensitivity_experiment

__all__ = [
    "ActivationSet",
    "CayleyState",
    "DecoderModel",
    "HessianEstimate",
    "ModelConfig",
    "OnlineModes",
    "ProxyNet",
    "QuantConfigSet",
    "RotationSet",
    "RunConfig",
    "TrainConfig",
    "cayley_adam_step",
    "cayley_retract",
    "cayley_sgd_step",
    "collect_hessian",
    "fold_rmsnorm",
    "forward",
    "fuse_rotations",
    "gptq_quantize",
    "invariance_report",
    "proxy_forward",
    "random_model",
    "rope_apply",
    "run_end_to_end",
    "run_sensitivity_experiment",
    "skew_project",
    "success_rate",
    "train_r1",
    "train_r2",
    "OrthogonalMatrix",
    "QuantSpec",
    "QuantizedTensor",
    "SensitivityReport",
    "dequantize",
    "fast_hadamard_transform",
    "hadamard_matrix",
    "kurtosis",
    "kurtosis_gradient",
    "kurtosis_loss",
    "matmul",
    "optimal_step_size",
    "qr_orthogonalize",
    "quant_mse",
    "quantize",
    "quantize_dequantize",
    "random_orthogonal",
    "randomized_hadamard",
    "rtn_quantize_weights",
    "sensitivity",
]
