from .layers import (
    BatchNorm,
    Bottleneck,
    Conv,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool,
    ReLU,
    Residual,
    Sigmoid,
    out_shape,
    to_module,
)
from .core import (
    ForwardContext,
    OptimizerConfig,
    Subnetwork,
    build_subnetwork,
    load_params,
    optimizer_step,
    save_params,
)
from .zoo import (
    SplitModel,
    arch_names,
    build_discriminator,
    build_split_model,
    build_surrogate,
    surrogate_arch_names,
)

__all__ = [
    "BatchNorm", "Bottleneck", "Conv", "Flatten", "GlobalAvgPool", "Linear",
    "MaxPool", "ReLU", "Residual", "Sigmoid", "out_shape", "to_module",
    "ForwardContext", "OptimizerConfig", "Subnetwork", "build_subnetwork",
    "load_params", "optimizer_step", "save_params",
    "SplitModel", "arch_names", "build_discriminator", "build_split_model",
    "build_surrogate", "surrogate_arch_names",
]
