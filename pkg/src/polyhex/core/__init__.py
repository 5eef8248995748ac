from . import tensor
from .gradcheck import GradCheckError, GradCheckReport, finite_diff_check
from .layers import (attention_probe, feed_forward, linear,
                     multi_head_attention, scaled_dot_attention)
from .params import ParameterStore, load_params, save_params
from .tensor import Tensor, layer_norm, no_grad

__all__ = [
    "Tensor", "no_grad", "tensor", "ParameterStore", "save_params", "load_params",
    "scaled_dot_attention", "multi_head_attention", "feed_forward", "linear",
    "layer_norm", "attention_probe", "finite_diff_check", "GradCheckReport",
    "GradCheckError",
]
