from .container import ContainerError, read_arrays, write_arrays
from .gradcheck import GradCheckReport, grad_check
from .params import CHECKPOINT_MAGIC, ParamStore
from .tensor import (NonFiniteError, Tape, Tensor, active_tape, backward,
                     bce_loss, clip, concat, constant, div, exp, forward_record,
                     getitem, layer_norm, log, matmul, maximum, mean,
                     minimum, mul, pad, recording, reshape, scatter_add,
                     sigmoid, silu, softmax, softplus, sqrt, stack, sum_,
                     tanh, tensor, transpose, where)

__all__ = [
    "ContainerError", "read_arrays", "write_arrays",
    "GradCheckReport", "grad_check",
    "CHECKPOINT_MAGIC", "ParamStore",
    "NonFiniteError", "Tape", "Tensor", "active_tape", "backward", "bce_loss",
    "clip", "concat", "constant", "div", "exp", "forward_record",
    "getitem", "layer_norm", "log", "matmul", "maximum", "mean",
    "minimum", "mul", "pad", "recording", "reshape", "scatter_add",
    "sigmoid", "silu", "softmax", "softplus", "sqrt", "stack", "sum_",
    "tanh", "tensor", "transpose", "where",
]
