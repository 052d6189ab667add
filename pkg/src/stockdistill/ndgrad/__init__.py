"""Minimal dense-tensor engine with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .optim import Adam
from .tensor import (
    MAX_RANK,
    OP_REGISTRY,
    ComputeError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    batched_matmul,
    concat,
    constant,
    exp,
    gather_rows,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
)

__all__ = [
    "MAX_RANK", "OP_REGISTRY", "ComputeError", "ShapeError", "Tape", "TapeError",
    "Tensor", "add", "backward", "batched_matmul", "concat", "constant", "exp",
    "gather_rows", "leaky_relu", "log", "log_softmax", "matmul", "mul",
    "reduce_mean", "reduce_sum", "relu", "reshape", "scale", "sigmoid", "softmax",
    "sub", "tanh", "transpose",
    "Adam", "CheckpointError", "GradCheckReport", "grad_check", "grad_check_params",
    "load_checkpoint", "save_checkpoint",
]
