from .params import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ParamStore,
    adam_step,
    add_layer_norm,
    add_linear,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    EmptyInputError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    layer_norm,
    linear,
    matmul,
    max_pool_points,
    mean_all,
    mse,
    mul,
    relu,
    reshape,
    sub,
    sum_all,
    take_rows,
)

__all__ = [
    "CHECKPOINT_MAGIC",
    "CheckpointError",
    "EmptyInputError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "add_layer_norm",
    "add_linear",
    "backward",
    "concat",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "max_pool_points",
    "mean_all",
    "mse",
    "mul",
    "relu",
    "reshape",
    "save_checkpoint",
    "sub",
    "sum_all",
    "take_rows",
]
