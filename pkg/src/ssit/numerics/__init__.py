from .optim import AdamWState, adamw_step, adamw_update, init_adamw
from .serialize import (
    CorruptRecordError,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint_file,
    save_checkpoint_file,
    tensor_from_bytes,
    tensor_to_bytes,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clamp,
    concat,
    default_dtype,
    div,
    exp,
    gather_rows,
    gelu,
    get_default_dtype,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
