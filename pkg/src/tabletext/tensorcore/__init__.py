"""Float64 autodiff core: tensors, ops, parameters, Adam, checkpoints."""

from .tensor import (
    LAYER_NORM_EPS,
    Tensor,
    astensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    exp,
    gather_rows,
    grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean_pool,
    mul,
    neg,
    no_grad,
    pick,
    reduce_sum,
    relu,
    reshape,
    scatter_rows,
    sigmoid,
    slice_axis,
    softmax,
    softplus,
    sub,
    tanh,
    transpose_axes,
)
from .fused import decoder_loop
from .params import (
    ADAM_BETAS,
    ADAM_EPS,
    Parameter,
    ParamStore,
    adam_step,
    grad_check,
    init_bias,
    init_embedding,
    init_gain,
    init_matrix,
    param_rng,
)
from .checkpoint import (
    FORMAT_VERSION,
    config_digest,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
