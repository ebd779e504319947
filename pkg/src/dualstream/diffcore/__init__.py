from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    absolute,
    active_tape,
    add,
    atan2,
    backward,
    concat,
    cos,
    default_dtype,
    div,
    exp,
    fresh_tape,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    scale,
    set_default_dtype,
    sigmoid,
    sin,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
    use_dtype,
)
from .ops import (
    AttentionParams,
    DeformableParams,
    FeatureMap,
    MlpParams,
    PatchEmbedParams,
    bilinear_sample,
    deformable_attention,
    extract_patches,
    gelu,
    layernorm,
    linear,
    mlp,
    multi_head_attention,
    patch_embed,
    sincos_encoding,
    softmax,
)
from .check import finite_diff_check
from .dstn import (
    DstnError,
    DstnVersionError,
    read_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)
