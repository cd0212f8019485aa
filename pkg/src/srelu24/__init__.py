"""CPU testbed for 2:4 activation sparsity in Squared-ReLU transformer FFNs:
compressed format, sparse GEMM kernels with exact-skip semantics, the split
and permutation optimizations, e4m3 quantization emulation, and a toy
training harness with the full ablation matrix.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
    MaskError,
    NonFiniteError,
    OrientationError,
    PrecisionError,
    StateError,
)
from .matcore import (
    E4M3_MAX,
    Fp8Rowwise,
    ORACLE,
    WORKING,
    as_matrix,
    e4m3_decode,
    e4m3_encode,
    fp8_dequantize,
    fp8_gemm_rowwise,
    fp8_quantize_rowwise,
    gemm,
    gemm_at,
    gemm_macs,
    inverse_permute_rows,
    make_permutation,
    permute_rows,
    read_matrix,
    write_matrix,
)
from .sparse24 import (
    FEATURE_WISE,
    Sparse24Matrix,
    SparsifyStats,
    TOKEN_WISE,
    apply_mask,
    compress_token_wise_with_mask,
    decompress,
    read_sparse,
    sp_gemm,
    sp_gemm_macs,
    sp_gemm_t,
    sparsify_feature_wise,
    sparsify_feature_wise_masked,
    sparsify_token_wise,
    write_sparse,
)
from .splitgemm import (
    SplitPlan,
    column_nonzero_counts,
    partition_features,
    split_gemm_macs,
    split_gemm_t,
)
from .ffn import (
    FfnCache,
    FfnConfig,
    FfnGrads,
    FfnParams,
    act_squared_relu,
    act_squared_relu_grad,
    act_swiglu,
    ffn_backward,
    ffn_forward,
    grad_check,
    swish,
)
from .train import (
    ABLATION_ROWS,
    AblationResult,
    MetricsRecord,
    ToyModel,
    ToyModelConfig,
    TrainConfig,
    ablate,
    adamw_step,
    build_dataset,
    evaluate,
    measure_activation_sparsity,
    metrics_to_csv,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
