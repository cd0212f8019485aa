"""Squared-ReLU FFN with the 2:4 activation-sparsity recipe.

Forward is a staged pipeline: input GEMM, activation + token-wise
sparsification (+ optional 8-bit quantization of the kept values), then the
output GEMM on the compressed activation. Backward recomputes the
activation derivative from the cached pre-activation, constrains it to the
forward keep mask, and routes the two weight-gradient products through a
configurable kernel: exact dense, naive fresh feature-wise 2:4, or the
masked feature split. Six GEMMs run per forward+backward pair; in the full
recipe four of them execute on 2:4 operands.

A SwiGLU activation is available as the dense baseline; sparse modes are
defined only for Squared-ReLU.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import matcore
from .errors import ConfigError, DimensionError, PrecisionError, StateError
from .matcore import (
    fp8_gemm_rowwise,
    fp8_quantize_rowwise,
    gemm,
    gemm_at,
    gemm_macs,
    inverse_permute_rows,
    make_permutation,
    permute_rows,
)
from .sparse24 import (
    Sparse24Matrix,
    SparsifyStats,
    TOKEN_WISE,
    apply_mask,
    compress_token_wise_with_mask,
    decompress,
    sp_gemm,
    sp_gemm_macs,
    sp_gemm_t,
    sparsify_feature_wise,
    sparsify_token_wise,
)
from .splitgemm import (
    SplitPlan,
    column_nonzero_counts,
    partition_features,
    split_gemm_macs,
    split_gemm_t,
)

ACTIVATIONS = ("squared_relu", "swiglu")
FORWARD_MODES = ("dense", "sparse24")
BACKWARD_MODES = ("dense", "naive_sparse", "split_masked")


@dataclass(frozen=True)
class FfnConfig:
    activation: str = "squared_relu"
    forward_mode: str = "dense"
    backward_mode: str = "dense"
    mask_grad_with_fwd: bool = False
    permute_tokens: bool = False
    permute_seed: int = 0
    split_ratio: float = 0.95
    fp8_emulation: bool = False
    fp8_backward: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.forward_mode not in FORWARD_MODES:
            raise ConfigError(f"unknown forward_mode {self.forward_mode!r}")
        if self.backward_mode not in BACKWARD_MODES:
            raise ConfigError(f"unknown backward_mode {self.backward_mode!r}")
        sparse_any = (
            self.forward_mode != "dense"
            or self.backward_mode != "dense"
            or self.mask_grad_with_fwd
        )
        if sparse_any and self.activation != "squared_relu":
            raise ConfigError("sparse modes are defined only for squared_relu")
        if self.backward_mode != "dense" and self.forward_mode != "sparse24":
            raise ConfigError("sparse backward modes need the sparse forward")
        if self.mask_grad_with_fwd and self.forward_mode != "sparse24":
            raise ConfigError("mask_grad_with_fwd needs the sparse forward")
        if not 0.0 <= self.split_ratio <= 1.0:
            raise ConfigError(f"split_ratio must be in [0, 1], got {self.split_ratio}")
        if self.fp8_backward and not self.fp8_emulation:
            raise ConfigError("fp8_backward requires fp8_emulation")

    def densified(self) -> "FfnConfig":
        """Same config with every sparsity feature turned off (warmup form)."""
        return replace(
            self,
            forward_mode="dense",
            backward_mode="dense",
            mask_grad_with_fwd=False,
            permute_tokens=False,
        )


@dataclass(frozen=True)
class FfnParams:
    w1: np.ndarray  # [d, h]
    w2: np.ndarray  # [h, d]
    w3: np.ndarray | None = None  # [d, h], SwiGLU gate only
    beta: float = 1.0

    def __post_init__(self):
        d, h = self.w1.shape
        if self.w2.shape != (h, d):
            raise DimensionError(f"w2 shape {self.w2.shape} does not match w1 {self.w1.shape}")
        if h % 4 != 0:
            raise DimensionError(f"hidden width must be a multiple of 4, got {h}")
        if self.w3 is not None and self.w3.shape != (d, h):
            raise DimensionError(f"w3 shape {self.w3.shape} does not match w1 {self.w1.shape}")

    @property
    def model_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class GemmEvent:
    name: str
    sparse: bool
    macs: int


@dataclass
class FfnCache:
    """Everything the backward pass reads; nothing is recomputed from x."""

    x_in: np.ndarray  # block input in the compute (possibly permuted) frame
    pre_act: np.ndarray  # x_in @ w1
    fwd_mask: np.ndarray | None
    act_sparse: Sparse24Matrix | None  # token-wise compressed activation
    act_dense: np.ndarray | None  # dense activation (dense forward only)
    gate: np.ndarray | None  # x_in @ w3 (SwiGLU only)
    perm: np.ndarray | None
    plan: SplitPlan | None
    stats: SparsifyStats | None
    census: list[GemmEvent]
    config: FfnConfig


@dataclass
class FfnGrads:
    d_w1: np.ndarray
    d_w2: np.ndarray
    d_x: np.ndarray
    d_w3: np.ndarray | None = None
    census: list[GemmEvent] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def act_squared_relu(pre: np.ndarray) -> np.ndarray:
    r = np.maximum(pre, pre.dtype.type(0))
    return r * r


def act_squared_relu_grad(pre: np.ndarray) -> np.ndarray:
    return 2 * np.maximum(pre, pre.dtype.type(0))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def swish(pre: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return pre * _sigmoid(np.asarray(beta * pre))


def swish_grad(pre: np.ndarray, beta: float = 1.0) -> np.ndarray:
    s = _sigmoid(np.asarray(beta * pre))
    return s + beta * pre * s * (1 - s)


def act_swiglu(x: np.ndarray, p: FfnParams) -> np.ndarray:
    """swish(x @ w1) * (x @ w3), the gated dense-baseline activation."""
    if p.w3 is None:
        raise ConfigError("SwiGLU activation needs the gate weight w3")
    return swish(gemm(x, p.w1), p.beta) * gemm(x, p.w3)


# ---------------------------------------------------------------------------
# GEMM routing (dense / fp8-emulated variants share call sites)
# ---------------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray, fp8: bool) -> np.ndarray:
    if not fp8:
        return gemm(a, b)
    return fp8_gemm_rowwise(fp8_quantize_rowwise(a, "rows"), fp8_quantize_rowwise(b, "cols"))


def _mm_at(a: np.ndarray, b: np.ndarray, fp8: bool) -> np.ndarray:
    if not fp8:
        return gemm_at(a, b)
    qa = fp8_quantize_rowwise(a, "cols")  # output rows come from a's columns
    qb = fp8_quantize_rowwise(b, "cols")
    acc = gemm_at(matcore._E4M3_DECODE_F32[qa.codes], matcore._E4M3_DECODE_F32[qb.codes])
    return (qa.scales[:, None] * qb.scales[None, :]) * acc


def _quantize_sparse_values(s: Sparse24Matrix, axis: str):
    """Per-token (or per-feature) e4m3 quantization of the kept values.

    Returns the same structure with values snapped to the e4m3 grid plus the
    scale vector; scale * grid reproduces the emulated 8-bit storage.
    """
    v = s.values
    if v.size == 0:
        scales = np.ones(s.rows if axis == "rows" else s.cols, dtype=np.float32)
        return s, scales
    red = (1, 2) if axis == "rows" else (0, 2)
    amax = np.max(np.abs(v), axis=red).astype(np.float32)
    scales = np.where(amax > 0, amax / np.float32(matcore.E4M3_MAX), np.float32(1.0))
    scales = np.where(scales > 0, scales, np.float32(1.0))
    denom = scales[:, None, None] if axis == "rows" else scales[None, :, None]
    grid = matcore._E4M3_DECODE_F32[matcore.e4m3_encode(v / denom)]
    return Sparse24Matrix(s.rows, s.cols, s.orientation, grid, s.meta), scales


def _sp_mm(s: Sparse24Matrix, b: np.ndarray, fp8: bool) -> np.ndarray:
    if not fp8:
        return sp_gemm(s, b)
    sq, row_scales = _quantize_sparse_values(s, "rows")
    qb = fp8_quantize_rowwise(b, "cols")
    acc = sp_gemm(sq, matcore._E4M3_DECODE_F32[qb.codes])
    return (row_scales[:, None] * qb.scales[None, :]) * acc


def _sp_mm_t(s: Sparse24Matrix, b: np.ndarray, fp8: bool) -> np.ndarray:
    if not fp8:
        return sp_gemm_t(s, b)
    sq, col_scales = _quantize_sparse_values(s, "cols")
    qb = fp8_quantize_rowwise(b, "cols")
    acc = sp_gemm_t(sq, matcore._E4M3_DECODE_F32[qb.codes])
    return (col_scales[:, None] * qb.scales[None, :]) * acc


def _split_mm_t(a, mask, b, plan: SplitPlan, fp8: bool) -> np.ndarray:
    if not fp8:
        return split_gemm_t(a, mask, b, plan)
    am = apply_mask(a, mask)
    out = np.zeros((a.shape[1], b.shape[1]), dtype=a.dtype)
    if plan.sparse_features.size:
        s, _, _ = sparsify_feature_wise(np.ascontiguousarray(am[:, plan.sparse_features]))
        out[plan.sparse_features] = _sp_mm_t(s, b, True)
    if plan.dense_features.size:
        out[plan.dense_features] = _mm_at(np.ascontiguousarray(am[:, plan.dense_features]), b, True)
    return out


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def ffn_forward(x: np.ndarray, p: FfnParams, cfg: FfnConfig, plan: SplitPlan | None = None):
    """Run the staged forward pass; returns (out, cache).

    The cache carries the compute-frame input, the pre-activation, the keep
    mask, the compressed activation, the permutation and the split plan, so
    the backward pass never re-derives any selection.
    """
    matcore._check_operand(x, "x")
    n, d = x.shape
    if d != p.model_dim:
        raise DimensionError(f"input width {d} does not match w1 {p.w1.shape}")
    if (p.w3 is not None) != (cfg.activation == "swiglu"):
        raise ConfigError("gate weight w3 must be present exactly for swiglu")
    sparse_fwd = cfg.forward_mode == "sparse24"
    if sparse_fwd and n % 4 != 0:
        raise DimensionError(f"sparse modes need token count % 4 == 0, got {n}")

    census: list[GemmEvent] = []
    h = p.hidden_dim
    fp8 = cfg.fp8_emulation

    perm = None
    x_in = x
    if cfg.permute_tokens and sparse_fwd:
        # permutation only matters for feature-wise group statistics; dense
        # configs skip it entirely so outputs stay bitwise flag-invariant
        perm = make_permutation(cfg.permute_seed, n)
        x_in = permute_rows(x, perm)

    pre_act = _mm(x_in, p.w1, fp8)
    census.append(GemmEvent("fwd.pre_act", False, gemm_macs(n, d, h)))

    gate = None
    if cfg.activation == "swiglu":
        gate = _mm(x_in, p.w3, fp8)
        census.append(GemmEvent("fwd.gate", False, gemm_macs(n, d, h)))
        act = swish(pre_act, p.beta) * gate
    else:
        act = act_squared_relu(pre_act)

    plan_out = None
    if cfg.backward_mode == "split_masked":
        if plan is not None and plan.hidden_dim != h:
            raise DimensionError(f"plan built for {plan.hidden_dim} features, FFN has {h}")
        plan_out = plan if plan is not None else partition_features(
            column_nonzero_counts(act), cfg.split_ratio
        )

    fwd_mask = None
    act_sparse = None
    act_dense = None
    stats = None
    if sparse_fwd:
        s, fwd_mask, stats = sparsify_token_wise(act)
        if fp8:
            sq, row_scales = _quantize_sparse_values(s, "rows")
            qw2 = fp8_quantize_rowwise(p.w2, "cols")
            acc = sp_gemm(sq, matcore._E4M3_DECODE_F32[qw2.codes])
            out_c = (row_scales[:, None] * qw2.scales[None, :]) * acc
            # cache the dequantized activation: backward sees what an 8-bit
            # store would reproduce
            act_sparse = Sparse24Matrix(
                s.rows, s.cols, TOKEN_WISE, sq.values * row_scales[:, None, None], s.meta
            )
        else:
            out_c = sp_gemm(s, p.w2)
            act_sparse = s
        census.append(GemmEvent("fwd.out", True, sp_gemm_macs(n, h, d)))
    else:
        out_c = _mm(act, p.w2, fp8)
        census.append(GemmEvent("fwd.out", False, gemm_macs(n, h, d)))
        act_dense = act

    out = inverse_permute_rows(out_c, perm) if perm is not None else out_c
    cache = FfnCache(
        x_in=x_in,
        pre_act=pre_act,
        fwd_mask=fwd_mask,
        act_sparse=act_sparse,
        act_dense=act_dense,
        gate=gate,
        perm=perm,
        plan=plan_out,
        stats=stats,
        census=census,
        config=cfg,
    )
    return out, cache


def ffn_backward(g_out: np.ndarray, cache: FfnCache, p: FfnParams, cfg: FfnConfig) -> FfnGrads:
    """Six-GEMM backward matching the cached forward.

    Routing: the incoming-gradient GEMM is always dense; the two weight
    gradients follow cfg.backward_mode; the input gradient reuses the
    forward keep mask as an exact token-wise 2:4 pattern whenever the
    activation gradient was constrained to it, and runs dense otherwise.
    """
    if cache.config != cfg:
        raise StateError("cache was produced under a different configuration")
    n, d = cache.x_in.shape
    if g_out.shape != (n, d):
        raise StateError(f"gradient shape {g_out.shape} does not match cached input {(n, d)}")
    sparse_fwd = cfg.forward_mode == "sparse24"
    if sparse_fwd and cache.act_sparse is None:
        raise StateError("sparse forward cache is missing the compressed activation")
    if not sparse_fwd and cache.act_dense is None:
        raise StateError("dense forward cache is missing the activation")
    if cfg.backward_mode == "split_masked" and cache.plan is None:
        raise StateError("split backward needs the plan computed in forward")

    census: list[GemmEvent] = []
    h = p.hidden_dim
    fp8b = cfg.fp8_backward

    g_out_c = permute_rows(g_out, cache.perm) if cache.perm is not None else g_out
    w1t = np.ascontiguousarray(p.w1.T)
    w2t = np.ascontiguousarray(p.w2.T)

    g_act = _mm(g_out_c, w2t, fp8b)
    census.append(GemmEvent("bwd.d_act", False, gemm_macs(n, d, h)))

    if cfg.activation == "swiglu":
        sw = swish(cache.pre_act, p.beta)
        g_gate = g_act * sw
        g_pre = g_act * cache.gate * swish_grad(cache.pre_act, p.beta)
        d_w2 = _mm_at(cache.act_dense, g_out_c, fp8b)
        census.append(GemmEvent("bwd.d_w2", False, gemm_macs(h, n, d)))
        d_w1 = _mm_at(cache.x_in, g_pre, fp8b)
        census.append(GemmEvent("bwd.d_w1", False, gemm_macs(d, n, h)))
        d_w3 = _mm_at(cache.x_in, g_gate, fp8b)
        census.append(GemmEvent("bwd.d_w3", False, gemm_macs(d, n, h)))
        w3t = np.ascontiguousarray(p.w3.T)
        d_x = _mm(g_pre, w1t, fp8b)
        census.append(GemmEvent("bwd.d_x", False, gemm_macs(n, h, d)))
        d_x += _mm(g_gate, w3t, fp8b)
        census.append(GemmEvent("bwd.d_x_gate", False, gemm_macs(n, h, d)))
        return FfnGrads(d_w1=d_w1, d_w2=d_w2, d_x=d_x, d_w3=d_w3, census=census)

    g_pre = g_act * act_squared_relu_grad(cache.pre_act)
    if cfg.mask_grad_with_fwd:
        g_pre = apply_mask(g_pre, cache.fwd_mask)

    act_d = decompress(cache.act_sparse) if sparse_fwd else cache.act_dense

    if cfg.backward_mode == "dense":
        d_w2 = _mm_at(act_d, g_out_c, fp8b)
        census.append(GemmEvent("bwd.d_w2", False, gemm_macs(h, n, d)))
        d_w1 = _mm_at(cache.x_in, g_pre, fp8b)
        census.append(GemmEvent("bwd.d_w1", False, gemm_macs(d, n, h)))
    elif cfg.backward_mode == "naive_sparse":
        s2, _, _ = sparsify_feature_wise(act_d)
        d_w2 = _sp_mm_t(s2, g_out_c, fp8b)
        census.append(GemmEvent("bwd.d_w2", True, sp_gemm_macs(n, h, d)))
        s1, _, _ = sparsify_feature_wise(g_pre)
        d_w1 = np.ascontiguousarray(_sp_mm_t(s1, cache.x_in, fp8b).T)
        census.append(GemmEvent("bwd.d_w1", True, sp_gemm_macs(n, h, d)))
    else:  # split_masked
        plan = cache.plan
        d_w2 = _split_mm_t(act_d, cache.fwd_mask, g_out_c, plan, fp8b)
        census.append(GemmEvent("bwd.d_w2", True, split_gemm_macs(n, d, plan)))
        d_w1 = np.ascontiguousarray(_split_mm_t(g_pre, cache.fwd_mask, cache.x_in, plan, fp8b).T)
        census.append(GemmEvent("bwd.d_w1", True, split_gemm_macs(n, d, plan)))

    if cfg.mask_grad_with_fwd:
        # supp(g_pre) is inside the token-wise 2:4 mask, so this path is
        # exact: no selection, no dropping
        g_s = compress_token_wise_with_mask(g_pre, cache.fwd_mask)
        d_x_c = _sp_mm(g_s, w1t, fp8b)
        census.append(GemmEvent("bwd.d_x", True, sp_gemm_macs(n, h, d)))
    else:
        d_x_c = _mm(g_pre, w1t, fp8b)
        census.append(GemmEvent("bwd.d_x", False, gemm_macs(n, h, d)))

    d_x = inverse_permute_rows(d_x_c, cache.perm) if cache.perm is not None else d_x_c
    return FfnGrads(d_w1=d_w1, d_w2=d_w2, d_x=d_x, d_w3=None, census=census)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

_PROBE_SEED = 20240701


def grad_check(p: FfnParams, x: np.ndarray, cfg: FfnConfig, eps: float = 1e-5) -> float:
    """Worst relative error of ffn_backward against central differences.

    The probe loss is sum(out * R) for a fixed random R. The differenced
    function holds every forward selection fixed (mask, plan, permutation),
    matching the straight-through convention the backward implements.
    Requires oracle-precision inputs; meaningless under fp8 emulation.
    """
    if cfg.fp8_emulation:
        raise ConfigError("grad_check is undefined under fp8 emulation")
    if x.dtype != matcore.ORACLE or p.w1.dtype != matcore.ORACLE:
        raise PrecisionError("grad_check requires oracle precision inputs")

    out, cache = ffn_forward(x, p, cfg)
    rng = np.random.Generator(np.random.PCG64(_PROBE_SEED))
    probe = rng.standard_normal(out.shape)
    grads = ffn_backward(probe, cache, p, cfg)

    perm = cache.perm
    mask = cache.fwd_mask
    swiglu = cfg.activation == "swiglu"

    def loss(x_, w1_, w2_, w3_):
        if perm is not None:
            xq = np.empty_like(x_)
            xq[perm] = x_
        else:
            xq = x_
        pre = xq @ w1_
        if swiglu:
            act = swish(pre, p.beta) * (xq @ w3_)
        else:
            act = np.maximum(pre, 0.0) ** 2
            if mask is not None:
                act = np.where(mask, act, 0.0)
        o = act @ w2_
        if perm is not None:
            o = o[perm]
        return float(np.sum(o * probe))

    tensors = {"x": (x, grads.d_x), "w1": (p.w1, grads.d_w1), "w2": (p.w2, grads.d_w2)}
    if swiglu:
        tensors["w3"] = (p.w3, grads.d_w3)

    worst = 0.0
    for name, (base, analytic) in tensors.items():
        fd = np.zeros_like(base)
        pert = {k: t[0].copy() for k, t in tensors.items()}
        for idx in np.ndindex(base.shape):
            orig = pert[name][idx]
            pert[name][idx] = orig + eps
            up = loss(pert["x"], pert["w1"], pert["w2"], pert.get("w3"))
            pert[name][idx] = orig - eps
            down = loss(pert["x"], pert["w1"], pert["w2"], pert.get("w3"))
            pert[name][idx] = orig
            fd[idx] = (up - down) / (2 * eps)
        scale = max(float(np.max(np.abs(fd))), 1e-12)
        err = float(np.max(np.abs(analytic - fd))) / scale
        worst = max(worst, err)
    return worst
