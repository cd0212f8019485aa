"""Dense matrix substrate: reference GEMMs with a fixed accumulation order,
e4m3 8-bit float emulation with row/column-wise scaling, seeded permutations,
and the bit-exact matrix file format.

Matrices are plain 2-D numpy arrays in one of two precisions: float32
("working") or float64 ("oracle"). Every reduction in this package runs in
ascending reduction-index order, rounding after each multiply and each add in
the operand precision. That order is a package-wide contract: adding a zero
product is an exact no-op in binary floating point, so kernels that skip
zeros (the 2:4 paths) reproduce the dense results bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    NonFiniteError,
    OrientationError,
    PrecisionError,
)

WORKING = np.float32
ORACLE = np.float64

_DTYPES = {np.dtype(np.float32): "working", np.dtype(np.float64): "oracle"}

MATRIX_MAGIC = b"S24M"
MATRIX_VERSION = 1


def as_matrix(data, precision: str = "working") -> np.ndarray:
    """Validating constructor: 2-D, finite, contiguous, in the given precision."""
    if precision == "working":
        dtype = WORKING
    elif precision == "oracle":
        dtype = ORACLE
    else:
        raise PrecisionError(f"unknown precision {precision!r}")
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("matrix contains NaN or Inf")
    return arr


def precision_of(a: np.ndarray) -> str:
    name = _DTYPES.get(a.dtype)
    if name is None:
        raise PrecisionError(f"unsupported dtype {a.dtype}")
    return name


def _check_operand(a: np.ndarray, name: str) -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D array")
    if a.dtype not in _DTYPES:
        raise PrecisionError(f"{name} has unsupported dtype {a.dtype}")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    _check_operand(a, "a")
    _check_operand(b, "b")
    if a.dtype != b.dtype:
        raise PrecisionError(f"operand precisions differ: {a.dtype} vs {b.dtype}")


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[i,j] = sum_t a[i,t]*b[t,j], accumulated in ascending t order.

    Runs in the operand precision; the step-by-step rounding (not a BLAS
    call) is what makes sparse paths bit-comparable.
    """
    _check_pair(a, b)
    m, k = a.shape
    kb, n = b.shape
    if kb != k:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=a.dtype)
    tmp = np.empty((m, n), dtype=a.dtype)
    for t in range(k):
        np.multiply(a[:, t, None], b[t], out=tmp)
        out += tmp
    return out


def gemm_at(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c = a^T b without materializing the transpose; ascending row order.

    Bitwise equal to gemm(a.T, b): the reduction visits the same products in
    the same order.
    """
    _check_pair(a, b)
    k, m = a.shape
    kb, n = b.shape
    if kb != k:
        raise DimensionError(f"reduction dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=a.dtype)
    tmp = np.empty((m, n), dtype=a.dtype)
    for t in range(k):
        np.multiply(a[t, :, None], b[t], out=tmp)
        out += tmp
    return out


def gemm_macs(m: int, k: int, n: int) -> int:
    """Multiply-accumulate count of a dense m x k x n product."""
    return m * k * n


# ---------------------------------------------------------------------------
# e4m3 emulation
#
# 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. No infinities; the
# only NaN patterns are exponent and mantissa all ones (0x7F / 0xFF). Max
# finite value 448, smallest positive subnormal 2^-9. Encoding rounds to
# nearest with ties to even mantissa and saturates beyond +-448.
# ---------------------------------------------------------------------------

E4M3_MAX = 448.0
_E4M3_MIN_NORMAL = 2.0**-6
_E4M3_SUB_SCALE = 2.0**9  # 1 / subnormal step


def _build_decode_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 15 and man == 7:
            table[code] = np.nan
        elif exp == 0:
            table[code] = sign * man * 2.0**-9
        else:
            table[code] = sign * 2.0 ** (exp - 7) * (1.0 + man / 8.0)
    # preserve the sign of zero for the 0x80 pattern
    table[0x80] = -0.0
    return table


_E4M3_DECODE = _build_decode_table()
_E4M3_DECODE_F32 = _E4M3_DECODE.astype(np.float32)  # all values exact in f32


def e4m3_decode(code):
    """Exact value of an e4m3 bit pattern (scalar or array of uint8)."""
    codes = np.asarray(code, dtype=np.uint8)
    out = _E4M3_DECODE[codes]
    if np.isscalar(code) or codes.ndim == 0:
        return float(out)
    return out


def e4m3_encode(x):
    """Nearest e4m3 code for finite input; ties to even mantissa, saturating.

    Accepts a scalar or array; returns uint8 of the same shape.
    """
    xf = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(xf)):
        raise NonFiniteError("e4m3_encode requires finite input")
    scalar = xf.ndim == 0
    xf = np.atleast_1d(xf)
    sign = np.signbit(xf)
    ax = np.abs(xf)

    # round the magnitude onto the e4m3 grid
    q = np.empty_like(ax)
    sub = ax < _E4M3_MIN_NORMAL
    q[sub] = np.round(ax[sub] * _E4M3_SUB_SCALE) / _E4M3_SUB_SCALE
    norm = ~sub
    if np.any(norm):
        an = ax[norm]
        _, e2 = np.frexp(an)  # an = m * 2^e2, m in [0.5, 1)
        p = e2 - 1
        steps = np.round(np.ldexp(an, 3 - p))  # in [8, 16]; 16 rolls the exponent
        q[norm] = np.ldexp(steps, p - 3)
    np.minimum(q, E4M3_MAX, out=q)  # saturate |x| > 448 (and 15.5-step roll at p=8)

    # derive the bit pattern from the grid value
    codes = np.zeros(ax.shape, dtype=np.uint8)
    nz = q > 0
    qsub = nz & (q < _E4M3_MIN_NORMAL)
    codes[qsub] = np.round(q[qsub] * _E4M3_SUB_SCALE).astype(np.uint8)
    qnorm = q >= _E4M3_MIN_NORMAL
    if np.any(qnorm):
        qn = q[qnorm]
        _, e2 = np.frexp(qn)
        p = e2 - 1
        man = np.round(np.ldexp(qn, 3 - p)).astype(np.int64) - 8
        codes[qnorm] = (((p + 7) << 3) | man).astype(np.uint8)
    codes |= np.where(sign, np.uint8(0x80), np.uint8(0))
    if scalar:
        return codes[0]
    return codes


@dataclass(frozen=True)
class Fp8Rowwise:
    """e4m3-coded matrix with one positive scale per row or per column."""

    rows: int
    cols: int
    codes: np.ndarray  # uint8, [rows, cols]
    scales: np.ndarray  # float32, [rows] if axis == "rows" else [cols]
    axis: str  # "rows" | "cols"


def fp8_quantize_rowwise(a: np.ndarray, axis: str = "rows") -> Fp8Rowwise:
    """Quantize to e4m3 with per-row (or per-column) amax/448 scaling.

    All-zero slices get scale 1 so dequantization never divides by zero.
    """
    _check_operand(a, "a")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("quantization requires finite input")
    if axis not in ("rows", "cols"):
        raise OrientationError(f"axis must be 'rows' or 'cols', got {axis!r}")
    rows, cols = a.shape
    red = 1 if axis == "rows" else 0
    if a.shape[red] == 0:
        amax = np.zeros(a.shape[1 - red], dtype=np.float32)
    else:
        amax = np.max(np.abs(a), axis=red).astype(np.float32)
    scales = np.where(amax > 0, amax / np.float32(E4M3_MAX), np.float32(1.0))
    # amax below ~6e-43 underflows the division; such values quantize to zero
    # codes regardless, so a unit scale is safe and keeps scales positive.
    scales = np.where(scales > 0, scales, np.float32(1.0))
    denom = scales[:, None] if axis == "rows" else scales[None, :]
    codes = e4m3_encode(a / denom).reshape(rows, cols)
    return Fp8Rowwise(rows, cols, codes, scales, axis)


def fp8_dequantize(q: Fp8Rowwise) -> np.ndarray:
    """Apply scales to the decoded codes; float32 result."""
    vals = _E4M3_DECODE_F32[q.codes]
    if q.axis == "rows":
        return vals * q.scales[:, None]
    return vals * q.scales[None, :]


def fp8_gemm_rowwise(a: Fp8Rowwise, b: Fp8Rowwise) -> np.ndarray:
    """c[i,j] = scaleA[i] * scaleB[j] * sum_t decode(a[i,t]) * decode(b[t,j]).

    The sum runs on the decoded (unscaled) values in float32, ascending t;
    scales are applied outside the reduction.
    """
    if a.axis != "rows":
        raise OrientationError("first operand must carry per-row scales")
    if b.axis != "cols":
        raise OrientationError("second operand must carry per-column scales")
    if a.cols != b.rows:
        raise DimensionError(
            f"inner dimensions differ: {a.rows}x{a.cols} x {b.rows}x{b.cols}"
        )
    acc = gemm(_E4M3_DECODE_F32[a.codes], _E4M3_DECODE_F32[b.codes])
    return (a.scales[:, None] * b.scales[None, :]) * acc


# ---------------------------------------------------------------------------
# Token permutations
# ---------------------------------------------------------------------------


def make_permutation(seed: int, n: int) -> np.ndarray:
    """Fisher-Yates shuffle of [0, n) driven by a seeded PCG64 stream.

    Both the generator and the swap order are fixed, so a (seed, n) pair
    yields the same permutation on every platform.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    p = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        p[i], p[j] = p[j], p[i]
    return p


def _check_permutation(a: np.ndarray, p: np.ndarray) -> None:
    _check_operand(a, "a")
    if p.ndim != 1 or len(p) != a.shape[0]:
        raise DimensionError(
            f"permutation of size {p.shape} cannot act on {a.shape[0]} rows"
        )


def permute_rows(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    """out[p[i], :] = a[i, :]."""
    _check_permutation(a, p)
    out = np.empty_like(a)
    out[p] = a
    return out


def inverse_permute_rows(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Undo permute_rows: out[i, :] = a[p[i], :]."""
    _check_permutation(a, p)
    return a[p]


def compose_permutations(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Permutation equivalent to applying p first, then q."""
    return q[p]


# ---------------------------------------------------------------------------
# Matrix file format: magic "S24M", version u32, rows u32, cols u32, then
# rows*cols little-endian IEEE-754 float32 values, row-major. No padding.
# ---------------------------------------------------------------------------

_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("rows", "<u4"), ("cols", "<u4")])


def write_matrix(path, a: np.ndarray) -> None:
    """Write a working-precision matrix; round-trips bit for bit."""
    _check_operand(a, "a")
    if a.dtype != WORKING:
        raise PrecisionError("matrix files store working precision (float32) only")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix contains NaN or Inf")
    rows, cols = a.shape
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = MATRIX_MAGIC
    header["version"] = MATRIX_VERSION
    header["rows"] = rows
    header["cols"] = cols
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError("file shorter than the 16-byte header", offset=len(blob))
    if blob[:4] != MATRIX_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MATRIX_MAGIC!r}", offset=0)
    header = np.frombuffer(blob[:16], dtype=_HEADER)[0]
    if header["version"] != MATRIX_VERSION:
        raise FormatError(f"unsupported version {header['version']}", offset=4)
    rows, cols = int(header["rows"]), int(header["cols"])
    expected = rows * cols * 4
    if len(blob) - 16 < expected:
        raise FormatError(
            f"payload truncated: need {expected} bytes for {rows}x{cols}",
            offset=len(blob),
        )
    if len(blob) - 16 > expected:
        raise FormatError("trailing bytes after payload", offset=16 + expected)
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(rows, cols)
    data = np.ascontiguousarray(data, dtype=WORKING)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError("non-finite value in payload", offset=16 + 4 * first)
    return data
