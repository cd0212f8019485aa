"""The 2:4 compressed format and its kernels.

A tensor is 2:4 sparse when every aligned group of 4 consecutive values
holds at most 2 nonzeros. Groups run along rows ("token" orientation,
accelerating A@B) or down columns ("feature" orientation, accelerating
A^T@B). Sparsification keeps the 2 largest magnitudes per group, ties going
to the lower in-group index; groups with fewer than 2 nonzeros are padded
with the lowest-index zero positions so the format always stores exactly 2
slots per group.

The sparse GEMMs visit kept entries in ascending reduction order, which
makes them bitwise equal to the dense kernels whenever nothing was dropped
(skipping a zero product never changes an IEEE-754 accumulator).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, MaskError, OrientationError, PrecisionError
from .matcore import WORKING, _check_operand, gemm_macs

TOKEN_WISE = "token"
FEATURE_WISE = "feature"

SPARSE_MAGIC = b"S24C"
SPARSE_VERSION = 1


@dataclass(frozen=True)
class Sparse24Matrix:
    """Packed kept values plus 2-bit in-group positions.

    values/meta layout: [rows, cols//4, 2] for token orientation,
    [rows//4, cols, 2] for feature orientation; meta holds in-group offsets
    0..3 with meta[..., 0] < meta[..., 1].
    """

    rows: int
    cols: int
    orientation: str
    values: np.ndarray
    meta: np.ndarray

    @property
    def group_count(self) -> int:
        return self.rows * self.cols // 4


@dataclass(frozen=True)
class SparsifyStats:
    total_entries: int
    nonzeros_before: int
    nonzeros_after: int
    dropped: int
    sparsity_before: float
    dropped_fraction_of_nonzeros: float


def _make_stats(total: int, nz_before: int, nz_after: int) -> SparsifyStats:
    dropped = nz_before - nz_after
    return SparsifyStats(
        total_entries=total,
        nonzeros_before=nz_before,
        nonzeros_after=nz_after,
        dropped=dropped,
        sparsity_before=1.0 - nz_before / total if total else 0.0,
        dropped_fraction_of_nonzeros=dropped / nz_before if nz_before else 0.0,
    )


def _top2_stable(groups: np.ndarray, axis: int) -> np.ndarray:
    # stable sort on descending magnitude keeps the lower index on ties and
    # puts zero entries last, which is exactly the keep rule (incl. padding)
    order = np.argsort(-np.abs(groups), axis=axis, kind="stable")
    top2 = np.take(order, [0, 1], axis=axis)
    return np.sort(top2, axis=axis)


def sparsify_token_wise(a: np.ndarray):
    """Top-2-per-group along each row. Returns (compressed, mask, stats)."""
    _check_operand(a, "a")
    rows, cols = a.shape
    if cols % 4 != 0:
        raise DimensionError(f"token-wise groups need cols % 4 == 0, got {cols}")
    g = a.reshape(rows, cols // 4, 4)
    kept = _top2_stable(g, axis=2)
    values = np.take_along_axis(g, kept, axis=2)
    mask = np.zeros((rows, cols // 4, 4), dtype=bool)
    np.put_along_axis(mask, kept, True, axis=2)
    s = Sparse24Matrix(rows, cols, TOKEN_WISE, values, kept.astype(np.uint8))
    stats = _make_stats(a.size, int(np.count_nonzero(a)), int(np.count_nonzero(values)))
    return s, mask.reshape(rows, cols), stats


def sparsify_feature_wise(a: np.ndarray):
    """Top-2-per-group down each column. Returns (compressed, mask, stats)."""
    _check_operand(a, "a")
    rows, cols = a.shape
    if rows % 4 != 0:
        raise DimensionError(f"feature-wise groups need rows % 4 == 0, got {rows}")
    g = a.reshape(rows // 4, 4, cols)
    kept = _top2_stable(g, axis=1)  # [rows//4, 2, cols]
    values = np.take_along_axis(g, kept, axis=1)
    mask = np.zeros((rows // 4, 4, cols), dtype=bool)
    np.put_along_axis(mask, kept, True, axis=1)
    s = Sparse24Matrix(
        rows,
        cols,
        FEATURE_WISE,
        np.ascontiguousarray(values.transpose(0, 2, 1)),
        np.ascontiguousarray(kept.transpose(0, 2, 1)).astype(np.uint8),
    )
    stats = _make_stats(a.size, int(np.count_nonzero(a)), int(np.count_nonzero(values)))
    return s, mask.reshape(rows, cols), stats


def sparsify_feature_wise_masked(a: np.ndarray, fwd_mask: np.ndarray):
    """Zero entries outside fwd_mask, then sparsify feature-wise.

    Masked-out values are removed before the stats are taken: they were
    already dropped upstream and do not count as dropped here.
    """
    _check_operand(a, "a")
    if fwd_mask.shape != a.shape:
        raise DimensionError(
            f"mask shape {fwd_mask.shape} does not match matrix {a.shape}"
        )
    return sparsify_feature_wise(np.where(fwd_mask, a, a.dtype.type(0)))


def apply_mask(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match matrix {a.shape}")
    return np.where(mask, a, a.dtype.type(0))


def compress_token_wise_with_mask(a: np.ndarray, mask: np.ndarray) -> Sparse24Matrix:
    """Compress using a given token-wise 2:4 mask as the keep pattern.

    Exact (no selection, no dropping) as long as supp(a) is inside the mask;
    the mask must have exactly 2 set bits per group of 4.
    """
    _check_operand(a, "a")
    rows, cols = a.shape
    if mask.shape != a.shape or cols % 4 != 0:
        raise DimensionError(f"mask/matrix shapes unusable: {mask.shape} vs {a.shape}")
    mg = mask.reshape(rows, cols // 4, 4)
    if not np.all(mg.sum(axis=2) == 2):
        raise MaskError("mask must set exactly 2 bits per group of 4")
    kept = np.argsort(~mg, axis=2, kind="stable")[:, :, :2]
    kept = np.sort(kept, axis=2)
    values = np.take_along_axis(a.reshape(rows, cols // 4, 4), kept, axis=2)
    return Sparse24Matrix(rows, cols, TOKEN_WISE, values, kept.astype(np.uint8))


def decompress(s: Sparse24Matrix) -> np.ndarray:
    """Dense matrix with kept values at their positions, zeros elsewhere."""
    if s.orientation == TOKEN_WISE:
        g = np.zeros((s.rows, s.cols // 4, 4), dtype=s.values.dtype)
        np.put_along_axis(g, s.meta.astype(np.int64), s.values, axis=2)
        return g.reshape(s.rows, s.cols)
    g = np.zeros((s.rows // 4, 4, s.cols), dtype=s.values.dtype)
    np.put_along_axis(
        g, s.meta.astype(np.int64).transpose(0, 2, 1), s.values.transpose(0, 2, 1), axis=1
    )
    return g.reshape(s.rows, s.cols)


def sp_gemm(s: Sparse24Matrix, b: np.ndarray) -> np.ndarray:
    """Token-wise sparse times dense: bitwise equal to gemm(decompress(s), b).

    Executes exactly rows*cols*n/2 multiply-accumulates: 2 per group instead
    of 4.
    """
    if s.orientation != TOKEN_WISE:
        raise OrientationError("sp_gemm needs a token-wise operand")
    _check_operand(b, "b")
    if s.values.dtype != b.dtype:
        raise PrecisionError(f"operand precisions differ: {s.values.dtype} vs {b.dtype}")
    if s.cols != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {s.rows}x{s.cols} x {b.shape}")
    n = b.shape[1]
    out = np.zeros((s.rows, n), dtype=b.dtype)
    tmp = np.empty((s.rows, n), dtype=b.dtype)
    meta = s.meta.astype(np.int64)
    for g in range(s.cols // 4):
        base = 4 * g
        for slot in (0, 1):
            np.multiply(s.values[:, g, slot, None], b[base + meta[:, g, slot]], out=tmp)
            out += tmp
    return out


def sp_gemm_t(s: Sparse24Matrix, b: np.ndarray) -> np.ndarray:
    """Feature-wise sparse A as A^T @ B: bitwise equal to gemm_at(decompress(s), b).

    Reduction runs over tokens; executes rows*cols*n/2 MACs.
    """
    if s.orientation != FEATURE_WISE:
        raise OrientationError("sp_gemm_t needs a feature-wise operand")
    _check_operand(b, "b")
    if s.values.dtype != b.dtype:
        raise PrecisionError(f"operand precisions differ: {s.values.dtype} vs {b.dtype}")
    if s.rows != b.shape[0]:
        raise DimensionError(f"reduction dimensions differ: {s.rows}x{s.cols} x {b.shape}")
    n = b.shape[1]
    out = np.zeros((s.cols, n), dtype=b.dtype)
    tmp = np.empty((s.cols, n), dtype=b.dtype)
    meta = s.meta.astype(np.int64)
    for g in range(s.rows // 4):
        base = 4 * g
        for slot in (0, 1):
            np.multiply(s.values[g, :, slot, None], b[base + meta[g, :, slot]], out=tmp)
            out += tmp
    return out


def sp_gemm_macs(rows: int, cols: int, n: int) -> int:
    """MACs executed by either sparse kernel: half the dense count."""
    return gemm_macs(rows, cols, n) // 2


# ---------------------------------------------------------------------------
# Compressed file format: magic "S24C", version u32, orientation u8 (0 token,
# 1 feature), rows u32, cols u32, then 2*groups float32 values in storage
# order and ceil(groups/2) metadata bytes. Each group packs its two 2-bit
# positions as i0 | (i1 << 2); two groups share a byte, lower group in the
# low nibble.
# ---------------------------------------------------------------------------


def write_sparse(path, s: Sparse24Matrix) -> None:
    if s.values.dtype != WORKING:
        raise PrecisionError("sparse files store working precision (float32) only")
    import struct

    orient = 0 if s.orientation == TOKEN_WISE else 1
    header = struct.pack("<4sIBII", SPARSE_MAGIC, SPARSE_VERSION, orient, s.rows, s.cols)
    nib = (s.meta[..., 0] | (s.meta[..., 1] << 2)).ravel().astype(np.uint8)
    if len(nib) % 2:
        nib = np.append(nib, np.uint8(0))
    packed = (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())
        f.write(packed.tobytes())


def read_sparse(path) -> Sparse24Matrix:
    import struct

    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 17:
        raise FormatError("file shorter than the 17-byte header", offset=len(blob))
    if blob[:4] != SPARSE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {SPARSE_MAGIC!r}", offset=0)
    _, version, orient, rows, cols = struct.unpack("<4sIBII", blob[:17])
    if version != SPARSE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if orient not in (0, 1):
        raise FormatError(f"unknown orientation byte {orient}", offset=8)
    orientation = TOKEN_WISE if orient == 0 else FEATURE_WISE
    if orientation == TOKEN_WISE and cols % 4 != 0:
        raise FormatError(f"token-wise file with cols = {cols}", offset=13)
    if orientation == FEATURE_WISE and rows % 4 != 0:
        raise FormatError(f"feature-wise file with rows = {rows}", offset=9)
    groups = rows * cols // 4
    values_bytes = 2 * groups * 4
    meta_bytes = (groups + 1) // 2
    if len(blob) != 17 + values_bytes + meta_bytes:
        raise FormatError(
            f"expected {17 + values_bytes + meta_bytes} bytes, got {len(blob)}",
            offset=len(blob),
        )
    if orientation == TOKEN_WISE:
        shape = (rows, cols // 4, 2)
    else:
        shape = (rows // 4, cols, 2)
    values = np.frombuffer(blob[17 : 17 + values_bytes], dtype="<f4")
    values = np.ascontiguousarray(values.reshape(shape), dtype=WORKING)
    packed = np.frombuffer(blob[17 + values_bytes :], dtype=np.uint8)
    nib = np.empty(2 * len(packed), dtype=np.uint8)
    nib[0::2] = packed & 0x0F
    nib[1::2] = packed >> 4
    nib = nib[:groups]
    meta = np.stack([nib & 0x3, (nib >> 2) & 0x3], axis=-1).reshape(shape).astype(np.uint8)
    if groups and not np.all(meta[..., 0] < meta[..., 1]):
        raise FormatError("metadata positions not strictly increasing", offset=17 + values_bytes)
    return Sparse24Matrix(rows, cols, orientation, values, meta)
