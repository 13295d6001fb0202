"""Bit-packed {-1,+1} tensors and XNOR+popcount linear algebra.

A +-1 vector of length n packs into ceil(n/64) machine words: bit i of
word j holds element j*64+i, bit 1 encodes +1 and bit 0 encodes -1, and
pad bits beyond the logical length are zero. The inner product of two
packed rows is then n - 2*popcount(a XOR b), exactly.

Kernels are numba-compiled around an llvm.ctpop intrinsic, which lowers to
the hardware popcount instruction (vectorized where the CPU supports it).
"""

from dataclasses import dataclass

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

WORD_BITS = 64


@intrinsic
def _ctpop64(typingctx, src):
    """Population count of a uint64 via the LLVM ctpop intrinsic."""
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        ctpop = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(ctpop, args)

    return sig, codegen


@dataclass(frozen=True)
class PackedBitTensor:
    """Bit-packed +-1 tensor; the innermost logical dimension is packed."""

    logical_shape: tuple[int, ...]
    words: np.ndarray    # uint64, shape = outer dims + (ceil(inner/64),)

    def __post_init__(self):
        inner = self.logical_shape[-1]
        expected = self.logical_shape[:-1] + (words_for(inner),)
        if self.words.shape != expected:
            raise ValueError(
                f"word array shape {self.words.shape} does not match logical "
                f"shape {self.logical_shape} (expected {expected})")
        if self.words.dtype != np.uint64:
            raise ValueError("words must be uint64")

    @property
    def inner_length(self) -> int:
        return self.logical_shape[-1]


def words_for(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


def pack(t: np.ndarray) -> PackedBitTensor:
    """Pack a +-1 tensor along its innermost dimension.

    Rejects any element that is not exactly +1 or -1; binarize first.
    """
    t = np.asarray(t)
    if not np.all(np.abs(t) == 1):
        bad = t.flat[np.argmax(np.abs(t.ravel()) != 1)]
        raise ValueError(f"pack requires all elements +-1, found {bad!r}")
    bits = (t > 0).astype(np.uint8)
    inner = t.shape[-1]
    padded_len = words_for(inner) * WORD_BITS
    if padded_len != inner:
        pad = np.zeros(t.shape[:-1] + (padded_len - inner,), dtype=np.uint8)
        bits = np.concatenate([bits, pad], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view(np.uint64)
    return PackedBitTensor(logical_shape=t.shape, words=words)


def unpack(p: PackedBitTensor, dtype=np.float32) -> np.ndarray:
    """Inverse of :func:`pack`: exact +-1 tensor of the logical shape."""
    byte_view = p.words.view(np.uint8)
    bits = np.unpackbits(byte_view, axis=-1, bitorder="little")
    bits = bits[..., :p.inner_length]
    return (bits.astype(dtype) * 2 - 1)


def pad_bits_clean(p: PackedBitTensor) -> bool:
    """Word-mask audit: True iff every pad bit beyond the logical length
    is zero. Used as a debug-mode invariant check."""
    inner = p.inner_length
    rem = inner % WORD_BITS
    if rem == 0:
        return True
    mask = np.uint64(~np.uint64((1 << rem) - 1))
    last = p.words[..., -1]
    return bool(np.all(last & mask == 0))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _dot_words(a, b, n_logical):
    acc = np.uint64(0)
    for w in range(a.shape[0]):
        acc += _ctpop64(a[w] ^ b[w])
    return n_logical - 2 * np.int64(acc)


@njit(cache=True)
def _gemm_words(a, bt, n_logical, out):
    # a: (M, W) row-packed; bt: (W, N) column-major copy of the second
    # operand's rows, so the j loop is unit-stride and vectorizes.
    M, W = a.shape
    N = bt.shape[1]
    acc = np.empty(N, dtype=np.int64)
    for i in range(M):
        acc[:] = 0
        for w in range(W):
            aw = a[i, w]
            for j in range(N):
                acc[j] += np.int64(_ctpop64(aw ^ bt[w, j]))
        for j in range(N):
            out[i, j] = n_logical - 2 * acc[j]
    return out


@njit(cache=True)
def _gemm_words_x4(a, bt, n_logical, out):
    # 4-row unroll; faster when bt is large enough to stream from L2.
    M, W = a.shape
    N = bt.shape[1]
    acc0 = np.empty(N, dtype=np.int64)
    acc1 = np.empty(N, dtype=np.int64)
    acc2 = np.empty(N, dtype=np.int64)
    acc3 = np.empty(N, dtype=np.int64)
    i = 0
    while i + 4 <= M:
        acc0[:] = 0
        acc1[:] = 0
        acc2[:] = 0
        acc3[:] = 0
        for w in range(W):
            a0 = a[i, w]
            a1 = a[i + 1, w]
            a2 = a[i + 2, w]
            a3 = a[i + 3, w]
            for j in range(N):
                bw = bt[w, j]
                acc0[j] += np.int64(_ctpop64(a0 ^ bw))
                acc1[j] += np.int64(_ctpop64(a1 ^ bw))
                acc2[j] += np.int64(_ctpop64(a2 ^ bw))
                acc3[j] += np.int64(_ctpop64(a3 ^ bw))
        for j in range(N):
            out[i, j] = n_logical - 2 * acc0[j]
            out[i + 1, j] = n_logical - 2 * acc1[j]
            out[i + 2, j] = n_logical - 2 * acc2[j]
            out[i + 3, j] = n_logical - 2 * acc3[j]
        i += 4
    while i < M:
        for j in range(N):
            s = np.uint64(0)
            for w in range(W):
                s += _ctpop64(a[i, w] ^ bt[w, j])
            out[i, j] = n_logical - 2 * np.int64(s)
        i += 1
    return out


def gemm_packed_words(a_words: np.ndarray, b_words: np.ndarray,
                      n_logical: int) -> np.ndarray:
    """out[i, j] = +-1 dot product of row i of A and row j of B, given
    word arrays with identical pad conventions. Internal workhorse."""
    a = np.ascontiguousarray(a_words)
    bt = np.ascontiguousarray(b_words.T)
    out = np.empty((a.shape[0], b_words.shape[0]), dtype=np.int64)
    # the unrolled kernel wins once the weight matrix no longer fits L1
    if b_words.size * 8 > 32 * 1024 and a.shape[0] >= 8:
        _gemm_words_x4(a, bt, n_logical, out)
    else:
        _gemm_words(a, bt, n_logical, out)
    return out


# ---------------------------------------------------------------------------
# Public ops
# ---------------------------------------------------------------------------

def xnor_dot(a: PackedBitTensor, b: PackedBitTensor, n: int | None = None) -> int:
    """Exact integer dot product of two packed +-1 vectors."""
    if a.logical_shape != b.logical_shape or len(a.logical_shape) != 1:
        raise ValueError(
            f"xnor_dot expects equal-length packed vectors, got "
            f"{a.logical_shape} and {b.logical_shape}")
    if n is None:
        n = a.inner_length
    return int(_dot_words(a.words, b.words, n))


def xnor_gemm(a: PackedBitTensor, b: PackedBitTensor,
              k: int | None = None) -> np.ndarray:
    """Integer matrix with entry (i, j) = row_i(A) . row_j(B).

    Equals the float matmul of the unpacked +-1 matrices exactly,
    including non-multiple-of-64 inner lengths (pad bits are zero on both
    sides, so they never contribute).
    """
    if len(a.logical_shape) != 2 or len(b.logical_shape) != 2:
        raise ValueError("xnor_gemm expects 2-D packed operands")
    if a.logical_shape[1] != b.logical_shape[1]:
        raise ValueError(
            f"inner dims differ: {a.logical_shape} vs {b.logical_shape}")
    if k is None:
        k = a.inner_length
    return gemm_packed_words(a.words, b.words, k)
