"""Dense tensor helpers shared by every other module.

Tensors are plain numpy arrays (float32 by default, NCHW for activations,
KCRS for convolution weights). This module adds the few statistics and the
reference convolution that the rest of the package is checked against, plus
the ``ABCT`` on-disk format.
"""
from __future__ import annotations

import math
import struct
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TENSOR_MAGIC = b"ABCT"
DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class FormatError(ValueError):
    """Raised when a binary artifact cannot be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def mean(t) -> float:
    """Arithmetic mean, exactly rounded, and clamped to [min, max].

    The clamp makes the mean of a constant tensor equal to that constant,
    so centering a constant tensor gives exact zeros.
    """
    x = np.asarray(t, dtype=np.float64).ravel()
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    m = math.fsum(x) / x.size
    return float(min(max(m, x.min()), x.max()))


def std(t) -> float:
    """Population standard deviation (divides by the element count)."""
    x = np.asarray(t, dtype=np.float64).ravel()
    if x.size == 0:
        raise ShapeError("std of an empty tensor")
    d = x - mean(x)
    return math.sqrt(math.fsum(d * d) / x.size)


def vec(t) -> np.ndarray:
    return np.asarray(t).reshape(-1)


def _pair(v) -> tuple[int, int]:
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def pad2d(x: np.ndarray, padding, value: float = 0.0) -> np.ndarray:
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv_output_size(h: int, w: int, kh: int, kw: int, stride, padding) -> tuple[int, int]:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def windows(x: np.ndarray, kh: int, kw: int, stride) -> np.ndarray:
    """Strided view of shape (N, OH, OW, C, KH, KW) over an already padded input."""
    sh, sw = _pair(stride)
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, H', W', KH, KW
    v = v[:, :, ::sh, ::sw]
    return v.transpose(0, 2, 3, 1, 4, 5)


def check_conv_shapes(in_dims, w_dims, stride, padding) -> tuple[int, int]:
    if len(in_dims) != 4 or len(w_dims) != 4:
        raise ShapeError(f"conv expects rank-4 input and weights, got {tuple(in_dims)} and {tuple(w_dims)}")
    n, c, h, w = in_dims
    k, cw, kh, kw = w_dims
    if c != cw:
        raise ShapeError(f"channel mismatch: input {tuple(in_dims)} vs weights {tuple(w_dims)}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    oh, ow = conv_output_size(h, w, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"empty output for input {tuple(in_dims)} and weights {tuple(w_dims)}")
    return oh, ow


def conv2d_ref(inputs, weights, stride=1, padding=0, pad_value: float = 0.0) -> np.ndarray:
    """Reference cross-correlation without bias, accumulated in float64.

    Output dims are (batch, out_ch, oh, ow); the result dtype follows the
    operands. ``pad_value`` lets binary callers pad with -1 instead of 0.
    """
    x = np.asarray(inputs)
    w = np.asarray(weights)
    check_conv_shapes(x.shape, w.shape, stride, padding)
    out_dtype = np.result_type(x.dtype, w.dtype, np.float32)
    xp = pad2d(x.astype(np.float64), padding, pad_value)
    cols = windows(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(cols, w.astype(np.float64), axes=([3, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2).astype(out_dtype)


# -- ABCT serialization ------------------------------------------------------

def write_tensor(f: BinaryIO, t) -> None:
    a = np.ascontiguousarray(t, dtype="<f4")
    if a.ndim == 0:
        a = a.reshape(1)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    pos = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated data: wanted {n} bytes, got {len(data)}", pos)
    return data


def read_tensor(f: BinaryIO) -> np.ndarray:
    pos = f.tell()
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic, expected ABCT", pos)
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    if rank < 1 or rank > 4:
        raise FormatError(f"unsupported tensor rank {rank}", pos + 4)
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    if min(dims) < 1:
        raise FormatError(f"tensor extents must be >= 1, got {dims}", pos + 8)
    count = math.prod(dims)
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.reshape(dims).astype(DTYPE)


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        t = read_tensor(f)
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after tensor", f.tell() - 1)
    return t
