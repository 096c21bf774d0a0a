"""Bit-packed {-1,+1} tensors and xnor/popcount convolution.

Encoding: +1 -> bit 1, -1 -> bit 0. Element i of the row-major flattening
sits in word i // 64 at bit i % 64 (LSB first); unused bits of the last word
are zero. Spatial padding of binary operands uses -1 (bit 0), which keeps
the +-1 algebra closed.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .activation import binarize, boundary
from .tensor import FormatError, ShapeError, check_conv_shapes, conv2d_ref, windows, _pair

BITPLANE_MAGIC = b"ABCB"
_ROW_CHUNK = 1 << 22  # max words touched per xnor/popcount block


class NonBinaryError(ValueError):
    pass


@dataclass(frozen=True)
class BitPlane:
    dims: tuple[int, ...]
    words: np.ndarray  # uint64
    pad_count: int

    @property
    def size(self) -> int:
        return math.prod(self.dims)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into little-endian uint64 words."""
    n = bits.shape[-1]
    nwords = max(1, -(-n // 64))
    packed = np.packbits(bits, axis=-1, bitorder="little")
    extra = nwords * 8 - packed.shape[-1]
    if extra:
        widths = [(0, 0)] * (packed.ndim - 1) + [(0, extra)]
        packed = np.pad(packed, widths)
    return np.ascontiguousarray(packed).view("<u8")


def _unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    b = np.unpackbits(np.ascontiguousarray(words, dtype="<u8").view(np.uint8), axis=-1, bitorder="little")
    return b[..., :n].astype(bool)


def pack(t) -> BitPlane:
    a = np.asarray(t)
    flat = a.reshape(-1)
    bad = np.flatnonzero((flat != 1) & (flat != -1))
    if bad.size:
        i = int(bad[0])
        where = tuple(int(j) for j in np.unravel_index(i, a.shape))
        raise NonBinaryError(f"element {i} (index {where}) is {flat[i].item()!r}, not +-1")
    words = _pack_bits(flat > 0)
    return BitPlane(tuple(a.shape), words, words.size * 64 - flat.size)


def unpack(bp: BitPlane) -> np.ndarray:
    bits = _unpack_bits(bp.words, bp.size)
    return np.where(bits, 1.0, -1.0).astype(np.float32).reshape(bp.dims)


def _tail_mask(n: int) -> np.ndarray:
    nwords = max(1, -(-n // 64))
    mask = np.full(nwords, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    if n % 64:
        mask[-1] = np.uint64((1 << (n % 64)) - 1)
    return mask


def xnor_dot(a: BitPlane, b: BitPlane) -> int:
    """+-1 inner product as 2 * popcount(xnor(a, b)) - n."""
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    x = ~(a.words ^ b.words) & _tail_mask(a.size)
    return 2 * int(np.bitwise_count(x).sum()) - a.size


# -- convolution -------------------------------------------------------------

def _im2row(bits: np.ndarray, kh: int, kw: int, stride, padding) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Boolean NCHW activations -> packed patch rows of shape (N*OH*OW, words)."""
    ph, pw = _pair(padding)
    if ph or pw:
        bits = np.pad(bits, ((0, 0), (0, 0), (ph, ph), (pw, pw)))  # False == -1
    cols = windows(bits, kh, kw, stride)
    n, oh, ow = cols.shape[:3]
    rows = cols.reshape(n * oh * ow, -1)
    return _pack_bits(rows), (n, oh, ow)


def _filter_rows(bp: BitPlane) -> np.ndarray:
    k = bp.dims[0]
    bits = _unpack_bits(bp.words, bp.size).reshape(k, -1)
    return _pack_bits(bits)


def _xnor_popcount(rows: np.ndarray, filters: np.ndarray, length: int) -> np.ndarray:
    """Integer dot products between every patch row and every filter row."""
    mask = _tail_mask(length)
    p, w = rows.shape
    k = filters.shape[0]
    out = np.empty((p, k), dtype=np.int32)
    chunk = max(1, _ROW_CHUNK // max(1, k * w))
    for s in range(0, p, chunk):
        x = ~(rows[s:s + chunk, None, :] ^ filters[None, :, :]) & mask
        pop = np.bitwise_count(x).sum(axis=-1, dtype=np.int32)
        out[s:s + chunk] = 2 * pop - length
    return out


def _activation_bits(inp) -> tuple[np.ndarray, tuple[int, ...]]:
    if isinstance(inp, BitPlane):
        return _unpack_bits(inp.words, inp.size).reshape(inp.dims), inp.dims
    a = np.asarray(inp, dtype=bool)
    return a, a.shape


def binconv2d(inputs: BitPlane, weights: BitPlane, stride=1, padding=0) -> np.ndarray:
    """Integer-exact convolution of packed +-1 operands, padding with -1."""
    oh, ow = check_conv_shapes(inputs.dims, weights.dims, stride, padding)
    bits, dims = _activation_bits(inputs)
    _, c, kh, kw = weights.dims
    rows, (n, oh, ow) = _im2row(bits, kh, kw, stride, padding)
    dots = _xnor_popcount(rows, _filter_rows(weights), c * kh * kw)
    return dots.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)


def approx_conv(
    input_planes: Sequence[BitPlane],
    betas,
    weight_planes: Sequence[BitPlane],
    alphas,
    stride=1,
    padding=0,
) -> np.ndarray:
    """sum_m sum_n alpha_m beta_n binconv2d(A_n, B_m), accumulated in float64.

    ``alphas`` is (M,) for whole-tensor bases or (c_out, M) for channel-wise
    ones. The M*N partial convolutions are independent; they are summed in
    fixed (m, n) order so the result is reproducible.
    """
    betas = np.asarray(betas, dtype=np.float64).reshape(-1)
    alphas = np.asarray(alphas, dtype=np.float64)
    M, N = len(weight_planes), len(input_planes)
    if betas.size != N or alphas.shape[-1] != M:
        raise ShapeError(f"{N} activations/{betas.size} betas, {M} bases/{alphas.shape} alphas")
    dims = weight_planes[0].dims
    for bp in weight_planes:
        if bp.dims != dims:
            raise ShapeError(f"weight bases of different dims {dims} and {bp.dims}")
    _, c, kh, kw = dims
    filt = np.concatenate([_filter_rows(bp) for bp in weight_planes])  # (M*K, words)
    K = dims[0]
    if alphas.ndim == 1:
        scale = np.broadcast_to(alphas[:, None], (M, K))
    else:
        scale = alphas.T  # (M, K)
    out = None
    for n_idx, plane in enumerate(input_planes):
        oh, ow = check_conv_shapes(plane.dims, dims, stride, padding)
        bits, _ = _activation_bits(plane)
        rows, (nb, oh, ow) = _im2row(bits, kh, kw, stride, padding)
        dots = _xnor_popcount(rows, filt, c * kh * kw).reshape(-1, M, K)
        if out is None:
            out = np.zeros((dots.shape[0], K))
        for m in range(M):
            out += (betas[n_idx] * scale[m]) * dots[:, m, :]
    return out.reshape(nb, oh, ow, K).transpose(0, 3, 1, 2)


# -- batch-norm folding --------------------------------------------------------

@dataclass(frozen=True)
class FoldedThreshold:
    """Per-channel comparator: +1 iff R >= tau (polarity +1) or R <= tau (polarity -1)."""

    thresholds: np.ndarray
    polarity: np.ndarray


def bn_apply(R, a, b) -> np.ndarray:
    """Run-time batch norm as a per-channel affine map (channel axis 1)."""
    R = np.asarray(R, dtype=np.float64)
    shape = (1, -1) + (1,) * (R.ndim - 2)
    return np.asarray(a, dtype=np.float64).reshape(shape) * R + np.asarray(b, dtype=np.float64).reshape(shape)


def fold_bn_threshold(a, b, v: float) -> FoldedThreshold:
    """Fold ``binarize(a*R + b, v)`` into one comparator constant per channel.

    The constant is (0.5 - v - b) / a, corrected to the exact float64
    boundary of the unfolded computation so the two agree bit for bit.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if np.any(a == 0):
        raise ValueError(f"zero batch-norm scale in channel(s) {np.flatnonzero(a == 0).tolist()}")
    polarity = np.where(a > 0, 1, -1).astype(np.int8)

    # for a < 0, search over r = -R where the predicate is non-decreasing;
    # a * (-r) rounds exactly like a * R, so the boundary carries over
    def fires(r):
        with np.errstate(over="ignore", invalid="ignore"):
            return binarize(np.where(polarity > 0, a * r, a * -r) + b, v) > 0

    t = boundary(fires, polarity * (0.5 - v - b) / a)
    return FoldedThreshold(polarity * t, polarity)


def apply_folded(R, f: FoldedThreshold) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim < 2 or R.shape[1] != f.thresholds.size:
        raise ShapeError(f"input dims {R.shape} do not match {f.thresholds.size} folded channels")
    shape = (1, -1) + (1,) * (R.ndim - 2)
    t = f.thresholds.reshape(shape)
    pos = f.polarity.reshape(shape) > 0
    fire = np.where(pos, R >= t, R <= t)
    return np.where(fire, 1.0, -1.0)


# -- serialization -------------------------------------------------------------

def write_bitplane(f: BinaryIO, bp: BitPlane) -> None:
    f.write(BITPLANE_MAGIC)
    f.write(struct.pack("<I", len(bp.dims)))
    f.write(struct.pack(f"<{len(bp.dims)}I", *bp.dims))
    f.write(struct.pack("<Q", bp.words.size))
    f.write(np.ascontiguousarray(bp.words, dtype="<u8").tobytes())


def read_bitplane(f: BinaryIO) -> BitPlane:
    pos = f.tell()
    head = f.read(8)
    if len(head) != 8 or head[:4] != BITPLANE_MAGIC:
        raise FormatError("bad bit-plane magic, expected ABCB", pos)
    (rank,) = struct.unpack("<I", head[4:])
    raw = f.read(4 * rank + 8)
    if rank < 1 or len(raw) != 4 * rank + 8:
        raise FormatError(f"truncated bit-plane header (rank {rank})", pos + 8)
    dims = struct.unpack(f"<{rank}I", raw[: 4 * rank])
    (nwords,) = struct.unpack("<Q", raw[4 * rank:])
    n = math.prod(dims)
    if nwords != max(1, -(-n // 64)):
        raise FormatError(f"word count {nwords} does not match {n} elements", pos + 8 + 4 * rank)
    body = f.read(8 * nwords)
    if len(body) != 8 * nwords:
        raise FormatError("truncated bit-plane words", pos + 16 + 4 * rank)
    words = np.frombuffer(body, dtype="<u8").astype(np.uint64)
    pad = nwords * 64 - n
    if pad and (int(words[-1]) >> (64 - pad)) != 0:
        raise FormatError("non-zero padding bits in bit plane", pos + 16 + 4 * rank + 8 * (nwords - 1))
    return BitPlane(tuple(dims), words, pad)


def save_bitplane(path, bp: BitPlane) -> None:
    with open(path, "wb") as f:
        write_bitplane(f, bp)


def load_bitplane(path) -> BitPlane:
    with open(path, "rb") as f:
        return read_bitplane(f)


def reference_binconv(inputs: BitPlane, weights: BitPlane, stride=1, padding=0) -> np.ndarray:
    """Float reference for ``binconv2d``: decode, pad with -1, conv2d_ref."""
    return conv2d_ref(unpack(inputs).astype(np.float64), unpack(weights).astype(np.float64),
                      stride, padding, pad_value=-1.0)


# -- static cost model -------------------------------------------------------------

COST_COLUMNS = ("layer", "kind", "M", "N", "weights", "binary_bits", "float_bits", "memory_ratio",
                "binconvs", "xnor_words", "float_mults", "float_mults_avoided")


def estimate_costs(spec) -> dict:
    """Per-layer and total storage and operation counts for a model description.

    A binarized conv stores M bits per weight instead of 32 and runs M*N
    binary convolutions, N being the size of the activation bank feeding it
    (1 for a real-valued input). Each binary convolution costs one
    xnor/popcount pass of ceil(c_in*kh*kw / 64) words per output value; the
    float multiplies left are the M*N alpha*beta scalings per output. With a
    real-valued input the M binary-weight convolutions need additions only.
    """
    from .config import ConfigError, infer_shapes

    problems: list[str] = []
    shapes = infer_shapes(spec, problems)
    if problems:
        raise ConfigError(problems)
    rows = []
    shape = tuple(spec.input_shape)
    bank = None
    first_conv = True
    for i, (ls, out_shape) in enumerate(zip(spec.layers, shapes)):
        row = None
        if ls.kind == "conv":
            M = ls.M if (spec.binarize_first or not first_conv) else None
            first_conv = False
            c_in = shape[0]
            weights = ls.out_channels * c_in * ls.kernel * ls.kernel
            outputs = math.prod(out_shape)
            mults = outputs * c_in * ls.kernel * ls.kernel
            if M is None:
                row = dict(M=0, N=bank or 0, weights=weights, binary_bits=0, float_bits=32 * weights,
                           memory_ratio=1.0, binconvs=0, xnor_words=0, float_mults=mults, float_mults_avoided=0)
            else:
                N = bank or 1
                words = -(-(c_in * ls.kernel * ls.kernel) // 64) if bank else 0
                left = M * N * outputs
                row = dict(M=M, N=N, weights=weights, binary_bits=M * weights, float_bits=32 * weights,
                           memory_ratio=32.0 / M, binconvs=M * N, xnor_words=M * N * outputs * words,
                           float_mults=left, float_mults_avoided=mults - left)
        elif ls.kind == "dense":
            weights = shape[0] * ls.units
            row = dict(M=0, N=0, weights=weights, binary_bits=0, float_bits=32 * weights, memory_ratio=1.0,
                       binconvs=0, xnor_words=0, float_mults=weights, float_mults_avoided=0)
        # only a binary activation directly feeding a conv yields packed operands
        bank = ls.N if ls.kind == "activation" else None
        if row is not None:
            rows.append({"layer": i, "kind": ls.kind, **row})
        shape = out_shape
    binary = [r for r in rows if r["binconvs"]]
    stored = sum(r["binary_bits"] or r["float_bits"] for r in rows)
    total = {
        "layers": len(rows),
        "binary_layers": len(binary),
        "weights": sum(r["weights"] for r in rows),
        "binary_bits": sum(r["binary_bits"] for r in binary),
        "float_bits": sum(r["float_bits"] for r in rows),
        "memory_ratio_binary_layers": (32.0 * sum(r["weights"] for r in binary) / sum(r["binary_bits"] for r in binary)
                                       if binary else 1.0),
        "memory_ratio_model": sum(r["float_bits"] for r in rows) / stored if stored else 1.0,
        "binconvs": sum(r["binconvs"] for r in rows),
        "xnor_words": sum(r["xnor_words"] for r in rows),
        "float_mults": sum(r["float_mults"] for r in rows),
        "float_mults_avoided": sum(r["float_mults_avoided"] for r in rows),
    }
    return {"layers": rows, "total": total}


def format_costs(report: dict) -> str:
    lines = []
    for r in report["layers"]:
        for key in COST_COLUMNS[2:]:
            value = r[key]
            lines.append(f"layer.{r['layer']}.{key}={value:g}" if isinstance(value, float)
                         else f"layer.{r['layer']}.{key}={value}")
    for key, value in report["total"].items():
        lines.append(f"total.{key}={value:g}" if isinstance(value, float) else f"total.{key}={value}")
    return "\n".join(lines) + "\n"


def costs_csv(report: dict) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_COLUMNS)
    for r in report["layers"]:
        w.writerow([r[c] for c in COST_COLUMNS])
    return buf.getvalue()
