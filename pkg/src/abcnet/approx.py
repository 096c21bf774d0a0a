"""Binary weight bases and their least-squares combination coefficients.

A real filter tensor W is approximated as ``sum_m alpha_m * B_m`` where every
``B_m = sign(W - mean(W) + u_m * std(W))`` is a {-1, +1} tensor and the
coefficients come from a small ridge-regularised normal-equation solve.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .tensor import FormatError, ShapeError, mean, std

DEFAULT_RIDGE = 1e-4
SINGULAR_COND = 1e12

_MODES = {"whole": 0, "channelwise": 1}


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class WeightBaseSet:
    """Binary bases plus coefficients for one layer.

    ``bases`` has shape (M, *W.shape) and holds int8 +-1. In whole mode
    ``alphas`` and ``shifts`` have shape (M,); in channelwise mode they have
    shape (c_out, M) and channel i of every base was fitted on ``W[i]``.
    """

    bases: np.ndarray
    alphas: np.ndarray
    shifts: np.ndarray
    mode: str = "whole"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown approximation mode {self.mode!r}")
        m = self.bases.shape[0]
        if m < 1:
            raise ValueError("a base set needs M >= 1")
        if not np.all(np.abs(self.bases) == 1):
            raise ValueError("base elements must be -1 or +1")
        if self.alphas.shape[-1] != m or self.shifts.shape[-1] != m:
            raise ValueError(
                f"M mismatch: {m} bases, alphas {self.alphas.shape}, shifts {self.shifts.shape}"
            )

    @property
    def M(self) -> int:
        return self.bases.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.bases.shape[1:])


def default_shifts(M: int) -> np.ndarray:
    """Evenly spaced shifts on [-1, 1]; a single base is centred at 0."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if M == 1:
        return np.zeros(1)
    return -1.0 + np.arange(M) * (2.0 / (M - 1))


def make_bases(W, shifts) -> np.ndarray:
    w = np.asarray(W, dtype=np.float64)
    if w.size == 0:
        raise ShapeError("cannot build bases for an empty tensor")
    centered = w - mean(w)
    s = std(w)
    u = np.asarray(shifts, dtype=np.float64).reshape(-1)
    out = np.empty((u.size,) + w.shape, dtype=np.int8)
    for i, ui in enumerate(u):
        # sign(0) = +1
        out[i] = np.where(centered + ui * s >= 0, 1, -1)
    return out


def solve_alphas(W, bases, ridge_lambda: float = DEFAULT_RIDGE) -> np.ndarray:
    """Minimise ||w - B a||^2 + lambda ||a||^2 through the M x M normal equations."""
    w = np.asarray(W, dtype=np.float64).reshape(-1)
    B = np.asarray(bases, dtype=np.float64).reshape(len(bases), -1)
    if B.shape[1] != w.size:
        raise ShapeError(f"bases of {B.shape[1]} elements do not match W of {w.size}")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be non-negative")
    gram = B @ B.T + ridge_lambda * np.eye(B.shape[0])
    rhs = B @ w
    if ridge_lambda == 0 and np.linalg.cond(gram) > SINGULAR_COND:
        raise SingularSystemError(
            "normal equations are singular (correlated or duplicated bases); use ridge_lambda > 0"
        )
    return np.linalg.solve(gram, rhs)


def reconstruct(bs: WeightBaseSet) -> np.ndarray:
    """sum_m alpha_m B_m, in float64."""
    B = bs.bases.astype(np.float64)
    if bs.mode == "whole":
        return np.tensordot(bs.alphas, B, axes=(0, 0))
    # alphas (c_out, M); B (M, c_out, ...)
    a = bs.alphas.T.reshape(bs.M, bs.bases.shape[1], *([1] * (B.ndim - 2)))
    return (a * B).sum(axis=0)


def approximate(W, shifts=None, ridge_lambda: float = DEFAULT_RIDGE, M: int | None = None) -> WeightBaseSet:
    """Whole-tensor fit. Either ``shifts`` or ``M`` (default shifts) is required."""
    if shifts is None:
        if M is None:
            raise ValueError("give either shifts or M")
        shifts = default_shifts(M)
    shifts = np.asarray(shifts, dtype=np.float64).reshape(-1)
    bases = make_bases(W, shifts)
    alphas = solve_alphas(W, bases, ridge_lambda)
    return WeightBaseSet(bases, alphas, shifts.copy(), "whole")


def approximate_channelwise(W, M: int | None = None, ridge_lambda: float = DEFAULT_RIDGE, shifts=None) -> WeightBaseSet:
    w = np.asarray(W)
    if w.ndim != 4:
        raise ShapeError(f"channel-wise approximation needs a rank-4 filter, got {w.shape}")
    if shifts is None:
        if M is None:
            raise ValueError("give either shifts or M")
        shifts = default_shifts(M)
    shifts = np.asarray(shifts, dtype=np.float64).reshape(-1)
    c_out = w.shape[0]
    bases = np.empty((shifts.size,) + w.shape, dtype=np.int8)
    alphas = np.empty((c_out, shifts.size))
    for i in range(c_out):
        fit = approximate(w[i], shifts, ridge_lambda)
        bases[:, i] = fit.bases
        alphas[i] = fit.alphas
    return WeightBaseSet(bases, alphas, np.tile(shifts, (c_out, 1)), "channelwise")


def fit(W, M: int | None = None, shifts=None, ridge_lambda: float = DEFAULT_RIDGE, mode: str = "whole") -> WeightBaseSet:
    if mode == "whole":
        return approximate(W, shifts, ridge_lambda, M=M)
    if mode == "channelwise":
        return approximate_channelwise(W, M, ridge_lambda, shifts=shifts)
    raise ValueError(f"unknown approximation mode {mode!r}")


def rmse(a, b) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"rmse of mismatched shapes {x.shape} and {y.shape}")
    return float(np.sqrt(np.mean((x - y) ** 2)))


# -- serialization -----------------------------------------------------------

def write_base_set(f: BinaryIO, bs: WeightBaseSet) -> None:
    """u32 M, mode byte, [u32 c_out if channelwise], shifts, alphas, packed bases."""
    from .bitconv import pack, write_bitplane

    f.write(struct.pack("<IB", bs.M, _MODES[bs.mode]))
    if bs.mode == "channelwise":
        f.write(struct.pack("<I", bs.alphas.shape[0]))
    f.write(np.ascontiguousarray(bs.shifts, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(bs.alphas, dtype="<f4").tobytes())
    write_bitplane(f, pack(bs.bases))


def read_base_set(f: BinaryIO) -> WeightBaseSet:
    from .bitconv import read_bitplane, unpack

    pos = f.tell()
    head = f.read(5)
    if len(head) != 5:
        raise FormatError("truncated base set header", pos)
    m, mode_byte = struct.unpack("<IB", head)
    modes = {v: k for k, v in _MODES.items()}
    if mode_byte not in modes or m < 1:
        raise FormatError(f"bad base set header (M={m}, mode={mode_byte})", pos)
    mode = modes[mode_byte]
    shape: tuple[int, ...] = (m,)
    if mode == "channelwise":
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated base set header", pos + 5)
        shape = (struct.unpack("<I", raw)[0], m)
    count = int(np.prod(shape))
    coeff_pos = f.tell()
    coeff = f.read(8 * count)
    if len(coeff) != 8 * count:
        raise FormatError("truncated base set coefficients", coeff_pos)
    shifts = np.frombuffer(coeff[: 4 * count], dtype="<f4").astype(np.float64).reshape(shape)
    alphas = np.frombuffer(coeff[4 * count:], dtype="<f4").astype(np.float64).reshape(shape)
    bases = unpack(read_bitplane(f)).astype(np.int8)
    return WeightBaseSet(bases, alphas, shifts, mode)
