"""Bounded clipping, binarization and the N-branch binary activation bank."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .tensor import FormatError, ShapeError

# default activation shifts, keyed by N
DEFAULT_BANK_SHIFTS = {
    1: [0.0],
    3: [-1.5, 0.0, 1.5],
    5: [-3.5, -2.5, -1.5, 0.0, 2.5],
}


@dataclass
class ActivationBank:
    shifts: np.ndarray
    betas: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.shifts = np.asarray(self.shifts, dtype=np.float64).reshape(-1).copy()
        if self.betas is None:
            self.betas = np.ones_like(self.shifts)
        self.betas = np.asarray(self.betas, dtype=np.float64).reshape(-1).copy()
        if self.shifts.size < 1 or self.shifts.size != self.betas.size:
            raise ValueError(f"bank needs N >= 1 matching shifts/betas, got {self.shifts.size}/{self.betas.size}")
        if not (np.all(np.isfinite(self.shifts)) and np.all(np.isfinite(self.betas))):
            raise ValueError("bank parameters must be finite")

    @property
    def N(self) -> int:
        return self.shifts.size

    @classmethod
    def default(cls, N: int) -> "ActivationBank":
        if N in DEFAULT_BANK_SHIFTS:
            return cls(DEFAULT_BANK_SHIFTS[N])
        return cls(np.linspace(-1.5, 1.5, N))


def h_clip(x, v: float) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64) + v, 0.0, 1.0)


def binarize(R, v: float) -> np.ndarray:
    """+1 where clip(R + v, 0, 1) >= 0.5, else -1 (float64 evaluation)."""
    return np.where(h_clip(R, v) >= 0.5, 1.0, -1.0)


def binarize_grad_mask(R, v: float) -> np.ndarray:
    """Straight-through window: 1 where 0 <= R - v <= 1."""
    d = np.asarray(R, dtype=np.float64) - v
    return ((d >= 0.0) & (d <= 1.0)).astype(np.float64)


def multi_binarize(R, bank: ActivationBank) -> list[np.ndarray]:
    return [binarize(R, v) for v in bank.shifts]


def combine(binaries: Sequence[np.ndarray], betas) -> np.ndarray:
    betas = np.asarray(betas, dtype=np.float64).reshape(-1)
    if len(binaries) != betas.size:
        raise ShapeError(f"{len(binaries)} binary tensors but {betas.size} coefficients")
    shape = np.shape(binaries[0])
    out = np.zeros(shape)
    for a, b in zip(binaries, betas):
        if np.shape(a) != shape:
            raise ShapeError(f"cannot combine tensors of dims {shape} and {np.shape(a)}")
        out += b * np.asarray(a, dtype=np.float64)
    return out


# -- exact comparator thresholds -------------------------------------------
#
# The float predicates used above are monotone in R, so each has a single
# float64 boundary. Finding it exactly lets a plain `R >= tau` comparator
# reproduce the predicate bit for bit, including at the threshold itself.

_SIGN = np.int64(-(2**63))
_MAXKEY = np.int64(0x7FEFFFFFFFFFFFFF)  # largest finite double


def _to_key(x: np.ndarray) -> np.ndarray:
    i = np.asarray(x, dtype=np.float64).view(np.int64)
    return np.where(i < 0, -(i & np.int64(0x7FFFFFFFFFFFFFFF)), i)


def _from_key(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    bits = np.where(k < 0, (-k) | _SIGN, k)
    return bits.view(np.float64)


def boundary(pred: Callable[[np.ndarray], np.ndarray], guess) -> np.ndarray:
    """Smallest double ``t`` with ``pred(t)`` true, for a non-decreasing predicate.

    ``pred`` is vectorised over arrays shaped like ``guess``. Returns +inf
    where the predicate is never true and -inf where it is always true.
    """
    guess = np.nan_to_num(np.asarray(guess, dtype=np.float64), posinf=1e300, neginf=-1e300)
    g = _to_key(guess)
    always = pred(_from_key(np.full_like(g, -_MAXKEY)))
    never = ~pred(_from_key(np.full_like(g, _MAXKEY)))

    # exponential bracket around the guess: pred(lo) false, pred(hi) true
    at_g = pred(_from_key(g))
    lo = np.where(at_g, -_MAXKEY, g)
    hi = np.where(at_g, g, _MAXKEY)
    hi_found = at_g | never
    lo_found = ~at_g | always
    for k in range(63):
        step = np.int64(1) << np.int64(min(k, 62))
        if hi_found.all() and lo_found.all():
            break
        up = np.where(g > _MAXKEY - step, _MAXKEY, g + step)
        down = np.where(g < -_MAXKEY + step, -_MAXKEY, g - step)
        p_up = pred(_from_key(up))
        p_down = pred(_from_key(down))
        need_hi, need_lo = ~hi_found, ~lo_found
        hi = np.where(need_hi & p_up, up, hi)
        lo = np.where(need_hi & ~p_up, up, lo)
        hi_found |= need_hi & p_up
        lo = np.where(need_lo & ~p_down, down, lo)
        hi = np.where(need_lo & p_down, down, hi)
        lo_found |= need_lo & ~p_down

    settled = always | never
    for _ in range(70):
        gap = hi - lo
        todo = (gap > 1) & ~settled
        if not todo.any():
            break
        mid = lo + gap // 2
        p = pred(_from_key(mid))
        hi = np.where(todo & p, mid, hi)
        lo = np.where(todo & ~p, mid, lo)
    out = _from_key(hi)
    out = np.where(always, -np.inf, out)
    return np.where(never, np.inf, out)


def comparator(R, tau) -> np.ndarray:
    return np.where(np.asarray(R, dtype=np.float64) >= tau, 1.0, -1.0)


def threshold(v) -> np.ndarray | float:
    """Exact comparator constant: ``binarize(R, v) == comparator(R, threshold(v))``.

    Mathematically this is 0.5 - v; the search corrects for float rounding
    in ``R + v``.
    """
    v_arr = np.asarray(v, dtype=np.float64)
    t = boundary(lambda r: np.clip(r + v_arr, 0.0, 1.0) >= 0.5, 0.5 - v_arr)
    return float(t) if np.ndim(v) == 0 else t


# -- serialization -----------------------------------------------------------

def write_bank(f: BinaryIO, bank: ActivationBank) -> None:
    f.write(struct.pack("<I", bank.N))
    f.write(bank.shifts.astype("<f4").tobytes())
    f.write(bank.betas.astype("<f4").tobytes())


def read_bank(f: BinaryIO) -> ActivationBank:
    pos = f.tell()
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated activation bank", pos)
    (n,) = struct.unpack("<I", raw)
    body = f.read(8 * n)
    if n < 1 or len(body) != 8 * n:
        raise FormatError(f"bad activation bank (N={n})", pos)
    shifts = np.frombuffer(body[: 4 * n], dtype="<f4").astype(np.float64)
    betas = np.frombuffer(body[4 * n:], dtype="<f4").astype(np.float64)
    return ActivationBank(shifts, betas)
