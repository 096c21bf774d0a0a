"""Trainable layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
fills ``self.grads`` (same keys as ``params()``) during ``backward``.
Binary layers follow the training recipe of approximated convolutions:
bases and coefficients are re-fitted from the real weights on every
forward pass, and gradients reach the real weights through the
straight-through estimator.
"""
from __future__ import annotations

import numpy as np

from .activation import ActivationBank, binarize, binarize_grad_mask
from .approx import DEFAULT_RIDGE, WeightBaseSet, default_shifts, fit, reconstruct
from .tensor import ShapeError, pad2d, windows


class MissingCacheError(RuntimeError):
    pass


class Layer:
    kind = "layer"
    trainable: tuple[str, ...] = ()

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.trainable}

    def _pop_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{self.kind}: backward called without a training forward pass")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    """Convolution without bias; binary-weight when ``M`` is set.

    ``M=None`` is the full-precision mode. With ``M`` set, the forward pass
    uses ``sum_m alpha_m B_m`` re-fitted from ``W`` (computed as one
    convolution with the reconstructed filter, which is the same by
    linearity). ``freeze_bases`` keeps the current base set so ``alphas``
    can be treated as free parameters, e.g. for gradient checks.
    """

    kind = "conv"
    trainable = ("W",)

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, M=None, shifts=None,
                 mode="whole", ridge=DEFAULT_RIDGE, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        self.M, self.mode, self.ridge = M, mode, ridge
        self.dtype = np.dtype(dtype)
        if M is not None:
            self.shifts = np.asarray(default_shifts(M) if shifts is None else shifts, dtype=np.float64)
            if self.shifts.size != M:
                raise ValueError(f"conv layer: {self.shifts.size} shifts for M={M}")
        else:
            self.shifts = None
        fan_in = in_ch * kernel * kernel
        if rng is None:
            self.W = np.zeros((out_ch, in_ch, kernel, kernel), dtype=self.dtype)
        else:
            self.W = (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
        self.base_set: WeightBaseSet | None = None
        self.freeze_bases = False
        self.input_prepadded = False  # set when the preceding activation already pads with -1
        self.needs_input_grad = True

    @property
    def binary(self) -> bool:
        return self.M is not None

    def refit(self) -> WeightBaseSet:
        self.base_set = fit(self.W, shifts=self.shifts, ridge_lambda=self.ridge, mode=self.mode)
        return self.base_set

    def effective_weight(self) -> np.ndarray:
        if not self.binary:
            return self.W
        if self.base_set is None or not self.freeze_bases:
            self.refit()
        return reconstruct(self.base_set).astype(self.dtype)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects (N, {self.in_ch}, H, W) input, got {x.shape}")
        w = self.effective_weight()
        xp = x if self.input_prepadded else pad2d(x, self.padding)
        cols = windows(xp, self.kernel, self.kernel, self.stride)
        out = np.tensordot(cols, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if training:
            self._cache = (xp, w, x.shape)
        return np.ascontiguousarray(out, dtype=self.dtype)

    def backward(self, grad):
        xp, w, in_shape = self._pop_cache()
        k, s = self.kernel, self.stride
        cols = windows(xp, k, k, s)
        # dL/d(filter actually used in the forward pass)
        g_used = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 1, 2])).astype(self.dtype)
        if not self.binary:
            self.grads = {"W": g_used}
        else:
            bs = self.base_set
            B = bs.bases.astype(np.float64)
            if bs.mode == "whole":
                g_alpha = np.tensordot(B, g_used, axes=B.ndim - 1)
                g_w = bs.alphas.sum() * g_used
            else:
                g_alpha = (B * g_used[None]).sum(axis=(2, 3, 4)).T  # (c_out, M)
                g_w = bs.alphas.sum(axis=1)[:, None, None, None] * g_used
            # straight-through: dB_m/dW treated as identity
            self.grads = {"W": g_w.astype(self.dtype), "alphas": g_alpha}
        if not self.needs_input_grad:
            return None
        oh, ow = grad.shape[2:]
        dxp = np.zeros(xp.shape, dtype=np.result_type(grad, w))
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))  # N, OH, OW, C
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += contrib.transpose(0, 3, 1, 2)
        if self.input_prepadded or self.padding == 0:
            return dxp
        p = self.padding
        return dxp[:, :, p:p + in_shape[2], p:p + in_shape[3]]


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, size=2, stride=None):
        super().__init__()
        self.size = size
        self.stride = stride or size

    def forward(self, x, training=False):
        k, s = self.size, self.stride
        win = windows(x, k, k, s)  # N, OH, OW, C, k, k
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2)
        if training:
            self._cache = (x.shape, idx.transpose(0, 3, 1, 2))
        return np.ascontiguousarray(out)

    def backward(self, grad):
        shape, idx = self._pop_cache()
        k, s = self.size, self.stride
        oh, ow = grad.shape[2:]
        dx = np.zeros(shape, dtype=grad.dtype)
        for p in range(k * k):
            i, j = divmod(p, k)
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(idx == p, grad, 0)
        return dx


class BatchNorm(Layer):
    """Per-channel batch norm over (N, C) or (N, C, H, W) inputs.

    Training uses batch statistics; inference the running ones, expressed
    as the affine map ``a * x + b`` returned by :meth:`affine`.
    """

    kind = "batchnorm"
    trainable = ("gamma", "bias")

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.dtype = np.dtype(dtype)
        self.gamma = np.ones(channels, dtype=self.dtype)
        self.bias = np.zeros(channels, dtype=self.dtype)
        self.running_mean = np.zeros(channels, dtype=self.dtype)
        self.running_var = np.ones(channels, dtype=self.dtype)

    def _shape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        a = self.gamma.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        b = self.bias.astype(np.float64) - a * self.running_mean.astype(np.float64)
        return a, b

    def forward(self, x, training=False):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got input {x.shape}")
        shape = self._shape(x)
        if not training:
            a, b = self.affine()
            return (a.reshape(shape) * x + b.reshape(shape)).astype(self.dtype)
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(self.dtype)
        self.running_var = np.maximum(m * self.running_var + (1 - m) * var, self.eps).astype(self.dtype)
        self._cache = (xhat, inv, axes, shape)
        return (self.gamma.reshape(shape) * xhat + self.bias.reshape(shape)).astype(self.dtype)

    def backward(self, grad):
        xhat, inv, axes, shape = self._pop_cache()
        count = grad.size // grad.shape[1]
        self.grads = {
            "gamma": (grad * xhat).sum(axis=axes).astype(self.dtype),
            "bias": grad.sum(axis=axes).astype(self.dtype),
        }
        dxhat = grad * self.gamma.reshape(shape)
        dx = (inv.reshape(shape) / count) * (
            count * dxhat
            - dxhat.sum(axis=axes).reshape(shape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        )
        return dx.astype(grad.dtype)


class MultiActivation(Layer):
    """N-branch binary activation ``sum_n beta_n H_{v_n}(R)``; ReLU when ``N`` is None.

    ``out_pad`` pads every branch spatially with -1 so a following binary
    convolution sees the same operands as the bit-packed kernel does.
    """

    kind = "multi_activation"

    def __init__(self, N=None, shifts=None, betas=None, out_pad=0, dtype=np.float32):
        super().__init__()
        self.N = N
        self.dtype = np.dtype(dtype)
        self.out_pad = out_pad
        if N is not None:
            bank = ActivationBank.default(N) if shifts is None else ActivationBank(shifts, betas)
            if bank.N != N:
                raise ValueError(f"activation layer: {bank.N} shifts for N={N}")
            self.shifts = bank.shifts.astype(self.dtype)
            self.betas = bank.betas.astype(self.dtype)
            self.trainable = ("shifts", "betas")

    @property
    def binary(self) -> bool:
        return self.N is not None

    @property
    def bank(self) -> ActivationBank:
        return ActivationBank(self.shifts, self.betas)

    def _pad(self, t, value):
        p = self.out_pad
        if not p:
            return t
        return np.pad(t, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)

    def forward(self, x, training=False):
        if not self.binary:
            if training:
                self._cache = x > 0
            return np.maximum(x, 0)
        branches = [binarize(x, v) for v in self.shifts.astype(np.float64)]
        out = np.zeros(x.shape)
        for a, beta in zip(branches, self.betas.astype(np.float64)):
            out += beta * a
        out = self._pad(out, -float(self.betas.astype(np.float64).sum()))
        if training:
            self._cache = (x, np.stack(branches).astype(np.int8))
        return out.astype(self.dtype)

    def backward(self, grad):
        if not self.binary:
            return np.where(self._pop_cache(), grad, 0).astype(grad.dtype)
        R, A = self._pop_cache()
        g = grad.astype(np.float64)
        border = 0.0
        p = self.out_pad
        if p:
            inner = g[:, :, p:-p, p:-p]
            border = g.sum() - inner.sum()
            g = inner
        g_beta = np.empty(self.N)
        g_shift = np.empty(self.N)
        g_in = np.zeros(R.shape)
        for n in range(self.N):
            mask = binarize_grad_mask(R, float(self.shifts[n]))
            g_beta[n] = (g * A[n]).sum() - border
            gm = g * mask
            g_shift[n] = float(self.betas[n]) * gm.sum()
            g_in += float(self.betas[n]) * gm
        self.grads = {"shifts": g_shift.astype(self.dtype), "betas": g_beta.astype(self.dtype)}
        return g_in.astype(grad.dtype)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._pop_cache())


class Residual(Layer):
    """Adds the output of an earlier layer (``source``; -1 is the model input).

    The model supplies the skip tensor and routes the gradient back to it.
    """

    kind = "residual"

    def __init__(self, source: int):
        super().__init__()
        self.source = source

    def forward(self, x, training=False, skip=None):
        if skip is None or skip.shape != x.shape:
            raise ShapeError(f"residual from {self.source}: skip {None if skip is None else skip.shape} "
                             f"does not match {x.shape}")
        return x + skip

    def backward(self, grad):
        return grad


class Dense(Layer):
    """Full-precision affine layer (used for the classifier)."""

    kind = "dense"
    trainable = ("W", "b")

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.dtype = np.dtype(dtype)
        if rng is None:
            self.W = np.zeros((out_features, in_features), dtype=self.dtype)
        else:
            scale = np.sqrt(2.0 / in_features)
            self.W = (rng.standard_normal((out_features, in_features)) * scale).astype(self.dtype)
        self.b = np.zeros(out_features, dtype=self.dtype)
        self.needs_input_grad = True

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (N, {self.in_features}) input, got {x.shape}")
        if training:
            self._cache = x
        return (x @ self.W.T + self.b).astype(self.dtype)

    def backward(self, grad):
        x = self._pop_cache()
        self.grads = {"W": (grad.T @ x).astype(self.dtype), "b": grad.sum(axis=0).astype(self.dtype)}
        if not self.needs_input_grad:
            return None
        return grad @ self.W


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), (g / n).astype(logits.dtype)
