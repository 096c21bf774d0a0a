"""Inference through bit-packed kernels.

Walks a trained :class:`~abcnet.model.Model` and replaces every binary
weight / binary activation convolution with ``approx_conv`` over packed
operands. A batch norm followed by a binary activation is folded into one
comparator per (branch, channel), so the activations go straight from the
pooled convolution output to packed bits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitconv import (BitPlane, FoldedThreshold, apply_folded, approx_conv, bn_apply,
                      fold_bn_threshold, pack, unpack)
from .data import EmptyDatasetError
from .layers import BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, MultiActivation, Residual
from .model import Model
from .tensor import conv2d_ref


@dataclass
class _Bank:
    """N packed activation branches and their coefficients."""

    planes: list[BitPlane]
    betas: np.ndarray

    def combine(self) -> np.ndarray:
        out = None
        for bp, b in zip(self.planes, self.betas):
            term = b * unpack(bp).astype(np.float64)
            out = term if out is None else out + term
        return out


class BitpackedEngine:
    def __init__(self, model: Model):
        self.model = model
        self.steps = []  # (kind, payload, index of the last model layer covered)
        self.sources = model.skip_sources
        layers = model.layers
        i = 0
        while i < len(layers):
            layer = layers[i]
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if isinstance(layer, Conv2D):
                self.steps.append(("conv", self._conv_params(layer), i))
            elif (isinstance(layer, BatchNorm) and isinstance(nxt, MultiActivation) and nxt.binary
                  and i not in self.sources):
                a, b = layer.affine()
                self.steps.append(("fold", self._fold(a, b, nxt), i + 1))
                i += 1
            elif isinstance(layer, MultiActivation) and layer.binary:
                ones = np.ones(1)
                self.steps.append(("fold", self._fold(ones, np.zeros(1), layer, broadcast=True), i))
            else:
                self.steps.append(("float", layer, i))
            i += 1

    @staticmethod
    def _conv_params(layer: Conv2D):
        if not layer.binary:
            return layer, None, None
        bs = layer.refit()
        planes = [pack(bs.bases[m]) for m in range(bs.M)]
        return layer, planes, bs.alphas

    @staticmethod
    def _fold(a, b, act: MultiActivation, broadcast=False):
        folds = [fold_bn_threshold(a, b, float(v)) for v in act.shifts.astype(np.float64)]
        return folds, act.betas.astype(np.float64), broadcast

    def _run_conv(self, x, params):
        layer, planes, alphas = params
        if planes is None:
            return conv2d_ref(_as_float(x), layer.W.astype(np.float64), layer.stride, layer.padding)
        if isinstance(x, _Bank):
            return approx_conv(x.planes, x.betas, planes, alphas, layer.stride, layer.padding)
        # real-valued input: binary weights only, sum_m alpha_m conv(x, B_m)
        out = 0.0
        for m, bp in enumerate(planes):
            partial = conv2d_ref(x.astype(np.float64), unpack(bp).astype(np.float64), layer.stride, layer.padding)
            scale = alphas[m] if alphas.ndim == 1 else alphas[:, m].reshape(1, -1, 1, 1)
            out = out + scale * partial
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        saved = {-1: h}
        for kind, step, index in self.steps:
            if kind == "conv":
                h = self._run_conv(h, step)
            elif kind == "fold":
                folds, betas, broadcast = step
                h = _as_float(h)
                planes = []
                for f in folds:
                    if broadcast:
                        f = FoldedThreshold(np.repeat(f.thresholds, h.shape[1]), np.repeat(f.polarity, h.shape[1]))
                    planes.append(pack(apply_folded(h, f)))
                h = _Bank(planes, betas)
            else:
                layer = step
                h = _as_float(h)
                if isinstance(layer, BatchNorm):
                    a, b = layer.affine()
                    h = bn_apply(h, a, b)
                elif isinstance(layer, Dense):
                    h = h @ layer.W.T.astype(np.float64) + layer.b
                elif isinstance(layer, Residual):
                    h = h + _as_float(saved[layer.source])
                elif isinstance(layer, (MaxPool2D, Flatten, MultiActivation)):
                    h = layer.forward(h, training=False)
                else:
                    raise TypeError(f"no bit-packed rule for layer {layer.kind}")
            if index in self.sources:
                saved[index] = h
        return _as_float(h)

    def predict_logits(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        if len(images) == 0:
            raise EmptyDatasetError("cannot evaluate on an empty dataset")
        return np.concatenate([self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def _as_float(h):
    return h.combine() if isinstance(h, _Bank) else h
