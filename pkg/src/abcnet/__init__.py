"""Multi-bit binary convolutional networks in numpy.

Weights are approximated by a linear combination of M binary bases and
activations by N shifted, clipped binarizations, so every convolution
becomes M*N xnor/popcount convolutions over bit-packed operands.
"""
from .activation import ActivationBank, binarize, binarize_grad_mask, combine, h_clip, multi_binarize
from .approx import SingularSystemError, WeightBaseSet, approximate, approximate_channelwise, fit, reconstruct, rmse
from .bitconv import (BitPlane, FoldedThreshold, apply_folded, approx_conv, binconv2d, estimate_costs,
                      fold_bn_threshold, pack, unpack, xnor_dot)
from .tensor import FormatError, ShapeError, conv2d_ref, load_tensor, make_rng, save_tensor

__version__ = "0.1.0"

__all__ = [
    "ActivationBank", "BitPlane", "FoldedThreshold", "FormatError", "ShapeError", "SingularSystemError",
    "WeightBaseSet", "apply_folded", "approx_conv", "approximate", "approximate_channelwise", "binarize",
    "binarize_grad_mask", "binconv2d", "combine", "conv2d_ref", "estimate_costs", "fit", "fold_bn_threshold",
    "h_clip", "load_tensor", "make_rng", "multi_binarize", "pack", "reconstruct", "rmse", "save_tensor",
    "unpack", "xnor_dot",
]
