"""Sequential model container and the ``ABCM`` checkpoint format."""
from __future__ import annotations

import io
import struct

import numpy as np

from .activation import read_bank, write_bank
from .approx import read_base_set, write_base_set
from .layers import BatchNorm, Conv2D, Dense, Layer, MaxPool2D, MultiActivation, Residual
from .tensor import FormatError, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"ABCM"
CHECKPOINT_VERSION = 1
KIND_TAGS = {"conv": 1, "maxpool": 2, "batchnorm": 3, "multi_activation": 4, "flatten": 5, "dense": 6,
             "residual": 7}


class NumericalError(FloatingPointError):
    def __init__(self, layer_index: int, kind: str):
        super().__init__(f"non-finite values produced by layer {layer_index} ({kind})")
        self.layer_index = layer_index


class TopologyError(ValueError):
    pass


class Model:
    def __init__(self, layers: list[Layer], spec=None):
        self.layers = layers
        self.spec = spec
        self._link()

    def _link(self):
        """Move conv padding into a preceding binary activation and skip unused grads."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Residual) and not -1 <= layer.source < i:
                raise TopologyError(f"layer {i}: residual source {layer.source} must be an earlier layer or -1")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                prev = self.layers[i - 1] if i > 0 else None
                if isinstance(prev, MultiActivation) and prev.binary and layer.padding:
                    prev.out_pad = layer.padding
                    layer.input_prepadded = True
        for layer in self.layers:
            if hasattr(layer, "needs_input_grad"):
                layer.needs_input_grad = True
        first = next((l for l in self.layers if hasattr(l, "needs_input_grad")), None)
        if first is not None and all(not l.params() for l in self.layers[: self.layers.index(first)]):
            first.needs_input_grad = False

    @property
    def skip_sources(self) -> set[int]:
        return {l.source for l in self.layers if isinstance(l, Residual)}

    def _unpadded(self, i: int, x: np.ndarray) -> np.ndarray:
        p = getattr(self.layers[i], "out_pad", 0) if i >= 0 else 0
        return x[:, :, p:-p, p:-p] if p else x

    def forward(self, x: np.ndarray, training: bool = False, upto: int | None = None) -> np.ndarray:
        layers = self.layers if upto is None else self.layers[: upto + 1]
        sources = self.skip_sources
        saved = {-1: x} if -1 in sources else {}
        for i, layer in enumerate(layers):
            if isinstance(layer, Residual):
                x = layer.forward(x, training, skip=saved[layer.source])
            else:
                x = layer.forward(x, training)
            if training and not np.all(np.isfinite(x)):
                raise NumericalError(i, layer.kind)
            if i in sources:
                saved[i] = self._unpadded(i, x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        pending: dict[int, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i in pending:
                extra = pending.pop(i)
                p = getattr(layer, "out_pad", 0)
                if p:
                    extra = np.pad(extra, ((0, 0), (0, 0), (p, p), (p, p)))
                grad = grad + extra
            grad = layer.backward(grad)
            if isinstance(layer, Residual):
                pending[layer.source] = pending.get(layer.source, 0) + grad
            if grad is None:
                return None
        return grad + pending[-1] if -1 in pending else grad

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((f"{i}.{name}", arr))
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name in layer.params():
                out[f"{i}.{name}"] = layer.grads[name]
        return out

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        i, name = key.split(".", 1)
        layer = self.layers[int(i)]
        setattr(layer, name, value.astype(getattr(layer, name).dtype))

    @property
    def conv_layers(self) -> list[Conv2D]:
        return [l for l in self.layers if isinstance(l, Conv2D)]


# -- checkpoints ---------------------------------------------------------------

def _write_layer(f, layer: Layer) -> None:
    f.write(struct.pack("<B", KIND_TAGS[layer.kind]))
    if isinstance(layer, Conv2D):
        write_tensor(f, layer.W)
        if layer.binary:
            f.write(b"\x01")
            write_base_set(f, layer.refit() if layer.base_set is None else layer.base_set)
        else:
            f.write(b"\x00")
    elif isinstance(layer, BatchNorm):
        for arr in (layer.gamma, layer.bias, layer.running_mean, layer.running_var):
            write_tensor(f, arr)
    elif isinstance(layer, MultiActivation):
        if layer.binary:
            f.write(b"\x01")
            write_bank(f, layer.bank)
        else:
            f.write(b"\x00")
    elif isinstance(layer, Dense):
        write_tensor(f, layer.W)
        write_tensor(f, layer.b)


def _read_layer(f, layer: Layer, index: int) -> None:
    pos = f.tell()
    raw = f.read(1)
    if len(raw) != 1:
        raise FormatError(f"truncated checkpoint at layer {index}", pos)
    if raw[0] != KIND_TAGS[layer.kind]:
        raise FormatError(f"layer {index}: kind tag {raw[0]} does not match {layer.kind}", pos)

    def tensor_like(ref):
        at = f.tell()
        t = read_tensor(f)
        if t.shape != ref.shape:
            raise FormatError(f"layer {index}: stored dims {t.shape} != model dims {ref.shape}", at)
        return t.astype(ref.dtype)

    if isinstance(layer, Conv2D):
        layer.W = tensor_like(layer.W)
        flag = f.read(1)
        if flag == b"\x01":
            layer.base_set = read_base_set(f)
        elif flag != b"\x00":
            raise FormatError(f"layer {index}: bad base-set flag", f.tell() - 1)
    elif isinstance(layer, BatchNorm):
        layer.gamma = tensor_like(layer.gamma)
        layer.bias = tensor_like(layer.bias)
        layer.running_mean = tensor_like(layer.running_mean)
        layer.running_var = tensor_like(layer.running_var)
    elif isinstance(layer, MultiActivation):
        flag = f.read(1)
        if flag == b"\x01":
            bank = read_bank(f)
            if not layer.binary or bank.N != layer.N:
                raise FormatError(f"layer {index}: activation bank N={bank.N} does not match the model", pos)
            layer.shifts = bank.shifts.astype(layer.dtype)
            layer.betas = bank.betas.astype(layer.dtype)
        elif flag != b"\x00" or layer.binary:
            raise FormatError(f"layer {index}: bad activation flag", f.tell() - 1)
    elif isinstance(layer, Dense):
        layer.W = tensor_like(layer.W)
        layer.b = tensor_like(layer.b)


def checkpoint_bytes(model: Model, config_text: str) -> bytes:
    f = io.BytesIO()
    text = config_text.encode("utf-8")
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    f.write(text)
    f.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        _write_layer(f, layer)
    return f.getvalue()


def save_checkpoint(path, model: Model, config_text: str) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model, config_text))


def read_checkpoint_config(f) -> str:
    if f.read(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic, expected ABCM", 0)
    version, n = struct.unpack("<II", f.read(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    text = f.read(n)
    if len(text) != n:
        raise FormatError("truncated checkpoint config", 12)
    return text.decode("utf-8")


def load_checkpoint(path, dtype=np.float32):
    """Return (model, run config) rebuilt from the embedded config text."""
    from .config import build_model, parse_config

    with open(path, "rb") as f:
        text = read_checkpoint_config(f)
        cfg = parse_config(text)
        model = build_model(cfg.model, rng=None, dtype=dtype)
        pos = f.tell()
        (count,) = struct.unpack("<I", f.read(4))
        if count != len(model.layers):
            raise FormatError(f"checkpoint has {count} layers, config describes {len(model.layers)}", pos)
        for i, layer in enumerate(model.layers):
            _read_layer(f, layer, i)
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint", f.tell() - 1)
    return model, cfg


def init_from_full_precision(fp_model: Model, binary_model: Model) -> Model:
    """Copy real weights and batch-norm state of a trained full-precision model.

    ``binary_model`` supplies the topology and its own M, N, shifts and
    activation-bank initialisation; bases are fitted from the copied weights.
    """
    if len(fp_model.layers) != len(binary_model.layers):
        raise TopologyError(f"{len(fp_model.layers)} vs {len(binary_model.layers)} layers")
    for i, (src, dst) in enumerate(zip(fp_model.layers, binary_model.layers)):
        if src.kind != dst.kind:
            raise TopologyError(f"layer {i}: {src.kind} vs {dst.kind}")
        if isinstance(src, (Conv2D, Dense)):
            if src.W.shape != dst.W.shape:
                raise TopologyError(f"layer {i}: weight dims {src.W.shape} vs {dst.W.shape}")
            dst.W = src.W.astype(dst.W.dtype).copy()
            if isinstance(src, Dense):
                dst.b = src.b.astype(dst.b.dtype).copy()
            else:
                dst.base_set = None
                if dst.binary:
                    dst.refit()
        elif isinstance(src, BatchNorm):
            if src.channels != dst.channels:
                raise TopologyError(f"layer {i}: batchnorm over {src.channels} vs {dst.channels} channels")
            for name in ("gamma", "bias", "running_mean", "running_var"):
                setattr(dst, name, getattr(src, name).astype(dst.dtype).copy())
        elif isinstance(src, MaxPool2D) and (src.size, src.stride) != (dst.size, dst.stride):
            raise TopologyError(f"layer {i}: pooling geometry differs")
        elif isinstance(src, Residual) and src.source != dst.source:
            raise TopologyError(f"layer {i}: residual source {src.source} vs {dst.source}")
    return binary_model


__all__ = [
    "Model", "NumericalError", "TopologyError",
    "save_checkpoint", "load_checkpoint", "checkpoint_bytes", "init_from_full_precision",
]
