"""Run configuration and model description.

Configs are INI-style ``key = value`` text: a ``[run]`` section, a
``[model]`` section and one ``[layer.<i>]`` block per layer, in order::

    [model]
    input = 1,8,8
    classes = 2
    preset = m3n3

    [layer.0]
    kind = conv
    out_channels = 16
    kernel = 3
    padding = 1

``M = fp`` / ``N = fp`` mark full-precision layers. A ``residual`` layer
with ``source = i`` adds the output of layer i (-1: the model input). A preset fills in M, N,
shifts and betas for layers that do not set them explicitly.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

import numpy as np

from .activation import ActivationBank
from .approx import DEFAULT_RIDGE, default_shifts

LAYER_KINDS = ("conv", "maxpool", "batchnorm", "activation", "flatten", "dense", "residual")

# named shift and beta settings
PRESETS: dict[str, dict] = {
    "m1n1": {"M": 1, "shifts_u": [0.0], "N": 1, "shifts_v": [0.0], "betas": [1.0]},
    "m3n1": {"M": 3, "shifts_u": [-1.0, 0.0, 1.0], "N": 1, "shifts_v": [0.0], "betas": [1.0]},
    "m3n3": {"M": 3, "shifts_u": [-1.0, 0.0, 1.0], "N": 3, "shifts_v": [-1.5, 0.0, 1.5], "betas": [1.0] * 3},
    "m3n5": {"M": 3, "shifts_u": [-1.0, 0.0, 1.0], "N": 5,
             "shifts_v": [-3.5, -2.5, -1.5, 0.0, 2.5], "betas": [1.0] * 5},
    "m5n1": {"M": 5, "shifts_u": [-2.0, -1.0, 0.0, 1.0, 2.0], "N": 1, "shifts_v": [0.0], "betas": [1.0]},
    "m5n3": {"M": 5, "shifts_u": [-2.0, -1.0, 0.0, 1.0, 2.0], "N": 3,
             "shifts_v": [-0.9, 0.0, 0.9], "betas": [1.0] * 3},
    "m5n5": {"M": 5, "shifts_u": [-1.0, -0.5, 0.0, 0.5, 1.0], "N": 5,
             "shifts_v": [-3.5, -2.5, -1.5, 0.0, 2.5], "betas": [1.0] * 5},
    "res34-m3n3": {"M": 3, "shifts_u": [-1.0, 0.0, 1.0], "N": 3, "shifts_v": [-3.0, 0.0, 3.0], "betas": [1.0] * 3},
}


class ConfigError(ValueError):
    """Carries every validation problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    M: int | None = None
    shifts_u: list[float] | None = None
    size: int = 2
    N: int | None = None
    shifts_v: list[float] | None = None
    betas: list[float] | None = None
    units: int | None = None
    source: int | None = None

    def keys(self) -> list[str]:
        return {
            "conv": ["out_channels", "kernel", "stride", "padding", "M", "shifts_u"],
            "maxpool": ["size", "stride"],
            "batchnorm": [],
            "activation": ["N", "shifts_v", "betas"],
            "flatten": [],
            "dense": ["units"],
            "residual": ["source"],
        }[self.kind]


@dataclass
class ModelSpec:
    input_shape: tuple[int, int, int]
    classes: int
    layers: list[LayerSpec]
    ridge: float = DEFAULT_RIDGE
    mode: str = "whole"
    binarize_first: bool = True
    preset: str | None = None


@dataclass
class RunConfig:
    model: ModelSpec
    seed: int = 0
    dataset: str = "synth:blobs:2000"
    val_dataset: str | None = None
    val_fraction: float = 0.2
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    lr_decay: float = 0.9
    momentum: float = 0.9
    init_from: str | None = None


_RUN_KEYS = [f.name for f in fields(RunConfig) if f.name != "model"]


# -- text <-> objects -----------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(" ", "").split(",") if t]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _int_or_fp(text: str) -> int | None:
    return None if text.strip().lower() in ("fp", "inf", "none") else int(text)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep M / N case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    problems: list[str] = []

    def convert(section, key, fn, default=None):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key)
        try:
            return fn(raw)
        except ValueError:
            problems.append(f"[{section}] {key} = {raw!r}: not a valid value")
            return default

    def boolean(raw):
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)

    def opt_str(raw):
        raw = raw.strip()
        return raw or None

    m = "model"
    if not cp.has_section(m):
        problems.append("missing [model] section")
    shape = convert(m, "input", lambda s: tuple(int(v) for v in s.split(",")), (1, 8, 8))
    if len(shape) != 3:
        problems.append(f"[model] input must be C,H,W, got {shape}")
        shape = (1, 8, 8)
    model = ModelSpec(
        input_shape=shape,
        classes=convert(m, "classes", int, 2),
        layers=[],
        ridge=convert(m, "ridge", float, DEFAULT_RIDGE),
        mode=convert(m, "mode", str.strip, "whole"),
        binarize_first=convert(m, "binarize_first", boolean, True),
        preset=convert(m, "preset", opt_str, None),
    )
    preset = {}
    if model.preset is not None:
        if model.preset not in PRESETS:
            problems.append(f"[model] unknown preset {model.preset!r} (known: {', '.join(PRESETS)})")
        else:
            preset = PRESETS[model.preset]

    layer_sections = [s for s in cp.sections() if s.startswith("layer.")]
    try:
        layer_sections.sort(key=lambda s: int(s.split(".", 1)[1]))
    except ValueError:
        problems.append("layer sections must be named [layer.<integer>]")
    for sec in layer_sections:
        kind = cp.get(sec, "kind", fallback="").strip()
        if kind not in LAYER_KINDS:
            problems.append(f"[{sec}] unknown kind {kind!r}")
            continue
        ls = LayerSpec(kind)
        allowed = set(ls.keys()) | {"kind"}
        for key in cp.options(sec):
            if key not in allowed:
                problems.append(f"[{sec}] key {key!r} is not valid for a {kind} layer")
        if kind == "conv":
            ls.out_channels = convert(sec, "out_channels", int)
            ls.kernel = convert(sec, "kernel", int, 3)
            ls.stride = convert(sec, "stride", int, 1)
            ls.padding = convert(sec, "padding", int, 0)
            if cp.has_option(sec, "M"):
                ls.M = convert(sec, "M", _int_or_fp)
                ls.shifts_u = convert(sec, "shifts_u", _floats)
            elif preset:
                ls.M = preset["M"]
                ls.shifts_u = convert(sec, "shifts_u", _floats, list(preset["shifts_u"]))
        elif kind == "maxpool":
            ls.size = convert(sec, "size", int, 2)
            ls.stride = convert(sec, "stride", int, ls.size)
        elif kind == "activation":
            if cp.has_option(sec, "N"):
                ls.N = convert(sec, "N", _int_or_fp)
                ls.shifts_v = convert(sec, "shifts_v", _floats)
                ls.betas = convert(sec, "betas", _floats)
            elif preset:
                ls.N = preset["N"]
                ls.shifts_v = convert(sec, "shifts_v", _floats, list(preset["shifts_v"]))
                ls.betas = convert(sec, "betas", _floats, list(preset["betas"]))
        elif kind == "dense":
            ls.units = convert(sec, "units", int)
        elif kind == "residual":
            ls.source = convert(sec, "source", int)
        model.layers.append(ls)

    r = "run"
    cfg = RunConfig(model=model)
    casts = {"seed": int, "val_fraction": float, "epochs": int, "batch_size": int,
             "lr": float, "lr_decay": float, "momentum": float,
             "dataset": str.strip, "val_dataset": opt_str, "init_from": opt_str}
    if cp.has_section(r):
        for key in cp.options(r):
            if key not in casts:
                problems.append(f"[run] unknown key {key!r}")
                continue
            setattr(cfg, key, convert(r, key, casts[key], getattr(cfg, key)))
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for key in _RUN_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            lines.append(f"{key} = {_fmt(value)}")
    m = cfg.model
    lines += ["", "[model]", f"input = {_fmt(list(m.input_shape))}", f"classes = {m.classes}",
              f"ridge = {_fmt(m.ridge)}", f"mode = {m.mode}", f"binarize_first = {_fmt(m.binarize_first)}"]
    if m.preset:
        lines.append(f"preset = {m.preset}")
    for i, ls in enumerate(m.layers):
        lines += ["", f"[layer.{i}]", f"kind = {ls.kind}"]
        for key in ls.keys():
            value = getattr(ls, key)
            if key in ("M", "N"):
                lines.append(f"{key} = {'fp' if value is None else value}")
            elif value is not None:
                lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


# -- validation and shapes --------------------------------------------------------

def infer_shapes(spec: ModelSpec, problems: list[str] | None = None) -> list[tuple[int, ...]]:
    """Output shape (without batch) of every layer; records composition errors."""
    problems = [] if problems is None else problems
    shape: tuple[int, ...] = tuple(spec.input_shape)
    shapes = []
    for i, ls in enumerate(spec.layers):
        where = f"layer {i} ({ls.kind})"
        if ls.kind == "conv":
            if len(shape) != 3:
                problems.append(f"{where}: needs a C,H,W input, got {shape}")
                break
            if not ls.out_channels or ls.out_channels < 1:
                problems.append(f"{where}: out_channels must be >= 1")
                break
            if ls.kernel < 1 or ls.stride < 1 or ls.padding < 0:
                problems.append(f"{where}: bad kernel/stride/padding {ls.kernel}/{ls.stride}/{ls.padding}")
                break
            oh = (shape[1] + 2 * ls.padding - ls.kernel) // ls.stride + 1
            ow = (shape[2] + 2 * ls.padding - ls.kernel) // ls.stride + 1
            if oh < 1 or ow < 1:
                problems.append(f"{where}: kernel {ls.kernel} does not fit input {shape}")
                break
            shape = (ls.out_channels, oh, ow)
        elif ls.kind == "maxpool":
            if len(shape) != 3 or ls.size < 1 or ls.stride < 1:
                problems.append(f"{where}: needs a C,H,W input and positive size/stride")
                break
            oh = (shape[1] - ls.size) // ls.stride + 1
            ow = (shape[2] - ls.size) // ls.stride + 1
            if oh < 1 or ow < 1:
                problems.append(f"{where}: window {ls.size} does not fit input {shape}")
                break
            shape = (shape[0], oh, ow)
        elif ls.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif ls.kind == "dense":
            if len(shape) != 1:
                problems.append(f"{where}: needs a flattened input, got {shape}")
                break
            if not ls.units or ls.units < 1:
                problems.append(f"{where}: units must be >= 1")
                break
            shape = (ls.units,)
        elif ls.kind == "residual":
            if ls.source is None or not -1 <= ls.source < i:
                problems.append(f"{where}: source must name an earlier layer or -1 (the input)")
                break
            other = tuple(spec.input_shape) if ls.source == -1 else shapes[ls.source]
            if other != shape:
                problems.append(f"{where}: adds {other} from layer {ls.source} to {shape}")
                break
        shapes.append(shape)
    return shapes


def validate(cfg: RunConfig) -> list[str]:
    problems: list[str] = []
    m = cfg.model
    if min(m.input_shape) < 1:
        problems.append(f"input extents must be >= 1, got {m.input_shape}")
    if m.classes < 1:
        problems.append("classes must be >= 1")
    if m.mode not in ("whole", "channelwise"):
        problems.append(f"mode must be whole or channelwise, got {m.mode!r}")
    if m.ridge < 0:
        problems.append("ridge must be >= 0")
    if not m.layers:
        problems.append("model has no layers")
    for i, ls in enumerate(m.layers):
        if ls.kind == "conv" and ls.M is not None:
            if ls.M < 1:
                problems.append(f"layer {i}: M must be >= 1")
            elif ls.shifts_u is not None and len(ls.shifts_u) != ls.M:
                problems.append(f"layer {i}: {len(ls.shifts_u)} shifts_u for M={ls.M}")
        if ls.kind == "activation" and ls.N is not None:
            if ls.N < 1:
                problems.append(f"layer {i}: N must be >= 1")
            else:
                for key in ("shifts_v", "betas"):
                    vals = getattr(ls, key)
                    if vals is not None and len(vals) != ls.N:
                        problems.append(f"layer {i}: {len(vals)} {key} for N={ls.N}")
    shapes = infer_shapes(m, problems)
    if m.layers and len(shapes) == len(m.layers) and shapes[-1] != (m.classes,):
        problems.append(f"final layer outputs {shapes[-1]}, expected ({m.classes},) class scores")
    if not cfg.lr > 0:
        problems.append("lr must be > 0")
    if not 0 < cfg.lr_decay <= 1:
        problems.append("lr_decay must be in (0, 1]")
    if not 0 <= cfg.momentum < 1:
        problems.append("momentum must be in [0, 1)")
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    if cfg.epochs < 0:
        problems.append("epochs must be >= 0")
    if not 0 <= cfg.val_fraction < 1:
        problems.append("val_fraction must be in [0, 1)")
    return problems


# -- building --------------------------------------------------------------------

def build_model(spec: ModelSpec, rng=None, dtype=np.float32):
    from .layers import BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, MultiActivation, Residual
    from .model import Model

    problems: list[str] = []
    shapes = infer_shapes(spec, problems)
    if problems:
        raise ConfigError(problems)
    layers = []
    shape = tuple(spec.input_shape)
    first_conv = True
    for ls, out_shape in zip(spec.layers, shapes):
        if ls.kind == "conv":
            M = ls.M
            if first_conv and not spec.binarize_first:
                M = None
            first_conv = False
            shifts = None if M is None else (ls.shifts_u if ls.shifts_u is not None else default_shifts(M))
            layers.append(Conv2D(shape[0], ls.out_channels, ls.kernel, ls.stride, ls.padding,
                                 M=M, shifts=shifts, mode=spec.mode, ridge=spec.ridge, rng=rng, dtype=dtype))
        elif ls.kind == "maxpool":
            layers.append(MaxPool2D(ls.size, ls.stride))
        elif ls.kind == "batchnorm":
            layers.append(BatchNorm(shape[0], dtype=dtype))
        elif ls.kind == "activation":
            if ls.N is None:
                layers.append(MultiActivation(None, dtype=dtype))
            else:
                bank = ActivationBank.default(ls.N)
                shifts = ls.shifts_v if ls.shifts_v is not None else bank.shifts
                betas = ls.betas if ls.betas is not None else bank.betas
                layers.append(MultiActivation(ls.N, shifts, betas, dtype=dtype))
        elif ls.kind == "flatten":
            layers.append(Flatten())
        elif ls.kind == "dense":
            layers.append(Dense(shape[0], ls.units, rng=rng, dtype=dtype))
        elif ls.kind == "residual":
            layers.append(Residual(ls.source))
        shape = out_shape
    return Model(layers, spec)


def as_full_precision(spec: ModelSpec) -> ModelSpec:
    """Same topology with every conv and activation in full precision."""
    layers = []
    for ls in spec.layers:
        d = {f.name: getattr(ls, f.name) for f in fields(LayerSpec)}
        if ls.kind == "conv":
            d.update(M=None, shifts_u=None)
        if ls.kind == "activation":
            d.update(N=None, shifts_v=None, betas=None)
        layers.append(LayerSpec(**d))
    return ModelSpec(spec.input_shape, spec.classes, layers, spec.ridge, spec.mode, spec.binarize_first, None)


def with_preset(spec: ModelSpec, preset: str) -> ModelSpec:
    """Same topology with every conv and activation set from a named preset."""
    p = PRESETS[preset]
    layers = []
    for ls in spec.layers:
        d = {f.name: getattr(ls, f.name) for f in fields(LayerSpec)}
        if ls.kind == "conv":
            d.update(M=p["M"], shifts_u=list(p["shifts_u"]))
        if ls.kind == "activation":
            d.update(N=p["N"], shifts_v=list(p["shifts_v"]), betas=list(p["betas"]))
        layers.append(LayerSpec(**d))
    return ModelSpec(spec.input_shape, spec.classes, layers, spec.ridge, spec.mode, spec.binarize_first, preset)


def small_cnn_spec(input_shape=(1, 8, 8), classes=2, channels=(16, 32, 32), preset: str | None = None) -> ModelSpec:
    """Three conv blocks (conv -> [pool] -> BN -> activation) and a dense classifier."""
    layers = []
    for i, ch in enumerate(channels):
        layers.append(LayerSpec("conv", out_channels=ch, kernel=3, padding=1))
        if i < len(channels) - 1:
            layers.append(LayerSpec("maxpool", size=2, stride=2))
        layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("activation"))
    layers += [LayerSpec("flatten"), LayerSpec("dense", units=classes)]
    spec = ModelSpec(tuple(input_shape), classes, layers)
    return with_preset(spec, preset) if preset else spec


def small_resnet_spec(input_shape=(1, 8, 8), classes=2, channels=16, blocks=2,
                      preset: str | None = None) -> ModelSpec:
    """A stem block, then ``blocks`` basic residual blocks at constant width.

    Each block is conv -> BN -> activation -> conv -> BN -> (+ block input)
    -> activation, the shortcut taken from the previous block's activation.
    """
    layers = [LayerSpec("conv", out_channels=channels, kernel=3, padding=1),
              LayerSpec("batchnorm"), LayerSpec("activation")]
    for _ in range(blocks):
        entry = len(layers) - 1
        layers += [LayerSpec("conv", out_channels=channels, kernel=3, padding=1), LayerSpec("batchnorm"),
                   LayerSpec("activation"),
                   LayerSpec("conv", out_channels=channels, kernel=3, padding=1), LayerSpec("batchnorm"),
                   LayerSpec("residual", source=entry), LayerSpec("activation")]
    layers += [LayerSpec("maxpool", size=2, stride=2), LayerSpec("flatten"), LayerSpec("dense", units=classes)]
    spec = ModelSpec(tuple(input_shape), classes, layers)
    return with_preset(spec, preset) if preset else spec
