"""Command-line entry point: ``abcnet {approx,train,eval,estimate,dump-featuremaps}``.

Every command takes ``--config``, ``--seed`` and ``--out``. Validation
failures print every problem found and exit with status 2; a diverged
training run exits with status 3 after dumping its state.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .approx import DEFAULT_RIDGE, default_shifts, fit, reconstruct, rmse
from .bitconv import costs_csv, estimate_costs, format_costs
from .config import (PRESETS, ConfigError, RunConfig, parse_config, serialize_config, small_cnn_spec,
                     with_preset, build_model)
from .data import Dataset, EmptyDatasetError, load_dataset, train_val_split
from .engine import BitpackedEngine
from .layers import MultiActivation
from .model import (NumericalError, TopologyError, checkpoint_bytes, init_from_full_precision,
                    load_checkpoint)
from .tensor import FormatError, ShapeError, load_tensor, make_rng, save_tensor
from .train import DivergenceError, TrainConfig, accuracy_report, format_log, predict_logits, train_epochs

log = logging.getLogger("abcnet")

EXIT_INVALID = 2
EXIT_DIVERGED = 3

# Independent streams derived from the single --seed value.
_DATA_STREAM, _SPLIT_STREAM, _INIT_STREAM, _VAL_STREAM = 0, 1, 2, 3


def stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


class UsageError(ValueError):
    pass


# -- shared helpers ----------------------------------------------------------------

def _read_config(args) -> RunConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            cfg = parse_config(f.read())
    else:
        cfg = RunConfig(model=small_cnn_spec(preset=getattr(args, "preset", None)))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _write(path, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode, **({} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""})) as f:
        f.write(data)


def datasets_for(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    """Training and validation sets exactly as ``train`` sees them."""
    ds = load_dataset(cfg.dataset, stream_seed(cfg.seed, _DATA_STREAM))
    if cfg.val_dataset:
        return ds, load_dataset(cfg.val_dataset, stream_seed(cfg.seed, _VAL_STREAM))
    if cfg.val_fraction > 0:
        return train_val_split(ds, cfg.val_fraction, make_rng(stream_seed(cfg.seed, _SPLIT_STREAM)))
    return ds, None


def _check_input(model_spec, ds: Dataset) -> None:
    if tuple(ds.images.shape[1:]) != tuple(model_spec.input_shape):
        raise TopologyError(f"dataset images are {tuple(ds.images.shape[1:])}, "
                            f"model expects {tuple(model_spec.input_shape)}")
    if len(ds) and int(ds.labels.max()) >= model_spec.classes:
        raise TopologyError(f"label {int(ds.labels.max())} out of range for {model_spec.classes} classes")


# -- approx --------------------------------------------------------------------------

def cmd_approx(args) -> int:
    if args.weights.startswith("synth:gauss:"):
        n = int(args.weights.split(":")[2])
        W = make_rng(args.seed or 0).normal(0.0, 1.0, size=n).astype(np.float32)
    else:
        W = load_tensor(args.weights)
    Ms = [int(m) for m in args.M.split(",")]
    if args.shifts and len(Ms) != 1:
        raise UsageError("--shifts needs exactly one value in --M")
    rows = []
    for M in Ms:
        shifts = [float(u) for u in args.shifts.split(",")] if args.shifts else default_shifts(M)
        if len(shifts) != M:
            raise UsageError(f"{len(shifts)} shifts given for M={M}")
        bs = fit(W, M, shifts, args.ridge, args.mode)
        approx = reconstruct(bs)
        rows.append((M, rmse(W, approx)))
        if args.out:
            save_tensor(os.path.join(args.out, f"recon_M{M}.abct"), approx.astype(np.float32))
    text = "M,rmse\n" + "".join(f"{M},{r:.9g}\n" for M, r in rows)
    sys.stdout.write(text)
    if args.out:
        save_tensor(os.path.join(args.out, "weights.abct"), np.asarray(W, dtype=np.float32))
        _write(os.path.join(args.out, "rmse.csv"), text)
    return 0


# -- train ---------------------------------------------------------------------------

def run_training(cfg: RunConfig, out: str | None = None) -> tuple[list[dict], bytes]:
    """Train per ``cfg``; returns the log rows and the checkpoint bytes."""
    train, val = datasets_for(cfg)
    _check_input(cfg.model, train)
    model = build_model(cfg.model, rng=make_rng(stream_seed(cfg.seed, _INIT_STREAM)))
    if cfg.init_from:
        fp_model, _ = load_checkpoint(cfg.init_from)
        init_from_full_precision(fp_model, model)
    tc = TrainConfig(lr=cfg.lr, lr_decay=cfg.lr_decay, momentum=cfg.momentum, batch_size=cfg.batch_size,
                     epochs=cfg.epochs, seed=cfg.seed)
    text = serialize_config(cfg)
    rows: list[dict] = []
    try:
        train_epochs(model, train, val, tc, on_epoch=rows.append)
    except (DivergenceError, NumericalError):
        if out:
            _write(os.path.join(out, "train_log.csv"), format_log(rows))
            _write(os.path.join(out, "diverged.abcm"), checkpoint_bytes(model, text))
        raise
    blob = checkpoint_bytes(model, text)
    if out:
        _write(os.path.join(out, "train_log.csv"), format_log(rows))
        _write(os.path.join(out, "model.abcm"), blob)
        _write(os.path.join(out, "config.ini"), text)
    return rows, blob


def cmd_train(args) -> int:
    cfg = _read_config(args)
    for key in ("dataset", "epochs", "init_from"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, value)
    if not args.config:
        # default net, sized to the dataset
        train, _ = datasets_for(cfg)
        if len(train) == 0:
            raise EmptyDatasetError("training dataset is empty")
        cfg.model = small_cnn_spec(train.images.shape[1:], int(train.labels.max()) + 1, preset=args.preset)
    elif args.preset:
        cfg.model = with_preset(cfg.model, args.preset)
    if cfg.init_from and not os.path.exists(cfg.init_from):
        raise ConfigError([f"init_from checkpoint {cfg.init_from!r} does not exist"])
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    rows, _ = run_training(cfg, out)
    if rows:
        last = rows[-1]
        print(f"epochs={len(rows)} train_loss={last['train_loss']:.6f} "
              f"train_acc={last['train_acc']:.6f} val_acc={last['val_acc']:.6f}")
    print(f"checkpoint={os.path.join(out, 'model.abcm')}")
    return 0


# -- eval ----------------------------------------------------------------------------

def evaluate_checkpoint(path: str, engine: str = "float", dataset: str | None = None,
                        seed: int | None = None) -> tuple[dict, np.ndarray, Dataset]:
    model, cfg = load_checkpoint(path)
    if seed is not None:
        cfg.seed = seed
    if dataset:
        ds = load_dataset(dataset, stream_seed(cfg.seed, _DATA_STREAM))
    else:
        train, val = datasets_for(cfg)
        ds = val if val is not None else train
    if len(ds) == 0:
        raise EmptyDatasetError("evaluation dataset is empty")
    _check_input(cfg.model, ds)
    if engine == "bitpacked":
        logits = BitpackedEngine(model).predict_logits(ds.images)
    else:
        logits = predict_logits(model, ds.images)
    return accuracy_report(logits, ds.labels), logits, ds


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    report, logits, _ = evaluate_checkpoint(args.checkpoint, args.engine, args.dataset, args.seed)
    lines = [f"engine={args.engine}"] + [f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                                         for k, v in report.items()]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, f"eval_{args.engine}.txt"), text)
        np.savetxt(os.path.join(args.out, f"pred_{args.engine}.txt"), logits.argmax(axis=1), fmt="%d")
    return 0


# -- estimate ------------------------------------------------------------------------

def cmd_estimate(args) -> int:
    if args.checkpoint:
        _, cfg = load_checkpoint(args.checkpoint)
        spec = cfg.model
    else:
        spec = _read_config(args).model
    if args.preset:
        spec = with_preset(spec, args.preset)
    report = estimate_costs(spec)
    sys.stdout.write(format_costs(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "costs.txt"), format_costs(report))
        _write(os.path.join(args.out, "costs.csv"), costs_csv(report))
    return 0


# -- dump-featuremaps ------------------------------------------------------------------

def to_gray(fmap: np.ndarray) -> np.ndarray:
    """Min-max normalise one map to uint8; a constant map becomes uniform mid gray."""
    f = np.asarray(fmap, dtype=np.float64)
    lo, hi = f.min(), f.max()
    if not hi > lo:
        return np.full(f.shape, 128, dtype=np.uint8)
    return np.rint((f - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header", pos)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8 if maxval < 256 else ">u2", count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float32) / maxval


def load_image(spec: str, cfg: RunConfig) -> np.ndarray:
    """An image as (1, C, H, W): ``.pgm``, an ABCT tensor, or ``dataset:<index>``."""
    if spec.startswith("dataset:"):
        train, val = datasets_for(cfg)
        ds = val if val is not None else train
        idx = int(spec.split(":", 1)[1])
        if not 0 <= idx < len(ds):
            raise UsageError(f"image index {idx} out of range for {len(ds)} samples")
        return ds.images[idx:idx + 1]
    if spec.lower().endswith(".pgm"):
        return read_pgm(spec)[None, None]
    t = load_tensor(spec)
    if t.ndim == 2:
        t = t[None]
    return t[None] if t.ndim == 3 else t[:1]


def feature_maps(model, image: np.ndarray, layer: int) -> np.ndarray:
    if not 0 <= layer < len(model.layers):
        raise UsageError(f"layer index {layer} out of range (model has {len(model.layers)} layers)")
    x = model.forward(image, training=False, upto=layer)
    lay = model.layers[layer]
    if isinstance(lay, MultiActivation) and lay.out_pad:
        p = lay.out_pad
        x = x[:, :, p:-p, p:-p]
    if x.ndim != 4:
        raise UsageError(f"layer {layer} ({lay.kind}) has no spatial feature maps")
    return x[0]


def cmd_dump_featuremaps(args) -> int:
    if not args.checkpoint:
        raise UsageError("dump-featuremaps needs --checkpoint")
    model, cfg = load_checkpoint(args.checkpoint)
    image = load_image(args.image, cfg)
    if tuple(image.shape[1:]) != tuple(cfg.model.input_shape):
        raise TopologyError(f"image is {tuple(image.shape[1:])}, model expects {tuple(cfg.model.input_shape)}")
    maps = feature_maps(model, image, args.layer)
    other = None
    if args.compare:
        cmp_model, cmp_cfg = load_checkpoint(args.compare)
        other = feature_maps(cmp_model, image, args.layer)
        if other.shape != maps.shape:
            raise TopologyError(f"compared layer has maps {other.shape}, expected {maps.shape}")
    channels = range(maps.shape[0]) if args.channel is None else [args.channel]
    if args.channel is not None and not 0 <= args.channel < maps.shape[0]:
        raise UsageError(f"channel {args.channel} out of range ({maps.shape[0]} channels)")
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    written = []
    for c in channels:
        img = to_gray(maps[c])
        if other is not None:
            gap = np.full((img.shape[0], 1), 255, dtype=np.uint8)
            img = np.concatenate([img, gap, to_gray(other[c])], axis=1)
        path = os.path.join(out, f"layer{args.layer}_ch{c}.pgm")
        write_pgm(path, img)
        written.append(path)
    print("\n".join(written))
    return 0


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run/model config file")
    common.add_argument("--seed", type=int, help="seed for every random stream (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="abcnet", description="Multi-bit binary convolutional networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("approx", parents=[common], help="fit binary weight bases and report RMSE")
    a.add_argument("--weights", required=True, help="ABCT tensor path, or synth:gauss:<n>")
    a.add_argument("--M", default="1,2,3,4,5", help="comma-separated base counts")
    a.add_argument("--shifts", help="comma-separated shifts u (single M only)")
    a.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)
    a.add_argument("--mode", choices=("whole", "channelwise"), default="whole")
    a.set_defaults(func=cmd_approx)

    t = sub.add_parser("train", parents=[common], help="train a model, write model.abcm and train_log.csv")
    t.add_argument("--dataset", help="dataset spec, overrides the config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--init-from", dest="init_from", help="full-precision checkpoint to start from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--engine", choices=("float", "bitpacked"), default="float")
    e.add_argument("--dataset", help="dataset spec; default is the checkpoint's validation split")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("estimate", parents=[common], help="static memory / operation cost model")
    s.add_argument("--checkpoint")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.set_defaults(func=cmd_estimate)

    d = sub.add_parser("dump-featuremaps", parents=[common], help="write feature maps of one layer as PGM")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", default="dataset:0", help=".pgm, ABCT tensor, or dataset:<index>")
    d.add_argument("--layer", type=int, required=True)
    d.add_argument("--channel", type=int)
    d.add_argument("--compare", help="second checkpoint, drawn to the right of each map")
    d.set_defaults(func=cmd_dump_featuremaps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.out and args.command == "approx":
            os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, NumericalError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, FormatError, ShapeError, TopologyError, EmptyDatasetError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
