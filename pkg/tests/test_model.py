import io

import numpy as np
import pytest

from _cases import fd_gradient, loss_of
from abcnet.approx import reconstruct, rmse
from abcnet.config import (LayerSpec, ModelSpec, RunConfig, as_full_precision, build_model, serialize_config,
                           small_cnn_spec, small_resnet_spec, with_preset)
from abcnet.data import load_dataset, train_val_split
from abcnet.layers import softmax_cross_entropy
from abcnet.model import (NumericalError, TopologyError, checkpoint_bytes, init_from_full_precision,
                          load_checkpoint, save_checkpoint)
from abcnet.tensor import FormatError, make_rng
from abcnet.train import TrainConfig, evaluate, train_epochs


@pytest.fixture(scope="module")
def task():
    ds = load_dataset("synth:blobs:800:4:8", 0)
    return train_val_split(ds, 0.25, make_rng(1))


@pytest.fixture(scope="module")
def fp_model(task):
    spec = small_cnn_spec((1, 8, 8), 4, channels=(8, 16, 16))
    model = build_model(spec, make_rng(2))
    train_epochs(model, task[0], task[1], TrainConfig(epochs=3))
    return model


def _cfg(spec):
    return RunConfig(model=spec, dataset="synth:blobs:800:4:8")


@pytest.mark.parametrize("preset", [None, "m3n3", "m1n1"])
def test_checkpoint_round_trip(tmp_path, fp_model, task, preset):
    spec = small_cnn_spec((1, 8, 8), 4, channels=(8, 16, 16), preset=preset)
    model = build_model(spec, make_rng(3))
    if preset:
        init_from_full_precision(fp_model, model)
    text = serialize_config(_cfg(spec))
    path = tmp_path / "m.abcm"
    save_checkpoint(path, model, text)
    raw = path.read_bytes()
    assert raw[:4] == b"ABCM"
    loaded, cfg = load_checkpoint(path)
    assert checkpoint_bytes(loaded, text) == raw
    x = task[1].images[:20]
    np.testing.assert_array_equal(loaded.forward(x), model.forward(x))


def test_checkpoint_corruption(tmp_path, fp_model):
    spec = small_cnn_spec((1, 8, 8), 4, channels=(8, 16, 16))
    text = serialize_config(_cfg(spec))
    raw = checkpoint_bytes(fp_model, text)
    cases = {
        "magic": b"ABCX" + raw[4:],
        "trailing": raw + b"\0",
        "truncated": raw[:-10],
    }
    for name, blob in cases.items():
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(FormatError):
            load_checkpoint(p)
    # a config whose dims disagree with the stored tensors
    other = serialize_config(_cfg(small_cnn_spec((1, 8, 8), 4, channels=(4, 16, 16))))
    bad = checkpoint_bytes(fp_model, other)
    (tmp_path / "dims").write_bytes(bad)
    with pytest.raises(FormatError, match="dims"):
        load_checkpoint(tmp_path / "dims")


def test_init_from_full_precision(fp_model, task):
    spec = small_cnn_spec((1, 8, 8), 4, channels=(8, 16, 16))
    for M in (3, 5):
        binary = build_model(with_preset(spec, "m3n3" if M == 3 else "m5n5"), make_rng(9))
        init_from_full_precision(fp_model, binary)
        for src, dst in zip(fp_model.conv_layers, binary.conv_layers):
            assert np.array_equal(src.W, dst.W)
            assert rmse(reconstruct(dst.base_set), src.W) < np.std(src.W)
        for src, dst in zip(fp_model.layers, binary.layers):
            if src.kind == "batchnorm":
                for name in ("gamma", "bias", "running_mean", "running_var"):
                    assert np.array_equal(getattr(src, name), getattr(dst, name))


def _binary_weight_only(spec, M):
    layers = [LayerSpec(**{**ls.__dict__, "M": M, "shifts_u": None}) if ls.kind == "conv" else ls
              for ls in spec.layers]
    return ModelSpec(spec.input_shape, spec.classes, layers)


def test_more_bases_lose_less_after_init(fp_model, task):
    spec = small_cnn_spec((1, 8, 8), 4, channels=(8, 16, 16))
    losses = {}
    for M in (1, 5):
        binary = build_model(_binary_weight_only(spec, M), make_rng(9))
        init_from_full_precision(fp_model, binary)
        losses[M] = evaluate(binary, task[1])["loss"]
    assert losses[5] < losses[1]


def test_init_topology_mismatch(fp_model):
    other = build_model(small_cnn_spec((1, 8, 8), 4, channels=(8, 8, 16), preset="m1n1"), make_rng(0))
    with pytest.raises(TopologyError):
        init_from_full_precision(fp_model, other)


def test_numerical_error_reports_layer():
    model = build_model(small_cnn_spec((1, 8, 8), 2, channels=(4, 4, 4)), make_rng(0))
    model.layers[0].W[...] = np.inf
    with pytest.raises(NumericalError) as info:
        model.forward(np.ones((2, 1, 8, 8), np.float32), training=True)
    assert info.value.layer_index == 0


@pytest.mark.parametrize("preset", [None, "m3n3"])
def test_residual_model(preset, tmp_path):
    spec = small_resnet_spec((1, 6, 6), 3, channels=4, blocks=2, preset=preset)
    model = build_model(spec, make_rng(4), dtype=np.float64)
    rng = make_rng(5)
    x, y = rng.normal(size=(5, 1, 6, 6)), rng.integers(0, 3, 5)
    loss, g = softmax_cross_entropy(model.forward(x, training=True), y)
    model.backward(g)
    if preset is None:
        # BN shift right before the skip sum; with binary activations this path is STE-only
        bn = model.layers[7]
        num = fd_gradient(lambda: loss_of(model, x, y), bn.bias)
        np.testing.assert_allclose(bn.grads["bias"], num, rtol=1e-5, atol=1e-9)
    dense = model.layers[-1]
    num = fd_gradient(lambda: loss_of(model, x, y), dense.b)
    np.testing.assert_allclose(dense.grads["b"], num, rtol=1e-5, atol=1e-9)
    text = serialize_config(RunConfig(model=spec, dataset="synth:blobs:10:3:6"))
    save_checkpoint(tmp_path / "r.abcm", model, text)
    loaded, _ = load_checkpoint(tmp_path / "r.abcm", dtype=np.float64)
    assert checkpoint_bytes(loaded, text) == (tmp_path / "r.abcm").read_bytes()


def test_residual_input_gradient_fp():
    spec = small_resnet_spec((1, 6, 6), 3, channels=4, blocks=1)
    model = build_model(spec, make_rng(3), dtype=np.float64)
    for layer in model.layers:
        if hasattr(layer, "needs_input_grad"):
            layer.needs_input_grad = True
    rng = make_rng(4)
    x, y = rng.normal(size=(4, 1, 6, 6)), rng.integers(0, 3, 4)
    _, g = softmax_cross_entropy(model.forward(x, training=True), y)
    gx = model.backward(g)
    np.testing.assert_allclose(gx, fd_gradient(lambda: loss_of(model, x, y), x), rtol=1e-5, atol=1e-9)


def test_residual_source_validation():
    from abcnet.config import ConfigError, validate

    spec = small_resnet_spec((1, 6, 6), 3, channels=4, blocks=1)
    next(ls for ls in spec.layers if ls.kind == "residual").source = 99
    problems = validate(RunConfig(model=spec))
    assert any("source" in p for p in problems)
