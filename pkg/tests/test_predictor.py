"""Signal predictors: label fusion, noisy oracle, trainable regressor."""

import dataclasses

import numpy as np
import pytest

from csdetect.core import CompressedSignal
from csdetect.predictor import (
    RegressorModel,
    TrainingExample,
    downsample_patch,
    fuse_labels,
    init_model,
    load_model,
    loss_and_gradients,
    oracle_predict,
    predict,
    predict_with_count,
    save_model,
    save_training_log,
    train_regressor,
)


def _signal(rng, block_size=4, block_count=3):
    return CompressedSignal(
        values=rng.normal(size=block_size * block_count),
        block_size=block_size,
        block_count=block_count,
    )


def test_fuse_labels_layout():
    y = _signal(np.random.default_rng(0))
    fused = fuse_labels(y, cell_count=5, lam=0.2)
    assert fused.size == y.length + 1
    assert fused[-1] == pytest.approx(1.0)
    assert np.array_equal(fused[:-1], y.values)
    assert fuse_labels(y, cell_count=5, lam=0.0)[-1] == 0.0
    assert fuse_labels(y, cell_count=0, lam=0.7)[-1] == 0.0
    with pytest.raises(ValueError):
        fuse_labels(y, cell_count=-1, lam=0.2)
    with pytest.raises(ValueError):
        fuse_labels(y, cell_count=1, lam=-0.2)


def test_oracle_sigma_zero_is_identity():
    y = _signal(np.random.default_rng(1))
    assert oracle_predict(y, sigma_rel=0.0, seed=3) == y


def test_oracle_is_seeded():
    y = _signal(np.random.default_rng(2))
    a = oracle_predict(y, sigma_rel=0.1, seed=9)
    b = oracle_predict(y, sigma_rel=0.1, seed=9)
    c = oracle_predict(y, sigma_rel=0.1, seed=10)
    assert a == b
    assert a != c


def test_oracle_noise_level_concentrates():
    rng = np.random.default_rng(3)
    y = _signal(rng, block_size=112, block_count=27)
    errs = [
        np.linalg.norm(oracle_predict(y, 0.05, seed).values - y.values)
        / np.linalg.norm(y.values)
        for seed in range(100)
    ]
    assert 0.03 <= float(np.mean(errs)) <= 0.07


def test_downsample_identity_and_pooling():
    rng = np.random.default_rng(4)
    patch = rng.uniform(size=(8, 8))
    flat = downsample_patch(patch, 8)
    assert np.allclose(flat, patch.ravel() - 0.5)
    pooled = downsample_patch(patch, 4)
    assert pooled[0] == pytest.approx(patch[:2, :2].mean() - 0.5)
    ragged = downsample_patch(rng.uniform(size=(10, 10)), 4)
    assert ragged.size == 16
    with pytest.raises(ValueError):
        downsample_patch(patch, 9)


def test_model_shape_validation():
    model = init_model(input_edge=4, hidden=6, block_size=3, block_count=2, mtl_lambda=0.2, seed=0)
    assert model.input_size == 16
    assert model.output_size == 7  # 6 signal entries + count channel
    no_count = init_model(4, 6, 3, 2, mtl_lambda=0.0, seed=0)
    assert no_count.output_size == 6
    with pytest.raises(ValueError, match="non-finite"):
        dataclasses.replace(model, w1=np.full((16, 6), np.nan))
    with pytest.raises(ValueError):
        dataclasses.replace(model, b2=np.zeros(5))


def test_gradients_match_finite_differences_loosely():
    rng = np.random.default_rng(5)
    w1 = rng.normal(size=(9, 4)) * 0.3
    b1 = rng.normal(size=4) * 0.1
    w2 = rng.normal(size=(4, 5)) * 0.3
    b2 = rng.normal(size=5) * 0.1
    x = rng.normal(size=(3, 9))
    y = rng.normal(size=(3, 5))
    _, (gw1, _, _, gb2) = loss_and_gradients(w1, b1, w2, b2, x, y)
    h = 1e-6
    for (arr, grad, idx) in ((w1, gw1, (2, 1)), (b2, gb2, (3,))):
        arr[idx] += h
        up = loss_and_gradients(w1, b1, w2, b2, x, y)[0]
        arr[idx] -= 2 * h
        down = loss_and_gradients(w1, b1, w2, b2, x, y)[0]
        arr[idx] += h
        assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5)


def test_training_memorizes_one_example():
    rng = np.random.default_rng(6)
    ex = TrainingExample(patch=rng.uniform(size=(8, 8)), label=rng.normal(scale=12.0, size=9))
    model, losses = train_regressor(
        [ex], epochs=2000, learning_rate=0.05, seed=1,
        block_size=4, block_count=2, mtl_lambda=0.2, hidden=16,
        batch_size=4, input_edge=8,
    )
    assert losses[-1] < 1e-3 * losses[0]
    y_hat = predict(model, ex.patch)
    truth = ex.label[:-1]
    assert np.linalg.norm(y_hat.values - truth) < 1e-2 * np.linalg.norm(truth)


def test_training_is_deterministic():
    rng = np.random.default_rng(7)
    examples = [
        TrainingExample(patch=rng.uniform(size=(8, 8)), label=rng.normal(size=8))
        for _ in range(5)
    ]
    kwargs = dict(epochs=40, learning_rate=0.02, seed=3, block_size=4,
                  block_count=2, mtl_lambda=0.0, hidden=8, batch_size=2, input_edge=8)
    a, losses_a = train_regressor(examples, **kwargs)
    b, losses_b = train_regressor(examples, **kwargs)
    assert losses_a == losses_b
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)
    assert np.array_equal(a.b1, b.b1) and np.array_equal(a.b2, b.b2)


def test_training_validates_inputs():
    with pytest.raises(ValueError):
        train_regressor([], epochs=1, learning_rate=0.1, seed=0, block_size=2, block_count=1)
    ex = TrainingExample(patch=np.zeros((8, 8)), label=np.zeros(3))
    with pytest.raises(ValueError, match="label length"):
        train_regressor([ex], epochs=1, learning_rate=0.1, seed=0,
                        block_size=2, block_count=1, input_edge=8)


def test_predict_zero_weight_model_gives_zero_signal():
    model = init_model(4, 6, 3, 2, mtl_lambda=0.0, seed=0)
    model = dataclasses.replace(
        model, w1=np.zeros_like(model.w1), w2=np.zeros_like(model.w2)
    )
    y_hat = predict(model, np.full((4, 4), 0.7))
    assert np.array_equal(y_hat.values, np.zeros(6))
    assert y_hat.block_size == 3 and y_hat.block_count == 2


def test_predict_shape_and_count_channel():
    model = init_model(4, 6, 3, 2, mtl_lambda=0.5, seed=2)
    patch = np.random.default_rng(8).uniform(size=(4, 4))
    y_hat, count = predict_with_count(model, patch)
    assert y_hat.length == 6
    assert count is not None
    no_count = init_model(4, 6, 3, 2, mtl_lambda=0.0, seed=2)
    assert predict_with_count(no_count, patch)[1] is None


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    ex = TrainingExample(patch=rng.uniform(size=(8, 8)), label=rng.normal(size=9))
    model, _ = train_regressor(
        [ex], epochs=5, learning_rate=0.01, seed=4,
        block_size=4, block_count=2, mtl_lambda=0.3, hidden=8,
        batch_size=1, input_edge=8,
    )
    path = tmp_path / "model.bin"
    save_model(model, path)
    loaded = load_model(path)
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(loaded, name), getattr(model, name))
    assert loaded.input_edge == model.input_edge
    assert loaded.block_size == model.block_size
    assert loaded.block_count == model.block_count
    assert loaded.mtl_lambda == model.mtl_lambda
    assert loaded.output_scale == model.output_scale
    assert loaded.epochs == model.epochs
    assert loaded.learning_rate == model.learning_rate
    assert loaded.final_loss == model.final_loss
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="weights"):
        load_model(path)


def test_training_log_csv(tmp_path):
    path = tmp_path / "log.csv"
    save_training_log([0.5, 0.25, 0.125], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss"
    assert lines[1] == "1,0.5"
    assert len(lines) == 4
