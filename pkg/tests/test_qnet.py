from __future__ import annotations

import numpy as np
import pytest

from lanegate.dataset import Sample, split_and_scale
from lanegate.qnet import (
    TrainConfig,
    _forward_train,
    init_params,
    load_model,
    pinball_loss,
    predict_quantiles,
    save_model,
    train,
    training_loss_and_grads,
)


def test_pinball_tabulated_values_exact():
    assert pinball_loss(1.0, 1.0, 0.5) == 0.0
    assert pinball_loss(2.0, 2.0, 0.95) == 0.0
    assert abs(pinball_loss(1.0, 0.0, 0.95) - 0.95) <= 1e-12
    assert abs(pinball_loss(1.0, 0.0, 0.05) - 0.05) <= 1e-12
    assert abs(pinball_loss(0.0, 1.0, 0.95) - 0.05) <= 1e-12
    # Asymmetry identity: pinball(q) + pinball(1-q) equals the absolute error.
    rng = np.random.default_rng(0)
    y, y_hat = rng.normal(size=100), rng.normal(size=100)
    for q in (0.05, 0.25, 0.5, 0.9):
        total = pinball_loss(y, y_hat, q) + pinball_loss(y, y_hat, 1.0 - q)
        assert np.abs(total - np.abs(y - y_hat)).max() <= 1e-12


def test_pinball_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(1)
    y, y_hat = rng.normal(size=1000), rng.normal(size=1000)
    vals = pinball_loss(y, y_hat, 0.3)
    assert np.all(vals >= 0.0)
    assert np.all((vals == 0.0) == (y == y_hat))
    with pytest.raises(ValueError):
        pinball_loss(1.0, 0.0, 1.5)


def gradcheck(widths, seed, n_checks=40, h=1e-6, rtol=1e-4):
    rng = np.random.default_rng(seed)
    params = init_params(widths, rng)
    x = rng.normal(size=(16, widths[0]))
    out, _ = _forward_train(params, x, 1e-5)
    # Labels offset from the predictions keep residuals away from the loss kink.
    y = out[:, 0] + rng.uniform(0.3, 1.0, size=16) * np.sign(rng.normal(size=16))
    loss, grads = training_loss_and_grads(params, x, y, 0.05, 0.95)
    worst = 0.0
    for p_arr, g_arr in zip(params.flat(), grads.flat()):
        flat_p = p_arr.ravel()
        flat_g = g_arr.ravel()
        idx = rng.choice(flat_p.size, size=min(n_checks, flat_p.size), replace=False)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp, _ = training_loss_and_grads(params, x, y, 0.05, 0.95)
            flat_p[i] = orig - h
            lm, _ = training_loss_and_grads(params, x, y, 0.05, 0.95)
            flat_p[i] = orig
            fd = (lp - lm) / (2.0 * h)
            scale = max(abs(fd), abs(flat_g[i]), 1e-8)
            worst = max(worst, abs(fd - flat_g[i]) / scale)
    return worst


def test_gradients_match_finite_differences():
    assert gradcheck((19, 8, 8, 2), seed=3) <= 1e-4
    assert gradcheck((19, 8, 8, 2), seed=7) <= 1e-4


def _synthetic_samples(n, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        f = rng.uniform(0.2, 1.0, 19)
        label = 1.0 + 0.8 * f[4] + (noise * rng.normal() if noise else 0.0)
        out.append(Sample(features=f, label=max(0.0, label), seg_id=f"g{i}",
                          man_idx=0, deg_idx=0))
    return out


FAST = TrainConfig(widths=(19, 16, 16, 2), batch_size=64, learning_rate=3e-3,
                   max_epochs=150, patience=30)


def test_linear_function_learned():
    samples = _synthetic_samples(2000, seed=11)
    splits = split_and_scale(samples, 0.8, 100, seed=0)
    model = train(splits, alpha=0.2, hyper=FAST, seed=1)
    x_test, y_test = splits.matrices("test")
    preds = model.predict_scaled(x_test)
    pin = 0.5 * (pinball_loss(y_test, preds[:, 0], model.q_lo)
                 + pinball_loss(y_test, preds[:, 1], model.q_hi))
    assert pin.mean() <= 0.1 * y_test.std()


def test_quantile_coverage_on_noisy_synthetic():
    samples = _synthetic_samples(5000, seed=13, noise=0.2)
    splits = split_and_scale(samples, 0.7, 100, seed=2)
    model = train(splits, alpha=0.2, hyper=FAST, seed=5)
    x_test, y_test = splits.matrices("test")
    preds = model.predict_scaled(x_test)
    below_lo = float((y_test < preds[:, 0]).mean())
    assert abs(below_lo - model.q_lo) <= 0.04


def test_training_deterministic():
    samples = _synthetic_samples(400, seed=17)
    splits = split_and_scale(samples, 0.8, 20, seed=3)
    cfg = TrainConfig(widths=(19, 16, 16, 2), max_epochs=20, patience=5)
    a = train(splits, alpha=0.1, hyper=cfg, seed=9)
    b = train(splits, alpha=0.1, hyper=cfg, seed=9)
    assert a.checksum() == b.checksum()
    c = train(splits, alpha=0.1, hyper=cfg, seed=10)
    assert c.checksum() != a.checksum()


def test_one_epoch_descends():
    samples = _synthetic_samples(16000, seed=23, noise=0.1)
    splits = split_and_scale(samples, 0.8, 100, seed=4)
    cfg = TrainConfig(max_epochs=1, early_stopping=True, patience=1)
    model = train(splits, alpha=0.01, hyper=cfg, seed=0)
    assert model.history["val_losses"][0] < model.history["pre_train_loss"]


def test_prediction_ordering_and_batching():
    samples = _synthetic_samples(600, seed=29, noise=0.3)
    splits = split_and_scale(samples, 0.8, 30, seed=5)
    model = train(splits, alpha=0.2, hyper=FAST, seed=2)
    x_test, _ = splits.matrices("test")
    batch_preds = model.predict_scaled(x_test)
    assert np.all(batch_preds[:, 0] <= batch_preds[:, 1])
    assert np.all(batch_preds >= 0.0)
    for i in range(0, len(x_test), 17):
        lo, hi = predict_quantiles(model, x_test[i])
        assert (lo, hi) == (batch_preds[i, 0], batch_preds[i, 1])


def test_model_roundtrip(tmp_path):
    samples = _synthetic_samples(400, seed=31)
    splits = split_and_scale(samples, 0.8, 20, seed=6)
    cfg = TrainConfig(widths=(19, 16, 16, 2), max_epochs=15, patience=5)
    model = train(splits, alpha=0.1, hyper=cfg, seed=12)
    path = tmp_path / "model.json"
    save_model(model, path, extra={"dataset_hash": "abc"})
    loaded, payload = load_model(path)
    assert loaded.checksum() == model.checksum()
    assert payload["dataset_hash"] == "abc"
    x = splits.matrices("test")[0]
    assert np.array_equal(loaded.predict_scaled(x), model.predict_scaled(x))
    assert (loaded.q_lo, loaded.q_hi) == (model.q_lo, model.q_hi)


def test_rejects_bad_alpha_and_widths():
    samples = _synthetic_samples(100, seed=37)
    splits = split_and_scale(samples, 0.8, 5, seed=7)
    with pytest.raises(ValueError):
        train(splits, alpha=0.7)
    with pytest.raises(ValueError):
        train(splits, alpha=0.1, hyper=TrainConfig(widths=(19, 8, 3)))
