"""Two-head quantile regressor: rectified MLP trained with pinball loss.

Architecture: input 19 -> two hidden layers of 209 rectified units with
batch normalization -> rectified 2-unit output (lower and upper quantile
head).  Training uses mini-batch RMSprop with early stopping on a held-out
validation slice of the training split.  Everything is plain float64 numpy,
single threaded, and bit-reproducible for a fixed seed; models serialize to
a versioned JSON file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetSplits, StandardScaler, substream, validate_features

DEFAULT_WIDTHS = (19, 209, 209, 2)

_DOMAIN_TRAIN = 5


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; defaults follow the study setup."""

    widths: tuple = DEFAULT_WIDTHS
    batch_size: int = 64
    learning_rate: float = 5e-4
    max_epochs: int = 1200
    early_stopping: bool = True
    patience: int = 50
    val_frac: float = 0.1
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


def pinball_loss(y, y_hat, q):
    """Quantile loss max(q*(y - y_hat), (q - 1)*(y - y_hat)); arrays broadcast."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    e = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return np.maximum(q * e, (q - 1.0) * e)


@dataclass
class Params:
    """Learnable parameters; batch-norm applies to hidden layers only."""

    weights: list
    biases: list
    gamma: list
    beta: list

    def flat(self):
        return self.weights + self.biases + self.gamma + self.beta

    def copy(self):
        return Params([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                      [g.copy() for g in self.gamma], [b.copy() for b in self.beta])


def init_params(widths, rng) -> Params:
    weights, biases, gamma, beta = [], [], [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    for width in widths[1:-1]:
        gamma.append(np.ones(width))
        beta.append(np.zeros(width))
    return Params(weights, biases, gamma, beta)


def _forward_train(params: Params, x, bn_eps):
    """Training-mode forward (batch statistics); returns output and caches."""
    h = x
    caches = []
    n_hidden = len(params.gamma)
    for l in range(n_hidden):
        a = h @ params.weights[l].T + params.biases[l]
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + bn_eps)
        a_hat = (a - mu) * inv_std
        bn = params.gamma[l] * a_hat + params.beta[l]
        out = np.maximum(bn, 0.0)
        caches.append((h, a_hat, inv_std, bn, mu, var))
        h = out
    a_out = h @ params.weights[-1].T + params.biases[-1]
    y = np.maximum(a_out, 0.0)
    caches.append((h, a_out))
    return y, caches


def _backward(params: Params, caches, d_out):
    """Gradients of the training loss w.r.t. every parameter."""
    n_hidden = len(params.gamma)
    grads = Params([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases],
                   [np.zeros_like(g) for g in params.gamma],
                   [np.zeros_like(b) for b in params.beta])
    h_last, a_out = caches[-1]
    da = d_out * (a_out > 0.0)
    grads.weights[-1] = da.T @ h_last
    grads.biases[-1] = da.sum(axis=0)
    dh = da @ params.weights[-1]
    for l in range(n_hidden - 1, -1, -1):
        h_in, a_hat, inv_std, bn, _, _ = caches[l]
        d_bn = dh * (bn > 0.0)
        grads.gamma[l] = (d_bn * a_hat).sum(axis=0)
        grads.beta[l] = d_bn.sum(axis=0)
        d_hat = d_bn * params.gamma[l]
        # Batch-norm backward for biased batch variance.
        da = inv_std * (d_hat - d_hat.mean(axis=0) - a_hat * (d_hat * a_hat).mean(axis=0))
        grads.weights[l] = da.T @ h_in
        grads.biases[l] = da.sum(axis=0)
        dh = da @ params.weights[l]
    return grads


def training_loss_and_grads(params: Params, x, y, q_lo, q_hi, bn_eps=1e-5):
    """Mean pinball loss over samples and both heads, plus analytic gradients."""
    out, caches = _forward_train(params, x, bn_eps)
    e = y[:, None] - out
    q = np.array([q_lo, q_hi])
    losses = np.maximum(q * e, (q - 1.0) * e)
    loss = losses.mean()
    d_out = np.where(e > 0.0, -q, 1.0 - q) / e.size
    return float(loss), _backward(params, caches, d_out)


def _forward_eval(params: Params, x, bn_mean, bn_var, bn_eps):
    h = x
    for l in range(len(params.gamma)):
        a = h @ params.weights[l].T + params.biases[l]
        a_hat = (a - bn_mean[l]) / np.sqrt(bn_var[l] + bn_eps)
        h = np.maximum(params.gamma[l] * a_hat + params.beta[l], 0.0)
    return np.maximum(h @ params.weights[-1].T + params.biases[-1], 0.0)


@dataclass
class QuantileModel:
    """Trained quantile regressor with frozen normalization statistics."""

    widths: tuple
    params: Params
    bn_mean: list
    bn_var: list
    bn_eps: float
    alpha: float
    q_lo: float
    q_hi: float
    scaler: StandardScaler
    seed: int
    hyper: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def predict_scaled(self, x_scaled):
        """Ordered (lo, hi) head outputs for pre-scaled inputs, shape (n, 2).

        Rows are evaluated one at a time so batched and single-sample calls
        are bit-identical (BLAS picks shape-dependent kernels otherwise).
        """
        x_scaled = np.atleast_2d(np.asarray(x_scaled, dtype=float))
        if x_scaled.shape[1] != self.widths[0]:
            raise ValueError(f"expected {self.widths[0]} features, got {x_scaled.shape[1]}")
        rows = [_forward_eval(self.params, row[None, :], self.bn_mean, self.bn_var,
                              self.bn_eps)[0] for row in x_scaled]
        return np.sort(np.stack(rows), axis=1)

    def predict_raw(self, features):
        """Ordered (lo, hi) for one unscaled feature vector."""
        x = validate_features(features)
        lo, hi = self.predict_scaled(self.scaler.transform(x)[None, :])[0]
        return float(lo), float(hi)

    def checksum(self):
        digest = hashlib.sha256()
        for arr in self.params.flat() + self.bn_mean + self.bn_var:
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


def predict_quantiles(model: QuantileModel, x_scaled):
    """Spec-level op: quantile pair for one scaled feature vector."""
    lo, hi = model.predict_scaled(np.asarray(x_scaled, dtype=float)[None, :])[0]
    return float(lo), float(hi)


def train(splits: DatasetSplits, alpha: float, hyper: TrainConfig | None = None,
          seed: int = 0) -> QuantileModel:
    """Train a fresh two-head quantile model for significance level ``alpha``."""
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    hyper = hyper or TrainConfig()
    q_lo, q_hi = alpha / 2.0, 1.0 - alpha / 2.0
    x_all, y_all = splits.matrices("train")
    if len(x_all) == 0:
        raise ValueError("empty training split")
    widths = tuple(hyper.widths)
    if widths[0] != x_all.shape[1] or widths[-1] != 2:
        raise ValueError("network widths must map the feature count to 2 heads")

    rng = substream(seed, _DOMAIN_TRAIN)
    perm = rng.permutation(len(x_all))
    n_val = max(1, round(hyper.val_frac * len(x_all))) if hyper.early_stopping else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, y_train = x_all[train_idx], y_all[train_idx]
    x_val, y_val = x_all[val_idx], y_all[val_idx]

    params = init_params(widths, rng)
    n_hidden = len(widths) - 2
    bn_mean = [np.zeros(w) for w in widths[1:-1]]
    bn_var = [np.ones(w) for w in widths[1:-1]]
    rms = [np.zeros_like(p) for p in params.flat()]

    def eval_loss(x, y):
        out = _forward_eval(params, x, bn_mean, bn_var, hyper.bn_eps)
        e = y[:, None] - out
        q = np.array([q_lo, q_hi])
        return float(np.maximum(q * e, (q - 1.0) * e).mean())

    best = (np.inf, None, None, None)
    stale = 0
    n = len(x_train)
    batch = min(hyper.batch_size, n)
    history = {"pre_train_loss": eval_loss(x_train, y_train), "val_losses": []}
    for epoch in range(hyper.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            xb, yb = x_train[idx], y_train[idx]
            out, caches = _forward_train(params, xb, hyper.bn_eps)
            e = yb[:, None] - out
            q = np.array([q_lo, q_hi])
            loss = np.maximum(q * e, (q - 1.0) * e).mean()
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch} (alpha={alpha}, seed={seed})")
            d_out = np.where(e > 0.0, -q, 1.0 - q) / e.size
            grads = _backward(params, caches, d_out)
            for l in range(n_hidden):
                _, _, _, _, mu, var = caches[l]
                bn_mean[l] = (1.0 - hyper.bn_momentum) * bn_mean[l] + hyper.bn_momentum * mu
                bn_var[l] = (1.0 - hyper.bn_momentum) * bn_var[l] + hyper.bn_momentum * var
            for p, g, acc in zip(params.flat(), grads.flat(), rms):
                acc *= hyper.rms_decay
                acc += (1.0 - hyper.rms_decay) * g * g
                p -= hyper.learning_rate * g / (np.sqrt(acc) + hyper.rms_eps)
        if hyper.early_stopping:
            val_loss = eval_loss(x_val, y_val)
            history["val_losses"].append(val_loss)
            if val_loss < best[0]:
                best = (val_loss, params.copy(), [m.copy() for m in bn_mean],
                        [v.copy() for v in bn_var])
                stale = 0
            else:
                stale += 1
                if stale > hyper.patience:
                    break
    if hyper.early_stopping and best[1] is not None:
        params, bn_mean, bn_var = best[1], best[2], best[3]

    model = QuantileModel(widths=widths, params=params, bn_mean=bn_mean, bn_var=bn_var,
                          bn_eps=hyper.bn_eps, alpha=alpha, q_lo=q_lo, q_hi=q_hi,
                          scaler=StandardScaler(splits.scaler.mean.copy(),
                                                splits.scaler.std.copy()),
                          seed=seed,
                          hyper={"batch_size": hyper.batch_size,
                                 "learning_rate": hyper.learning_rate,
                                 "max_epochs": hyper.max_epochs,
                                 "patience": hyper.patience,
                                 "val_frac": hyper.val_frac},
                          history=history)
    return model


MODEL_SCHEMA_VERSION = 1


def save_model(model: QuantileModel, path, extra=None):
    """Serialize to versioned JSON; ``extra`` fields (e.g. hashes) are merged in."""
    payload = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "widths": list(model.widths),
        "alpha": model.alpha,
        "q_lo": model.q_lo,
        "q_hi": model.q_hi,
        "weights": [w.tolist() for w in model.params.weights],
        "biases": [b.tolist() for b in model.params.biases],
        "bn": {
            "gamma": [g.tolist() for g in model.params.gamma],
            "beta": [b.tolist() for b in model.params.beta],
            "mean": [m.tolist() for m in model.bn_mean],
            "var": [v.tolist() for v in model.bn_var],
            "eps": model.bn_eps,
        },
        "scaler": {"mean": model.scaler.mean.tolist(), "std": model.scaler.std.tolist()},
        "seed": model.seed,
        "hyper": model.hyper,
        "model_id": model.checksum(),
    }
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> tuple[QuantileModel, dict]:
    """Load a model JSON; returns (model, full payload) for hash checks."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {payload.get('schema_version')}")
    params = Params([np.array(w) for w in payload["weights"]],
                    [np.array(b) for b in payload["biases"]],
                    [np.array(g) for g in payload["bn"]["gamma"]],
                    [np.array(b) for b in payload["bn"]["beta"]])
    model = QuantileModel(widths=tuple(payload["widths"]), params=params,
                          bn_mean=[np.array(m) for m in payload["bn"]["mean"]],
                          bn_var=[np.array(v) for v in payload["bn"]["var"]],
                          bn_eps=payload["bn"]["eps"], alpha=payload["alpha"],
                          q_lo=payload["q_lo"], q_hi=payload["q_hi"],
                          scaler=StandardScaler(np.array(payload["scaler"]["mean"]),
                                                np.array(payload["scaler"]["std"])),
                          seed=payload["seed"], hyper=payload.get("hyper", {}))
    if model.checksum() != payload["model_id"]:
        raise ValueError("model checksum mismatch; file corrupted or edited")
    return model, payload
