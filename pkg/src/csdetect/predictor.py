"""Signal predictors: the regression stage between a patch and its code.

The detection pipeline needs something that maps an image patch to the
compressed signal its annotations would encode to. Two implementations:

* oracle_predict: the true signal plus seeded per-block Gaussian noise,
  for studying decoder behavior under a controlled error level.
* a small trainable regressor: block-mean downsample to a fixed input
  edge, one tanh hidden layer, linear output, squared-error loss, plain
  mini-batch gradient descent. Optionally trained on fused labels
  {y, lambda * cell_count}; prediction strips the trailing count channel.

Any callable with the predict() signature can replace these.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import CompressedSignal, fmt_float

__all__ = [
    "TrainingExample",
    "RegressorModel",
    "fuse_labels",
    "oracle_predict",
    "downsample_patch",
    "init_model",
    "loss_and_gradients",
    "train_regressor",
    "predict",
    "predict_with_count",
    "save_model",
    "load_model",
    "save_training_log",
]

_MODEL_HEADER = struct.Struct("<qqqqqq")
_MODEL_FLOATS = struct.Struct("<dddd")


def fuse_labels(y: CompressedSignal, cell_count: int, lam: float) -> np.ndarray:
    """Training label {y, lambda * count}: the signal with one extra entry."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if cell_count < 0:
        raise ValueError("cell_count must be >= 0")
    return np.concatenate([y.values, [lam * cell_count]])


def oracle_predict(y_true: CompressedSignal, sigma_rel: float, seed: int) -> CompressedSignal:
    """The true signal corrupted by seeded Gaussian noise, block by block.

    Per-block noise standard deviation is sigma_rel * ||block|| / sqrt(M),
    which makes the expected relative error of the whole vector equal to
    sigma_rel. sigma_rel = 0 returns the signal unchanged.
    """
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be >= 0")
    rng = np.random.default_rng(seed)
    scale = sigma_rel / math.sqrt(y_true.block_size)
    noisy = [
        block + rng.normal(0.0, scale * float(np.linalg.norm(block)), y_true.block_size)
        for block in y_true.blocks()
    ]
    return CompressedSignal(
        values=np.concatenate(noisy),
        block_size=y_true.block_size,
        block_count=y_true.block_count,
    )


@dataclass(frozen=True)
class TrainingExample:
    patch: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        patch = np.asarray(self.patch, dtype=np.float64)
        label = np.asarray(self.label, dtype=np.float64).ravel()
        if patch.ndim != 2:
            raise ValueError("patch must be a 2-D pixel matrix")
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "label", label)


@dataclass(frozen=True)
class RegressorModel:
    """One-hidden-layer network plus the label-layout metadata needed to
    turn its raw output back into a CompressedSignal.

    The network is trained against labels divided by output_scale (their
    RMS), which keeps one learning rate usable across signal scales;
    prediction multiplies the scale back in.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    input_edge: int
    block_size: int
    block_count: int
    mtl_lambda: float
    output_scale: float = 1.0
    epochs: int = 0
    learning_rate: float = 0.0
    final_loss: float = math.nan

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite weights")
            object.__setattr__(self, name, arr)
        expected = self.block_size * self.block_count + (1 if self.mtl_lambda > 0 else 0)
        if self.w2.shape[1] != expected or self.b2.shape != (expected,):
            raise ValueError(
                f"output layer is {self.w2.shape[1]} wide, label layout wants {expected}"
            )
        if self.w1.shape[0] != self.input_edge**2:
            raise ValueError("w1 rows must equal input_edge**2")

    @property
    def input_size(self) -> int:
        return self.input_edge**2

    @property
    def hidden_size(self) -> int:
        return int(self.w1.shape[1])

    @property
    def output_size(self) -> int:
        return int(self.w2.shape[1])


def downsample_patch(patch: np.ndarray, edge: int) -> np.ndarray:
    """Block-mean pool a patch to edge x edge and flatten, centering pixel
    values around mid-gray. Uneven patch sizes split into near-equal blocks."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ValueError("patch must be 2-D")
    h, w = patch.shape
    if h < edge or w < edge:
        raise ValueError(f"patch {h}x{w} is smaller than the {edge}x{edge} model input")
    if h % edge == 0 and w % edge == 0:
        pooled = patch.reshape(edge, h // edge, edge, w // edge).mean(axis=(1, 3))
    else:
        rows = np.array_split(np.arange(h), edge)
        cols = np.array_split(np.arange(w), edge)
        row_means = np.stack([patch[r].mean(axis=0) for r in rows])
        pooled = np.stack([row_means[:, c].mean(axis=1) for c in cols], axis=1)
    return pooled.ravel() - 0.5


def init_model(
    input_edge: int,
    hidden: int,
    block_size: int,
    block_count: int,
    mtl_lambda: float,
    seed: int,
) -> RegressorModel:
    """Untrained model with scaled Gaussian weights."""
    rng = np.random.default_rng(seed)
    n_in = input_edge**2
    n_out = block_size * block_count + (1 if mtl_lambda > 0 else 0)
    return RegressorModel(
        w1=rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n_out)),
        b2=np.zeros(n_out),
        input_edge=input_edge,
        block_size=block_size,
        block_count=block_count,
        mtl_lambda=mtl_lambda,
    )


def _forward(w1, b1, w2, b2, x):
    hidden = np.tanh(x @ w1 + b1)
    return hidden, hidden @ w2 + b2


def loss_and_gradients(w1, b1, w2, b2, x_batch, y_batch):
    """Mean squared-error loss over the batch and its analytic gradients.

    loss = 0.5 * mean_i ||out_i - label_i||^2; returns (loss, (gw1, gb1,
    gw2, gb2)).
    """
    hidden, out = _forward(w1, b1, w2, b2, x_batch)
    diff = out - y_batch
    batch = x_batch.shape[0]
    loss = 0.5 * float(np.sum(diff**2)) / batch
    d_out = diff / batch
    gw2 = hidden.T @ d_out
    gb2 = d_out.sum(axis=0)
    d_hidden = (d_out @ w2.T) * (1.0 - hidden**2)
    gw1 = x_batch.T @ d_hidden
    gb1 = d_hidden.sum(axis=0)
    return loss, (gw1, gb1, gw2, gb2)


def train_regressor(
    examples,
    epochs: int,
    learning_rate: float,
    seed: int,
    *,
    block_size: int,
    block_count: int,
    mtl_lambda: float = 0.0,
    hidden: int = 64,
    batch_size: int = 32,
    input_edge: int = 32,
) -> tuple:
    """Mini-batch gradient descent on squared error.

    Returns (model, per-epoch mean losses). Deterministic for a fixed seed:
    initialization and epoch shuffles come from one generator.
    """
    if not examples:
        raise ValueError("need at least one training example")
    if epochs < 1 or learning_rate <= 0:
        raise ValueError("need epochs >= 1 and learning_rate > 0")
    n_out = block_size * block_count + (1 if mtl_lambda > 0 else 0)
    for ex in examples:
        if ex.label.size != n_out:
            raise ValueError(
                f"label length {ex.label.size} does not match layout {n_out}"
            )
    x = np.stack([downsample_patch(ex.patch, input_edge) for ex in examples])
    y = np.stack([ex.label for ex in examples])
    scale = float(np.sqrt(np.mean(y**2)))
    if scale == 0.0:
        scale = 1.0
    y = y / scale

    rng = np.random.default_rng(seed)
    n_in = input_edge**2
    w1 = rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n_out))
    b2 = np.zeros(n_out)

    losses = []
    count = len(examples)
    for _ in range(epochs):
        order = rng.permutation(count)
        epoch_loss = 0.0
        for start in range(0, count, batch_size):
            batch = order[start : start + batch_size]
            loss, (gw1, gb1, gw2, gb2) = loss_and_gradients(
                w1, b1, w2, b2, x[batch], y[batch]
            )
            w1 -= learning_rate * gw1
            b1 -= learning_rate * gb1
            w2 -= learning_rate * gw2
            b2 -= learning_rate * gb2
            epoch_loss += loss * len(batch)
        losses.append(epoch_loss / count)

    model = RegressorModel(
        w1=w1, b1=b1, w2=w2, b2=b2,
        input_edge=input_edge,
        block_size=block_size,
        block_count=block_count,
        mtl_lambda=mtl_lambda,
        output_scale=scale,
        epochs=epochs,
        learning_rate=learning_rate,
        final_loss=losses[-1],
    )
    return model, losses


def _raw_predict(model: RegressorModel, patch: np.ndarray) -> np.ndarray:
    features = downsample_patch(patch, model.input_edge)
    _, out = _forward(model.w1, model.b1, model.w2, model.b2, features[None, :])
    return out[0] * model.output_scale


def predict(model: RegressorModel, patch: np.ndarray) -> CompressedSignal:
    """Forward pass; under label fusion the count channel is dropped."""
    return predict_with_count(model, patch)[0]


def predict_with_count(model: RegressorModel, patch: np.ndarray) -> tuple:
    """(predicted signal, predicted cell count or None without fusion)."""
    out = _raw_predict(model, patch)
    if model.mtl_lambda > 0:
        count = float(out[-1]) / model.mtl_lambda
        out = out[:-1]
    else:
        count = None
    signal = CompressedSignal(
        values=out, block_size=model.block_size, block_count=model.block_count
    )
    return signal, count


def save_model(model: RegressorModel, path) -> None:
    """Dimensions header + four training floats + row-major f8 weights."""
    with open(path, "wb") as fh:
        fh.write(
            _MODEL_HEADER.pack(
                model.input_edge,
                model.hidden_size,
                model.output_size,
                model.block_size,
                model.block_count,
                model.epochs,
            )
        )
        fh.write(
            _MODEL_FLOATS.pack(
                model.mtl_lambda, model.output_scale, model.learning_rate, model.final_loss
            )
        )
        for arr in (model.w1, model.b1, model.w2, model.b2):
            fh.write(arr.astype("<f8").tobytes())


def load_model(path) -> RegressorModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    edge, hidden, n_out, block_size, block_count, epochs = _MODEL_HEADER.unpack_from(raw)
    lam, scale, lr, final_loss = _MODEL_FLOATS.unpack_from(raw, _MODEL_HEADER.size)
    offset = _MODEL_HEADER.size + _MODEL_FLOATS.size
    n_in = edge * edge
    body = np.frombuffer(raw, dtype="<f8", offset=offset)
    sizes = [n_in * hidden, hidden, hidden * n_out, n_out]
    if body.size != sum(sizes):
        raise ValueError(f"{path}: expected {sum(sizes)} weights, found {body.size}")
    parts = np.split(body, np.cumsum(sizes)[:-1])
    return RegressorModel(
        w1=parts[0].reshape(n_in, hidden),
        b1=parts[1],
        w2=parts[2].reshape(hidden, n_out),
        b2=parts[3],
        input_edge=int(edge),
        block_size=int(block_size),
        block_count=int(block_count),
        mtl_lambda=float(lam),
        output_scale=float(scale),
        epochs=int(epochs),
        learning_rate=float(lr),
        final_loss=float(final_loss),
    )


def save_training_log(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(losses, start=1):
            writer.writerow([epoch, fmt_float(loss)])
