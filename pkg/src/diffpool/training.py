"""Minibatch SGD with a max-norm weight constraint and a validation-driven
learning-rate schedule (hold, then halve each epoch once improvement stalls,
stop when it vanishes)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, TrainingError
from .network import Gradients, Model, backward, forward
from .numeric import PROB_FLOOR, cross_entropy, make_rng


@dataclass(frozen=True)
class NewbobConfig:
    ramp_threshold: float = 0.005   # relative improvement below this starts halving
    stop_threshold: float = 0.001   # relative improvement below this, while halving, stops
    halving_factor: float = 0.5

    def __post_init__(self):
        if self.ramp_threshold < 0 or self.stop_threshold < 0:
            raise ConfigError("newbob thresholds must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.008
    batch_size: int = 64
    max_epochs: int = 30
    newbob: NewbobConfig = field(default_factory=NewbobConfig)
    max_norm_limit: float | None = 1.0
    momentum: float = 0.0
    seed: int = 0
    # LHUC amplitudes stay at the identity during ordinary training and are
    # only re-estimated by the adaptation harness.  Adding "rho" here trains
    # a fixed-order Lp model whose orders can still be adapted afterwards.
    freeze: tuple = ("lhuc",)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")


class EvalResult(NamedTuple):
    frame_error: float
    mean_loss: float


@dataclass
class TrainReport:
    """Per-epoch log of a training run plus how and where it stopped."""

    epochs: list  # rows of (epoch, lr, train_loss, valid_error)
    initial_valid_error: float
    best_epoch: int
    best_valid_error: float
    stop_reason: str

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "lr", "train_loss", "valid_error"])
            for epoch, lr, train_loss, valid_error in self.epochs:
                writer.writerow([
                    epoch,
                    format(lr, ".17g"),
                    format(train_loss, ".17g"),
                    format(valid_error, ".17g"),
                ])

    def to_dict(self) -> dict:
        return {
            "epochs": [list(row) for row in self.epochs],
            "initial_valid_error": self.initial_valid_error,
            "best_epoch": self.best_epoch,
            "best_valid_error": self.best_valid_error,
            "stop_reason": self.stop_reason,
        }


def max_norm_columns(model: Model, limit: float) -> None:
    """Rescale every affine weight column whose L2 norm exceeds the limit.

    Applies to all weight matrices, including the ones feeding pool inputs;
    biases and pooling parameters are never constrained.
    """
    for layer in model.layers:
        W = layer.params["W"]
        norms = np.sqrt((W * W).sum(axis=0))
        over = norms > limit
        if over.any():
            W[:, over] *= limit / norms[over]


def sgd_step(
    model: Model,
    grads: Gradients,
    lr: float,
    max_norm_limit: float | None = 1.0,
    selection=None,
) -> Model:
    """One in-place gradient step, then the column max-norm constraint.

    `selection` restricts the update to (layer_index, param_name) pairs;
    arrays outside it are not touched at all, which adaptation relies on for
    bit-exact freezing.
    """
    if not grads.all_finite():
        raise TrainingError("non-finite gradient; aborting the update")
    for i, name, _, arr in model.param_items():
        if selection is not None and (i, name) not in selection:
            continue
        arr -= lr * grads.layers[i][name]
    if max_norm_limit is not None:
        max_norm_columns(model, max_norm_limit)
    model.bump_version()
    return model


def newbob_action(valid_errors, cfg: NewbobConfig) -> str:
    """Next learning-rate action given the validation-error history.

    Pure function of the sequence: the ramp/halving state is replayed from
    the start, so identical histories always yield identical decisions.
    """
    if len(valid_errors) < 1:
        raise ConfigError("newbob needs at least one completed epoch")
    halving = False
    for prev, cur in zip(valid_errors, valid_errors[1:]):
        rel = (prev - cur) / prev if prev > 0 else 0.0
        if halving and rel < cfg.stop_threshold:
            return "stop"
        if not halving and rel < cfg.ramp_threshold:
            halving = True
    return "halve" if halving else "keep"


def evaluate(model: Model, features, labels, chunk: int = 4096) -> EvalResult:
    """Frame error under the argmax decision, plus the mean loss."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    wrong = 0
    loss_sum = 0.0
    for start in range(0, features.shape[0], chunk):
        xs = features[start:start + chunk]
        ys = labels[start:start + chunk]
        probs, _ = forward(model, xs)
        wrong += int((probs.argmax(axis=1) != ys).sum())
        picked = np.maximum(probs[np.arange(len(ys)), ys], PROB_FLOOR)
        loss_sum += float(-np.log(picked).sum())
    n = features.shape[0]
    return EvalResult(frame_error=wrong / n, mean_loss=loss_sum / n)


def split_train_valid(features, labels, valid_fraction: float, seed: int):
    """Deterministic shuffle split of a training set into train/valid parts."""
    if not 0.0 < valid_fraction < 1.0:
        raise ConfigError("valid_fraction must be in (0, 1)")
    n = len(labels)
    n_valid = max(1, int(round(n * valid_fraction)))
    if n_valid >= n:
        raise ConfigError("validation split would consume the whole training set")
    perm = make_rng(seed).permutation(n)
    valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return (features[train_idx], labels[train_idx]), (features[valid_idx], labels[valid_idx])


def train(model: Model, train_set, valid_set, cfg: TrainConfig) -> tuple[Model, TrainReport]:
    """Train a copy of the model; returns the best-validation-error state.

    Deterministic given (model, data, cfg): shuffling comes from cfg.seed and
    batches accumulate in a fixed order.  Ties on validation error keep the
    earlier epoch.  The input model is left untouched.
    """
    x_train, y_train = np.asarray(train_set[0], dtype=np.float64), np.asarray(train_set[1], dtype=np.int64)
    x_valid, y_valid = np.asarray(valid_set[0], dtype=np.float64), np.asarray(valid_set[1], dtype=np.int64)
    if x_train.shape[0] == 0 or x_valid.shape[0] == 0:
        raise ConfigError("train and validation sets must be non-empty")
    if y_train.max(initial=0) >= model.out_dim or y_valid.max(initial=0) >= model.out_dim:
        raise ConfigError("label exceeds the model's output dimension")

    work = model.copy()
    rng = make_rng(cfg.seed)
    lr = cfg.initial_lr
    velocity: Gradients | None = None

    initial = evaluate(work, x_valid, y_valid)
    best_error = initial.frame_error
    best_epoch = 0
    best_params = [{k: v.copy() for k, v in layer.params.items()} for layer in work.layers]

    rows = []
    errors = []
    stop_reason = "max_epochs"
    n = x_train.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            probs, trace = forward(work, xb)
            loss, _ = cross_entropy(probs, yb)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting at {start}"
                )
            grads = backward(work, trace, yb, frozen=cfg.freeze)
            if cfg.momentum > 0.0:
                if velocity is None:
                    velocity = Gradients.zeros_like(work)
                for i, layer in enumerate(grads.layers):
                    for name, g in layer.items():
                        v = velocity.layers[i][name]
                        v *= cfg.momentum
                        v += g
                        layer[name] = v.copy()
            sgd_step(work, grads, lr, cfg.max_norm_limit)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n
        result = evaluate(work, x_valid, y_valid)
        rows.append((epoch, lr, train_loss, result.frame_error))
        errors.append(result.frame_error)
        if result.frame_error < best_error:
            best_error = result.frame_error
            best_epoch = epoch
            best_params = [
                {k: v.copy() for k, v in layer.params.items()} for layer in work.layers
            ]
        action = newbob_action(errors, cfg.newbob)
        if action == "stop":
            stop_reason = "newbob"
            break
        if action == "halve":
            lr *= cfg.newbob.halving_factor

    best = work.copy()
    for layer, params in zip(best.layers, best_params):
        layer.params = {k: v.copy() for k, v in params.items()}
    report = TrainReport(
        epochs=rows,
        initial_valid_error=initial.frame_error,
        best_epoch=best_epoch,
        best_valid_error=best_error,
        stop_reason=stop_reason,
    )
    return best, report
