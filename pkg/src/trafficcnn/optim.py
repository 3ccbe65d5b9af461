"""Adam and the epoch/batch training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .model import Model
from .tensor import Rng, ShapeError


@dataclass
class ArrayDataset:
    """In-memory samples: ``x`` is ``[n, ...]`` model input, ``y`` integer labels."""

    x: np.ndarray
    y: np.ndarray
    video_ids: list[str] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if self.video_ids is not None and len(self.video_ids) != len(self.y):
            raise ValueError("video_ids must align with labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        vids = None if self.video_ids is None else [self.video_ids[i] for i in idx]
        return ArrayDataset(self.x[idx], self.y[idx], vids)


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` map keys to arrays; only keys present in
    ``grads`` are updated, so frozen tensors are never touched.  The step
    counter advances even when ``grads`` is empty.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if params[k].shape != g.shape:
            raise ShapeError(f"{k}: gradient {g.shape} vs parameter {params[k].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    steps_per_epoch: int | None = None
    seed: int = 0
    shuffle: bool = True
    learning_rate: float = 5e-5

    def __post_init__(self):
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            errors.append("steps_per_epoch must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))

    def steps_for(self, n: int) -> int:
        return self.steps_per_epoch or math.ceil(n / self.batch_size)


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    steps: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss", "acc", "val_loss", "val_acc"])
            for e in range(len(self.loss)):
                row = [e + 1, _fmt(self.loss[e]), _fmt(self.acc[e])]
                row += [_fmt(self.val_loss[e]), _fmt(self.val_acc[e])] if e < len(self.val_loss) else ["", ""]
                w.writerow(row)


def _fmt(v: float) -> str:
    return f"{v:.8f}"


def _param_dict(model: Model) -> dict:
    return {(l.name, j): p for l in model.layers if l.name in model.trainable for j, p in enumerate(l.params)}


def batch_order(n: int, steps: int, batch_size: int, rng: Rng, shuffle: bool = True) -> np.ndarray:
    """Sample indices for one epoch, ``[steps, batch_size]``; wraps over the shuffled list."""
    perm = rng.permutation(n) if shuffle else np.arange(n)
    return perm[np.arange(steps * batch_size) % n].reshape(steps, batch_size)


def _prefix_outputs(model: Model, x: np.ndarray, stop: int, batch_size: int = 64) -> np.ndarray:
    outs = [model.forward(x[s:s + batch_size], stop=stop)[0] for s in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def fit(model: Model, train: ArrayDataset, config: TrainConfig, validation: ArrayDataset | None = None,
        state: AdamState | None = None, prefix_cache_bytes: int = 1 << 30) -> History:
    """Train ``model`` in place with Adam on softmax cross-entropy.

    Performs exactly ``epochs * steps_per_epoch`` optimizer steps.  Frozen
    layers below the first trainable one are run once up front when their
    outputs fit in ``prefix_cache_bytes``; their weights are never written.
    """
    if len(train) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if model.layers[-1].spec.activation != "softmax":
        raise ValueError("fit expects a softmax output layer")
    state = state or AdamState(lr=config.learning_rate)
    dtype = next((l.params[0].dtype for l in model.layers if l.params), np.float32)
    classes = model.output_shape[0]
    trainable_idx = [i for i, l in enumerate(model.layers) if l.name in model.trainable]
    first = trainable_idx[0] if trainable_idx else len(model.layers)

    x = np.asarray(train.x, dtype=dtype)
    start = 0
    if 0 < first < len(model.layers):
        width = int(np.prod(model.layers[first - 1].out_shape))
        if len(x) * width * np.dtype(dtype).itemsize <= prefix_cache_bytes:
            x = _prefix_outputs(model, x, first, config.batch_size)
            start = first
    targets = L.one_hot(train.y, classes, dtype)
    params = _param_dict(model)
    steps = config.steps_for(len(train))
    rng = Rng(config.seed)
    hist = History()
    for epoch in range(config.epochs):
        order = batch_order(len(train), steps, config.batch_size, rng.child(epoch), config.shuffle)
        loss_sum = correct = seen = 0.0
        for b in order:
            xb, yb = x[b], targets[b]
            if trainable_idx:
                probs, caches = model.forward(xb, start=start, cache_from=first)
                dz = L.softmax_cross_entropy_backward(probs, yb)
                g = model.backward(dz, caches, stop=first, logits_grad=True)
                grads = {(name, j): gj for name, gs in g.items() for j, gj in enumerate(gs)}
            else:
                probs, _ = model.forward(xb, start=start)
                grads = {}
            adam_step(params, grads, state)
            loss_sum += L.cross_entropy(probs, yb) * len(b)
            correct += float((probs.argmax(axis=1) == yb.argmax(axis=1)).sum())
            seen += len(b)
        hist.loss.append(loss_sum / seen)
        hist.acc.append(correct / seen)
        hist.steps += len(order)
        if validation is not None and len(validation):
            ev = evaluate(model, validation, config.batch_size)
            hist.val_loss.append(ev["loss"])
            hist.val_acc.append(ev["accuracy"])
    return hist


def evaluate(model: Model, data: ArrayDataset, batch_size: int = 64) -> dict[str, float]:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = model.predict(np.asarray(data.x), batch_size)
    onehot = L.one_hot(data.y, probs.shape[1], probs.dtype)
    return {"loss": L.cross_entropy(probs, onehot),
            "accuracy": float((probs.argmax(axis=1) == data.y).mean())}
