"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_error:.3e} over {self.checked} coords"


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def gradient_check(f: Callable[[np.ndarray], float], probe: np.ndarray, analytic: np.ndarray,
                   step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare ``analytic`` with central differences of scalar ``f`` at ``probe``.

    Relative error per coordinate is ``|a - g| / max(1, |a|)``.  Never raises
    on disagreement; the report carries the verdict.
    """
    probe = np.array(probe, dtype=np.float64)
    num = numerical_gradient(f, probe, step)
    a = np.asarray(analytic, dtype=np.float64)
    if a.shape != num.shape:
        return GradCheckReport(float("inf"), False, num.size)
    rel = np.abs(a - num) / np.maximum(1.0, np.abs(a))
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, bool(worst < tolerance), int(rel.size))


def check_conv2d(rng: np.random.Generator, n=1, h=5, w=5, cin=2, filters=3, kernel=(3, 3),
                 padding="same", activation="tanh", step=1e-5, tolerance=1e-4) -> dict[str, GradCheckReport]:
    """Check input, weight, and bias gradients of a conv layer against a random linear readout."""
    x = rng.standard_normal((n, h, w, cin))
    wt = rng.standard_normal((*kernel, cin, filters)) * 0.5
    b = rng.standard_normal(filters) * 0.1
    y, cache = L.conv2d_forward(x, wt, b, padding, activation)
    r = rng.standard_normal(y.shape)
    dx, dw, db = L.conv2d_backward(r, cache)

    def loss(xx, ww, bb):
        return float((L.conv2d_forward(xx, ww, bb, padding, activation, keep_cache=False)[0] * r).sum())

    return {
        "input": gradient_check(lambda v: loss(v, wt, b), x, dx, step, tolerance),
        "weights": gradient_check(lambda v: loss(x, v, b), wt, dw, step, tolerance),
        "bias": gradient_check(lambda v: loss(x, wt, v), b, db, step, tolerance),
    }


def check_dense(rng: np.random.Generator, n=2, inputs=8, units=4, activation="relu",
                step=1e-5, tolerance=1e-4) -> dict[str, GradCheckReport]:
    x = rng.standard_normal((n, inputs))
    wt = rng.standard_normal((inputs, units)) * 0.5
    b = rng.standard_normal(units) * 0.1
    if activation == "relu":
        # keep pre-activations away from the kink so central differences are valid
        z = x @ wt + b
        b = b + np.where(np.abs(z).min(axis=0) < 10 * step, 0.05, 0.0)
    y, cache = L.dense_forward(x, wt, b, activation)
    r = rng.standard_normal(y.shape)
    dx, dw, db = L.dense_backward(r, cache)

    def loss(xx, ww, bb):
        return float((L.dense_forward(xx, ww, bb, activation, keep_cache=False)[0] * r).sum())

    return {
        "input": gradient_check(lambda v: loss(v, wt, b), x, dx, step, tolerance),
        "weights": gradient_check(lambda v: loss(x, v, b), wt, dw, step, tolerance),
        "bias": gradient_check(lambda v: loss(x, wt, v), b, db, step, tolerance),
    }


def check_softmax_cross_entropy(rng: np.random.Generator, n=4, classes=3,
                                step=1e-5, tolerance=1e-4) -> GradCheckReport:
    logits = rng.standard_normal((n, classes)) * 2
    onehot = L.one_hot(rng.integers(0, classes, n), classes, dtype=np.float64)
    p = L.softmax(logits)
    analytic = L.softmax_cross_entropy_backward(p, onehot)
    return gradient_check(lambda z: L.cross_entropy(L.softmax(z), onehot), logits, analytic, step, tolerance)
