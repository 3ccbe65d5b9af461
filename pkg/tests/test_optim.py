import math

import numpy as np
import pytest

from trafficcnn.layers import LayerSpec
from trafficcnn.model import assemble, build
from trafficcnn.optim import AdamState, ArrayDataset, TrainConfig, adam_step, batch_order, evaluate, fit
from trafficcnn.tensor import Rng


def test_first_adam_step_by_hand():
    # bias correction makes the first step exactly -lr * sign(g) (up to eps)
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([2.0])}, AdamState(lr=5e-5))
    assert p["w"][0] == pytest.approx(-5e-5, rel=1e-6)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(6)]
    p = {"w": w.copy()}
    st = AdamState(lr=0.01)
    for g in grads:
        adam_step(p, {"w": g}, st)
    m = v = np.zeros(4)
    ref = w.copy()
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=0, atol=1e-12)


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(KeyError):
        adam_step({"w": np.zeros(2)}, {"x": np.zeros(2)}, AdamState())
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_step_counter_advances_without_grads():
    st = AdamState()
    adam_step({}, {}, st)
    assert st.t == 1


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    assert TrainConfig(batch_size=32).steps_for(500) == 16


def test_batch_order_wraps():
    order = batch_order(5, 3, 4, Rng(0))
    assert order.shape == (3, 4)
    flat = order.ravel()
    assert sorted(flat[:5]) == list(range(5))
    assert np.array_equal(batch_order(5, 1, 5, Rng(0), shuffle=False)[0], np.arange(5))


def _tiny(seed=0, in_dim=2):
    return assemble("tiny", (in_dim,), [LayerSpec("dense", "hidden", units=8, activation="relu"),
                                          LayerSpec("dense", "out", units=3, activation="softmax")], Rng(seed))


def test_step_count_matches_schedule():
    m = _tiny()
    data = ArrayDataset(np.zeros((500, 2), np.float32), np.zeros(500))
    hist = fit(m, data, TrainConfig(batch_size=32, epochs=70, learning_rate=1e-3))
    assert hist.steps == 16 * 70
    assert len(hist.loss) == 70


def test_frozen_layers_are_bit_identical():
    m = _tiny()
    m.trainable = {"out"}
    before = [p.copy() for p in m.layer("hidden").params]
    out_before = m.layer("out").params[0].copy()
    rng = np.random.default_rng(0)
    data = ArrayDataset(rng.standard_normal((64, 2)).astype(np.float32), rng.integers(0, 3, 64))
    fit(m, data, TrainConfig(batch_size=16, epochs=3, learning_rate=1e-2))
    for a, b in zip(before, m.layer("hidden").params):
        assert a.tobytes() == b.tobytes()
    assert not np.array_equal(out_before, m.layer("out").params[0])


def test_separable_toy_problem_is_learned():
    rng = np.random.default_rng(1)
    centers = np.array([[-3, 0], [0, 3], [3, 0]], np.float32)
    y = rng.integers(0, 3, 300)
    x = centers[y] + 0.3 * rng.standard_normal((300, 2)).astype(np.float32)
    m = _tiny(2)
    fit(m, ArrayDataset(x, y), TrainConfig(batch_size=16, epochs=30, learning_rate=1e-2, seed=4))
    assert evaluate(m, ArrayDataset(x, y))["accuracy"] > 0.98


def test_uniform_model_scores_log3():
    m = build("VGG_S", 0)
    for l in m.layers:
        for p in l.params:
            p[...] = 0
    ev = evaluate(m, ArrayDataset(np.zeros((4, 64, 64, 3), np.float32), [0, 1, 2, 0]))
    assert ev["loss"] == pytest.approx(math.log(3), rel=1e-5)


def test_fit_is_reproducible():
    rng = np.random.default_rng(2)
    data = ArrayDataset(rng.standard_normal((40, 2)).astype(np.float32), rng.integers(0, 3, 40))
    outs = []
    for _ in range(2):
        m = _tiny(5)
        fit(m, data, TrainConfig(batch_size=8, epochs=2, learning_rate=1e-2, seed=9))
        outs.append(m.layer("out").params[0].tobytes())
    assert outs[0] == outs[1]


def test_fit_refuses_empty_and_non_softmax():
    with pytest.raises(ValueError):
        fit(_tiny(), ArrayDataset(np.zeros((0, 2), np.float32), []), TrainConfig())
    lin = assemble("lin", (2,), [LayerSpec("dense", "out", units=3)], Rng(0))
    with pytest.raises(ValueError, match="softmax"):
        fit(lin, ArrayDataset(np.zeros((2, 2), np.float32), [0, 1]), TrainConfig())
