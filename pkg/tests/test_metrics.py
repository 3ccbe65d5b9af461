import numpy as np
import pytest

from trafficcnn import metrics as E


def test_confusion_counts_heavy_as_medium():
    true = [2] * 100
    pred = [1] * 77 + [2] * 23
    cm = E.confusion(true, pred)
    assert cm.counts[2, 1] == 77 and cm.counts[2, 2] == 23
    assert cm.total == 100


def test_confusion_validates_inputs():
    with pytest.raises(ValueError):
        E.confusion([0, 1], [0])
    with pytest.raises(ValueError):
        E.confusion([0, 3], [0, 1])


def test_medium_heavy_example():
    cm = E.ConfusionMatrix(np.array([[0, 0, 0], [0, 97, 3], [0, 6, 94]]))
    d = E.pairwise_diagnostics(cm, 1, 2)
    assert (d.sensitivity, d.specificity, d.accuracy) == (0.97, 0.94, 0.955)


def test_third_class_predictions_count_as_errors():
    cm = E.ConfusionMatrix(np.array([[90, 5, 5], [0, 100, 0], [0, 0, 0]]))
    d = E.pairwise_diagnostics(cm, 0, 1)
    assert d.sensitivity == 0.9
    assert d.accuracy == pytest.approx(190 / 200)


def test_identity_on_random_matrices():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        cm = E.ConfusionMatrix(rng.integers(0, 50, (3, 3)) + np.eye(3, dtype=np.int64))
        for a, b in E.PAIRS:
            d = E.pairwise_diagnostics(cm, a, b)
            ra, rb = cm.counts[a].sum(), cm.counts[b].sum()
            assert abs(d.accuracy - (d.sensitivity * ra + d.specificity * rb) / (ra + rb)) < 1e-12


def test_undefined_pair_is_reported():
    cm = E.ConfusionMatrix(np.array([[5, 0, 0], [0, 0, 0], [0, 0, 3]]))
    with pytest.raises(E.UndefinedMetricError, match="Medium"):
        E.pairwise_diagnostics(cm, 0, 1)
    with pytest.raises(ValueError):
        E.pairwise_diagnostics(cm, 1, 1)
    table = E.diagnostics_table({"32": cm})
    assert ["Low-Medium", "32", "n/a", "n/a", "n/a"] in table.rows


def test_table_row_renders_exactly():
    cm = E.ConfusionMatrix(np.array([[0, 0, 0], [0, 202, 6], [0, 12, 203]]))
    text = E.render_markdown(E.diagnostics_table({"100": cm}))
    assert "| Medium-Heavy | 100 | 97.12% | 94.42% | 95.74% |" in text.splitlines()


def test_empty_report_is_header_only(tmp_path):
    t = E.ReportTable(["Pair-Labels", "#batches", "Accuracy"])
    assert E.render_markdown(t) == "| Pair-Labels | #batches | Accuracy |\n|---|---|---|\n"
    out = E.emit_report(t, "csv", tmp_path / "t.csv")
    assert out.read_text() == "Pair-Labels,#batches,Accuracy\n"
    with pytest.raises(ValueError):
        E.emit_report(t, "html", tmp_path / "t.html")


def test_confusion_rate_and_csv():
    cm = E.ConfusionMatrix(np.array([[10, 0, 0], [0, 8, 2], [0, 3, 7]]))
    assert cm.confusion_rate(1, 2) == 0.25
    assert cm.to_csv().splitlines()[2] == "Medium,0,8,2"
    assert (cm + cm).total == 60


def test_fold_seed_is_stable_and_distinct():
    seeds = [E.fold_seed(7, f) for f in range(10)]
    assert len(set(seeds)) == 10
    assert seeds == [E.fold_seed(7, f) for f in range(10)]


def test_video_level_averages_probabilities():
    probs = np.array([[0.6, 0.4, 0], [0.1, 0.9, 0], [0, 0, 1.0]])
    ids, true, pred = E.video_level(probs, [1, 1, 2], ["b", "b", "a"])
    assert ids == ["a", "b"]
    assert true.tolist() == [2, 1] and pred.tolist() == [2, 1]


class _Data:
    def __init__(self, x, y, video_ids=None):
        self.x, self.y, self.video_ids = x, np.asarray(y), video_ids

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return _Data(self.x[idx], self.y[idx], None if self.video_ids is None else [self.video_ids[i] for i in idx])


def test_cross_validate_covers_every_sample():
    from trafficcnn.layers import LayerSpec
    from trafficcnn.model import assemble
    from trafficcnn.optim import TrainConfig
    from trafficcnn.tensor import Rng

    rng = np.random.default_rng(0)
    y = np.repeat([0, 1, 2], 20)
    x = (np.eye(3)[y] * 3 + 0.2 * rng.standard_normal((60, 3))).astype(np.float32)
    folds = [np.arange(i, 60, 5) for i in range(5)]

    def make(seed):
        return assemble("lin", (3,), [LayerSpec("dense", "out", units=3, activation="softmax")], Rng(seed))

    res = E.cross_validate(make, _Data(x, y), folds, TrainConfig(batch_size=8, epochs=20, learning_rate=0.05))
    assert res.pooled.total == 60
    assert (res.predictions >= 0).all()
    assert len(res.fold_accuracy) == 5
    assert res.mean > 0.9
