"""Confusion matrices, pairwise diagnostics, cross-validation, and reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LABELS = ("Low", "Medium", "Heavy")
SHORT = ("L", "M", "H")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns predictions, both in Low/Medium/Heavy order."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def confusion_rate(self, a: int, b: int) -> float:
        """Fraction of true-a/true-b samples predicted as the other one of the pair."""
        n = self.counts[a].sum() + self.counts[b].sum()
        if n == 0:
            raise UndefinedMetricError(f"no samples of {LABELS[a]} or {LABELS[b]}")
        return float((self.counts[a, b] + self.counts[b, a]) / n)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *LABELS])
        for i, row in enumerate(self.counts):
            w.writerow([LABELS[i], *(int(v) for v in row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def confusion(true_labels: Sequence[int], predicted: Sequence[int], classes: int = 3) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"{len(t)} true labels but {len(p)} predictions")
    if t.size and (t.min() < 0 or t.max() >= classes or p.min() < 0 or p.max() >= classes):
        raise ValueError("labels must lie in [0, classes)")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class PairwiseDiagnostics:
    pair: tuple[int, int]
    sensitivity: float
    specificity: float
    accuracy: float

    @property
    def name(self) -> str:
        return f"{LABELS[self.pair[0]]}-{LABELS[self.pair[1]]}"


def pairwise_diagnostics(cm: ConfusionMatrix, a: int, b: int) -> PairwiseDiagnostics:
    """Sensitivity/specificity/accuracy restricted to true labels ``a`` (positive) and ``b``.

    Predictions of the third class count as errors for their true row.
    """
    if a == b:
        raise ValueError("pair must name two different classes")
    c = cm.counts
    ra, rb = int(c[a].sum()), int(c[b].sum())
    for label, n in ((a, ra), (b, rb)):
        if n == 0:
            raise UndefinedMetricError(f"no true {LABELS[label]} samples; pair metrics undefined")
    return PairwiseDiagnostics((a, b), c[a, a] / ra, c[b, b] / rb, (c[a, a] + c[b, b]) / (ra + rb))


PAIRS = ((0, 1), (0, 2), (1, 2))


# -- cross-validation -------------------------------------------------------------------

def fold_seed(run_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(int(run_seed), spawn_key=(int(fold),)).generate_state(1, np.uint64)[0])


@dataclass
class CVResult:
    fold_accuracy: list[float]
    pooled: ConfusionMatrix
    predictions: np.ndarray  # per sample, -1 where never tested
    probabilities: np.ndarray | None = None
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracy))

    def pairwise(self) -> dict[tuple[int, int], PairwiseDiagnostics | None]:
        out = {}
        for a, b in PAIRS:
            try:
                out[(a, b)] = pairwise_diagnostics(self.pooled, a, b)
            except UndefinedMetricError:
                out[(a, b)] = None
        return out


def _carve_validation(train_idx: np.ndarray, video_ids, fraction: float, seed: int):
    """Split ``train_idx`` into (fit, validation) by whole videos."""
    if fraction <= 0:
        return train_idx, train_idx[:0]
    ids = np.asarray(video_ids)[train_idx] if video_ids is not None else train_idx
    videos = np.unique(ids)
    n_val = int(round(fraction * len(videos)))
    if len(videos) < 2:
        return train_idx, train_idx[:0]
    n_val = min(max(n_val, 1), len(videos) - 1)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(videos))
    held = np.isin(ids, videos[perm[:n_val]])
    return train_idx[~held], train_idx[held]


def cross_validate(build_model: Callable[[int], object], data, folds: Sequence[np.ndarray], config,
                   run_seed: int = 0, fit_fn: Callable | None = None,
                   validation_fraction: float = 0.0) -> CVResult:
    """Train a fresh model per fold on the other folds and test on the held-out fold.

    ``build_model(seed)`` receives the fold-derived seed.  ``fit_fn(model,
    train, config)`` defaults to :func:`optim.fit`; ``config`` is copied with
    the fold seed so batch order also differs per fold.  A positive
    ``validation_fraction`` withholds that share of each fold's training
    videos and records accuracy on them in ``val_accuracy``.
    """
    from .optim import fit

    fit_fn = fit_fn or (lambda m, tr, cfg: fit(m, tr, cfg))
    n = len(data)
    preds = np.full(n, -1, dtype=np.int64)
    probs = None
    accs, train_accs, val_accs = [], [], []
    pooled = ConfusionMatrix()
    for k, test_idx in enumerate(folds):
        seed = fold_seed(run_seed, k)
        train_idx = np.setdiff1d(np.arange(n), test_idx)
        train_idx, val_idx = _carve_validation(train_idx, data.video_ids, validation_fraction, seed)
        model = build_model(seed)
        hist = fit_fn(model, data.subset(train_idx), replace(config, seed=seed))
        test = data.subset(test_idx)
        p = model.predict(test.x)
        if probs is None:
            probs = np.zeros((n, p.shape[1]), dtype=p.dtype)
        probs[test_idx] = p
        yhat = p.argmax(axis=1)
        preds[test_idx] = yhat
        cm = confusion(test.y, yhat)
        pooled = pooled + cm
        accs.append(cm.accuracy)
        if hist is not None and getattr(hist, "acc", None):
            train_accs.append(hist.acc[-1])
        if len(val_idx):
            val = data.subset(val_idx)
            val_accs.append(float((model.predict(val.x).argmax(axis=1) == val.y).mean()))
    return CVResult(accs, pooled, preds, probs, train_accs, val_accs)


def video_level(probabilities: np.ndarray, labels: Sequence[int], video_ids: Sequence[str]):
    """Aggregate frame probabilities per video (mean); returns (ids, true, predicted)."""
    groups: dict[str, list[int]] = {}
    for i, v in enumerate(video_ids):
        groups.setdefault(v, []).append(i)
    ids = sorted(groups)
    labels = np.asarray(labels)
    true = np.array([labels[groups[v][0]] for v in ids], dtype=np.int64)
    pred = np.array([int(probabilities[groups[v]].mean(axis=0).argmax()) for v in ids], dtype=np.int64)
    return ids, true, pred


# -- reports ------------------------------------------------------------------------------

@dataclass
class ReportTable:
    """Rows of cells; float cells in ``percent`` columns render as ``97.12%``."""

    columns: list[str]
    rows: list[list] = field(default_factory=list)
    percent: set[str] = field(default_factory=set)
    title: str = ""

    def cells(self) -> list[list[str]]:
        out = []
        for row in self.rows:
            cells = []
            for col, v in zip(self.columns, row):
                if col in self.percent and isinstance(v, (float, np.floating)):
                    cells.append(f"{100.0 * float(v):.2f}%")
                elif isinstance(v, (float, np.floating)):
                    cells.append(f"{float(v):.4f}")
                else:
                    cells.append(str(v))
            out.append(cells)
        return out


def render_markdown(table: ReportTable) -> str:
    lines = []
    if table.title:
        lines += [f"### {table.title}", ""]
    lines.append("| " + " | ".join(table.columns) + " |")
    lines.append("|" + "|".join("---" for _ in table.columns) + "|")
    for cells in table.cells():
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    w.writerows(table.cells())
    return buf.getvalue()


def emit_report(tables: ReportTable | Sequence[ReportTable], fmt: str, path: str | Path) -> Path:
    tables = [tables] if isinstance(tables, ReportTable) else list(tables)
    if fmt == "markdown":
        text = "\n".join(render_markdown(t) for t in tables)
    elif fmt == "csv":
        text = "\n".join(render_csv(t) for t in tables)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def diagnostics_table(results: dict[str, ConfusionMatrix], title: str = "") -> ReportTable:
    """Pair-Labels / #batches / Sensitivity / Specificity / Accuracy rows per labelled matrix."""
    t = ReportTable(["Pair-Labels", "#batches", "Sensitivity", "Specificity", "Accuracy"],
                    percent={"Sensitivity", "Specificity", "Accuracy"}, title=title)
    for a, b in PAIRS:
        for tag, cm in results.items():
            try:
                d = pairwise_diagnostics(cm, a, b)
                t.rows.append([f"{LABELS[a]}-{LABELS[b]}", tag, d.sensitivity, d.specificity, d.accuracy])
            except UndefinedMetricError:
                t.rows.append([f"{LABELS[a]}-{LABELS[b]}", tag, "n/a", "n/a", "n/a"])
    return t
