"""The seeded desk-scale reproduction run.

A VGG_S network is pretrained on a related source task (count-tercile labels
on videos drawn from a disjoint seed), its weights are imported into a fresh
VGG_S whose last convolutional block and head stay trainable, and the result
is cross-validated by video on the synthetic congestion corpus.  The count
baseline is scored on the same folds, both are re-tested on a paired
clear/fog set, and the trained network's flatten activations feed the PCA.

Everything below the first trainable layer is frozen and identical across
folds, so its output is computed once and only the tail is re-fitted per
fold.  That is the expensive part of the run and the main reason it fits in
a few minutes on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baseline as B
from . import metrics as E
from .analysis import PCAResult, extract_transfer_values, pca_fit, scatter_export, separation_metric
from .data import SplitPlan, make_splits, preprocess
from .model import Model, build, import_by_name, save_weights, set_trainable, split_at, weights_fingerprint
from .optim import ArrayDataset, History, TrainConfig, fit
from .synth import SceneConfig, Video, WeatherEffect, generate_videos

SOURCE_HEAD = "predictions_source"


@dataclass(frozen=True)
class DeskConfig:
    # target corpus
    videos_per_class: int = 60
    frames_per_video: int = 12
    weather_mix: float = 0.2
    corpus_seed: int = 7
    # source task
    source_seed: int = 1001
    source_videos_per_class: int = 600
    source_frames: int = 1
    source_range: tuple[int, int] = (1, 24)
    source_epochs: int = 12
    source_lr: float = 1e-3
    # transfer
    trainable_last_k: int = 5
    transfer_epochs: int = 10
    transfer_lr: float = 1e-3
    batch_size: int = 32
    folds: int = 10
    run_seed: int = 7
    # paired weather test
    fog_density: float = 0.7
    weather_videos_per_class: int = 20
    weather_seed: int = 4242


@dataclass
class DeskResult:
    config: DeskConfig
    cv: E.CVResult
    transfer_video: E.ConfusionMatrix
    baseline_video: E.ConfusionMatrix
    weather: dict[str, dict[str, float]]
    pca: PCAResult
    separation: dict[str, float]
    labels: np.ndarray
    source_history: History
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def pairwise(self) -> dict[tuple[int, int], E.PairwiseDiagnostics | None]:
        return self.cv.pairwise()

    def weather_drop(self, system: str) -> float:
        w = self.weather[system]
        return w["clear"] - w["fog"]


def frames_to_arrays(videos: list[Video]) -> ArrayDataset:
    x = np.stack([preprocess(f.image) for v in videos for f in v.frames])
    y = [f.label for v in videos for f in v.frames]
    ids = [v.video_id for v in videos for _ in v.frames]
    return ArrayDataset(x, y, ids)


def pretrain_source(cfg: DeskConfig, config: SceneConfig = SceneConfig()) -> tuple[Model, History]:
    videos = generate_videos(cfg.source_videos_per_class, cfg.source_frames, seed=cfg.source_seed,
                             config=config, weather_mix=cfg.weather_mix, labeling="tercile",
                             source_range=cfg.source_range)
    model = build("VGG_S", cfg.source_seed, head_name=SOURCE_HEAD)
    train_cfg = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.source_epochs,
                            learning_rate=cfg.source_lr, seed=cfg.source_seed)
    hist = fit(model, frames_to_arrays(videos), train_cfg)
    return model, hist


def transfer_model(source: Model | dict, seed: int, last_k: int) -> Model:
    """Fresh VGG_S with every matching layer imported and the last ``last_k`` trainable.

    The source head has a different name, so the target head keeps its
    fresh initialization.
    """
    model = build("VGG_S", seed)
    weights = source if isinstance(source, dict) else {
        l.name: l.params for l in source.layers if l.params}
    import_by_name(model, weights)
    return set_trainable(model, last_k)


def frozen_boundary(model: Model) -> str:
    """Name of the last layer before the first trainable one."""
    first = min(model.index(n) for n in model.trainable)
    if first == 0:
        raise ValueError("no frozen prefix to share")
    return model.layers[first - 1].name


def cross_validate_shared(build_model, data: ArrayDataset, folds, config: TrainConfig, run_seed: int = 0,
                          validation_fraction: float = 0.0) -> E.CVResult:
    """:func:`metrics.cross_validate`, running a frozen prefix once when every fold shares it.

    Sharing is only used when two differently seeded builds agree bit for bit
    on the frozen prefix (imported weights), so results match the plain loop.
    """
    a = build_model(E.fold_seed(run_seed, 0))
    b = build_model(E.fold_seed(run_seed, 1))
    if not a.trainable or min(a.index(n) for n in a.trainable) == 0:
        return E.cross_validate(build_model, data, folds, config, run_seed,
                                validation_fraction=validation_fraction)
    boundary = frozen_boundary(a)
    upto = a.index(boundary)
    if weights_fingerprint(a, upto) != weights_fingerprint(b, upto):
        return E.cross_validate(build_model, data, folds, config, run_seed,
                                validation_fraction=validation_fraction)
    head = split_at(a, boundary)[0]
    feats = ArrayDataset(head.predict(np.asarray(data.x)), data.y, data.video_ids)
    return E.cross_validate(lambda seed: split_at(build_model(seed), boundary)[1], feats, folds, config,
                            run_seed, validation_fraction=validation_fraction)


def video_folds(video_ids: list[str], folds: list[np.ndarray]) -> list[set[str]]:
    ids = np.asarray(video_ids)
    return [set(ids[f].tolist()) for f in folds]


def baseline_cv(counts: list[B.VideoCounts], held_out: list[set[str]],
                frame_level: bool = False) -> E.ConfusionMatrix:
    """Fit thresholds on the other folds' videos, classify the held-out ones, pool.

    With ``frame_level`` each held-out frame's own count is classified
    instead of its video's mean.
    """
    pooled = E.ConfusionMatrix()
    for test in held_out:
        train = [(v.mean_count, v.label) for v in counts if v.video_id not in test]
        clf = B.fit_thresholds(train)
        tested = [v for v in counts if v.video_id in test]
        if frame_level:
            true = [v.label for v in tested for _ in v.frame_counts]
            pooled = pooled + E.confusion(true, clf.classify_many([c for v in tested for c in v.frame_counts]))
        else:
            pooled = pooled + B.classify_videos(clf, tested)[1]
    return pooled


def _counts(videos: list[Video]) -> list[B.VideoCounts]:
    return B.count_videos({v.video_id: (v.label, [f.image for f in v.frames]) for v in videos})


def _video_accuracy(probs: np.ndarray, data: ArrayDataset) -> float:
    _, true, pred = E.video_level(probs, data.y, data.video_ids)
    return float((true == pred).mean())


def run_desk(cfg: DeskConfig = DeskConfig(), out_dir: str | Path | None = None, log=None) -> DeskResult:
    say = log or (lambda msg: None)
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now
        say(f"{name}: {timings[name]:.1f}s")

    videos = generate_videos(cfg.videos_per_class, cfg.frames_per_video, seed=cfg.corpus_seed,
                             weather_mix=cfg.weather_mix)
    data = frames_to_arrays(videos)
    lap("corpus")

    source, source_hist = pretrain_source(cfg)
    source_weights = {l.name: l.params for l in source.layers if l.params}
    lap("pretrain")

    probe = transfer_model(source_weights, 0, cfg.trainable_last_k)
    boundary = frozen_boundary(probe)
    prefix, _ = split_at(probe, boundary)
    feats = ArrayDataset(prefix.predict(data.x), data.y, data.video_ids)
    lap("prefix")

    folds = make_splits(data, SplitPlan("by_video", "kfold", cfg.folds, seed=cfg.run_seed))
    train_cfg = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.transfer_epochs,
                            learning_rate=cfg.transfer_lr)

    def tail(seed):
        return split_at(transfer_model(source_weights, seed, cfg.trainable_last_k), boundary)[1]

    cv = E.cross_validate(tail, feats, folds, train_cfg, run_seed=cfg.run_seed)
    _, vt, vp = E.video_level(cv.probabilities, data.y, data.video_ids)
    transfer_video = E.confusion(vt, vp)
    lap("cross_validation")

    counts = _counts(videos)
    baseline_video = baseline_cv(counts, video_folds(data.video_ids, folds))
    lap("baseline")

    # final models on the whole corpus, then the paired clear/fog test
    final_seed = E.fold_seed(cfg.run_seed, cfg.folds)
    final = transfer_model(source_weights, final_seed, cfg.trainable_last_k)
    fit(split_at(final, boundary)[1], feats, replace(train_cfg, seed=final_seed))
    clf = B.fit_thresholds([(v.mean_count, v.label) for v in counts])
    weather: dict[str, dict[str, float]] = {"baseline": {}, "transfer": {}}
    for tag, effect in (("clear", WeatherEffect()), ("fog", WeatherEffect("fog", density=cfg.fog_density))):
        test = generate_videos(cfg.weather_videos_per_class, cfg.frames_per_video, seed=cfg.weather_seed,
                               weather_override=effect)
        test_data = frames_to_arrays(test)
        _, cm = B.classify_videos(clf, _counts(test))
        weather["baseline"][tag] = cm.accuracy
        weather["transfer"][tag] = _video_accuracy(final.predict(test_data.x), test_data)
    lap("weather")

    cache = Path(out_dir) / "transfer_values.nnwt" if out_dir is not None else None
    if cache is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        if cache.exists():
            cache.unlink()
    tv = extract_transfer_values(final, "flatten", data, cache)
    pca = pca_fit(tv)
    separation = {"L_vs_rest": separation_metric(pca.projected, tv.labels, (0, (1, 2))),
                  "M_vs_H": separation_metric(pca.projected, tv.labels, (1, 2))}
    lap("pca")

    result = DeskResult(cfg, cv, transfer_video, baseline_video, weather, pca, separation, tv.labels,
                        source_hist, timings)
    if out_dir is not None:
        write_desk_reports(result, Path(out_dir), final, source)
    return result


def write_desk_reports(result: DeskResult, out: Path, final: Model, source: Model) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_weights(source, out / "source.nnwt")
    save_weights(final, out / "transfer.nnwt")
    tables = [
        E.diagnostics_table({"transfer (frames)": result.cv.pooled}, "Pairwise diagnostics, pooled CV"),
        E.diagnostics_table({"transfer (videos)": result.transfer_video, "baseline (videos)": result.baseline_video},
                            "Transfer model versus count baseline"),
    ]
    folds = E.ReportTable(["fold", "accuracy"], percent={"accuracy"}, title="Per-fold accuracy")
    folds.rows = [[k, a] for k, a in enumerate(result.cv.fold_accuracy)]
    folds.rows.append(["mean", result.cv.mean])
    weather = E.ReportTable(["system", "clear", f"fog {result.config.fog_density:g}", "drop"],
                            percent={"clear", f"fog {result.config.fog_density:g}", "drop"},
                            title="Paired weather test (video accuracy)")
    for name, w in result.weather.items():
        weather.rows.append([name, w["clear"], w["fog"], w["clear"] - w["fog"]])
    sep = E.ReportTable(["pair", "separation"], title="PCA separation of flatten transfer values")
    sep.rows = [["Low vs Medium+Heavy", result.separation["L_vs_rest"]], ["Medium vs Heavy", result.separation["M_vs_H"]]]
    E.emit_report(tables + [folds, weather, sep], "markdown", out / "report.md")
    result.cv.pooled.to_csv(out / "confusion_frames.csv")
    result.transfer_video.to_csv(out / "confusion_videos.csv")
    result.baseline_video.to_csv(out / "confusion_baseline.csv")
    scatter_export(result.pca.projected, result.labels, out / "pca.csv", "csv")
    scatter_export(result.pca.projected, result.labels, out / "pca.svg", "svg", title="Flatten transfer values")
