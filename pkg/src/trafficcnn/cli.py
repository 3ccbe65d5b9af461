"""``trafficcnn`` command-line driver.

Every command takes ``--config FILE``, ``--seed N`` and ``--out DIR`` plus one
flag per configuration key (``--batch-size 16`` overrides ``batch_size=``).
Outputs land in ``--out``, else ``$TRAFFICCNN_OUT/<command>``, else
``runs/<command>``, next to a ``config.txt`` holding the resolved values.
Failures print one line, ``error code=<code> detail=<json string>``, to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import baseline as B
from . import config as C
from . import metrics as E
from .analysis import extract_transfer_values, pca_fit, scatter_export, separation_metric
from .data import (DatasetError, NetpbmError, PreprocessMode, SplitPlan, load_arrays,
                   load_directory_dataset, make_splits, read_image)
from .experiment import baseline_cv, cross_validate_shared, video_folds as _video_sets
from .model import (ShapeConflictError, WeightFileError, build, count_params, import_by_name, load_weights,
                    save_weights, set_trainable, spec_param_counts)
from .optim import TrainConfig, evaluate, fit
from .synth import SceneConfig, WeatherEffect, generate_videos, write_corpus

ENV_OUT = "TRAFFICCNN_OUT"
EXIT_CONFIG, EXIT_INPUT, EXIT_RUNTIME = 2, 3, 1


class CliError(Exception):
    def __init__(self, code: str, detail: str, status: int = EXIT_RUNTIME):
        super().__init__(detail)
        self.code, self.detail, self.status = code, detail, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_CONFIG)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trafficcnn", description="Traffic congestion classification toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in C.SCHEMAS.items():
        sp = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip().splitlines()[0])
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--seed", help="root seed")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT}/{name})")
        for key, spec in keys.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, metavar="V",
                            help=f"{spec.help} [{spec.default if spec.default is not None else 'required'}]")
    return p


# -- helpers --------------------------------------------------------------------------------

def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(ENV_OUT)
    return Path(root or "runs") / command


def _model_kwargs(v: dict[str, Any]) -> dict[str, Any]:
    return dict(num_dense_nodes=v["num_dense_nodes"], activation=v["activation"],
                head_name=v["head"], input_size=v["input_size"])


def _build(v: dict[str, Any], seed: int):
    return build(v["arch"], seed, **_model_kwargs(v))


def _dataset(v: dict[str, Any], input_shape):
    index = load_directory_dataset(v["data"])
    if len(index) == 0:
        raise CliError("empty_dataset", f"no frames under {v['data']}", EXIT_INPUT)
    first = read_image(index.samples[0].path)
    size = tuple(input_shape[:2])
    data = load_arrays(index, None if first.shape[:2] == size else size, PreprocessMode.parse(v["preprocess"]))
    return index, data


def _train_config(v: dict[str, Any]) -> TrainConfig:
    return TrainConfig(batch_size=v["batch_size"], epochs=v["epochs"], steps_per_epoch=v["steps_per_epoch"],
                       seed=v["seed"], learning_rate=v["learning_rate"])


def _apply_trainable(model, policy):
    if isinstance(policy, tuple):
        return set_trainable(model, names=policy)
    return set_trainable(model, policy)


def _hyper_text(v: dict[str, Any], steps: int) -> str:
    parts = [f"'arch': {v['arch']}", f"'trained_layers': {v.get('trainable', 'all')}",
             f"'batch_size': {v['batch_size']}", f"'steps_per_epoch': {steps}", f"'epochs': {v['epochs']}",
             f"'pre_process': {v['preprocess']}"]
    return "{" + ", ".join(parts) + "}"


def _accuracy(model, data) -> float | str:
    return evaluate(model, data)["accuracy"] if len(data) else "n/a"


# -- commands -------------------------------------------------------------------------------

def cmd_synth(v: dict[str, Any], out: Path) -> None:
    """Generate a synthetic corpus directory."""
    size = v["size"]
    scene = SceneConfig(size=(size, size), lanes=v["lanes"], validation=v["validation"],
                        count_ranges=(v["low_range"], v["medium_range"], v["heavy_range"]))
    weather = WeatherEffect.parse(v["weather"]) if v["weather"] else None
    videos = generate_videos(v["videos_per_class"], v["frames_per_video"], seed=v["seed"], config=scene,
                             weather_mix=v["weather_mix"], weather_override=weather, labeling=v["labeling"],
                             source_range=v["source_range"])
    write_corpus(videos, out)


def _train_like(v: dict[str, Any], out: Path, source: str | None) -> None:
    model = _build(v, v["seed"])
    if source is not None:
        report = import_by_name(model, source)
        _apply_trainable(model, v["trainable"])
        lines = [f"matched={','.join(report.matched)}", f"unmatched_model={','.join(report.unmatched_model)}",
                 f"unmatched_file={','.join(report.unmatched_file)}",
                 f"trainable={','.join(n for n in model.param_layer_names() if n in model.trainable)}"]
        (out / "import.txt").write_text("\n".join(lines) + "\n")
    _, data = _dataset(v, model.input_shape)
    split = make_splits(data, SplitPlan(v["split_mode"], "holdout", fractions=v["split_fractions"], seed=v["seed"]))
    train, val, test = (data.subset(split[k]) for k in ("train", "val", "test"))
    if len(train) == 0:
        raise CliError("empty_split", "the training split is empty; raise its fraction", EXIT_CONFIG)
    cfg = _train_config(v)
    hist = fit(model, train, cfg, validation=val if len(val) else None)
    save_weights(model, out / "weights.nnwt")
    hist.to_csv(out / "history.csv")
    table = E.ReportTable(["Model", "Hyper Parameters", "Train", "Validation", "Test"],
                          percent={"Train", "Validation", "Test"}, title="Training summary")
    table.rows.append([v["arch"], _hyper_text(v, cfg.steps_for(len(train))), _accuracy(model, train),
                       _accuracy(model, val), _accuracy(model, test)])
    E.emit_report(table, "markdown", out / "summary.md")


def cmd_train(v: dict[str, Any], out: Path) -> None:
    """Train a fresh catalog network on a dataset directory."""
    _train_like(v, out, None)


def cmd_transfer(v: dict[str, Any], out: Path) -> None:
    """Import weights by layer name, freeze, and fine-tune."""
    _train_like(v, out, v["source"])


def _video_counts(index, v: dict[str, Any]) -> list[B.VideoCounts]:
    frames: dict[str, tuple[int, list[np.ndarray]]] = {}
    for s in index.samples:
        frames.setdefault(s.video_id, (s.label, []))[1].append(read_image(s.path))
    return B.count_videos(frames, v["intensity_threshold"], v["min_area"])


def _baseline_tables(counts, folds_by_video) -> tuple[E.ConfusionMatrix, E.ConfusionMatrix]:
    return baseline_cv(counts, folds_by_video), baseline_cv(counts, folds_by_video, frame_level=True)


def cmd_baseline(v: dict[str, Any], out: Path) -> None:
    """Blob-count baseline with video-level thresholds, cross-validated by video."""
    index = load_directory_dataset(v["data"])
    counts = _video_counts(index, v)
    B.write_counts_csv(counts, out / "counts.csv")
    clf = B.fit_thresholds([(c.mean_count, c.label) for c in counts])
    (out / "thresholds.txt").write_text(f"t1={clf.t1!r}\nt2={clf.t2!r}\n")
    folds = _video_sets(index.video_ids, make_splits(index, SplitPlan("by_video", "kfold", v["folds"], seed=v["seed"])))
    videos, frames = _baseline_tables(counts, folds)
    videos.to_csv(out / "confusion_videos.csv")
    frames.to_csv(out / "confusion_frames.csv")
    E.emit_report(E.diagnostics_table({"videos": videos, "frames": frames}, "Count baseline, cross-validated"),
                  "markdown", out / "diagnostics.md")


def cmd_eval(v: dict[str, Any], out: Path) -> None:
    """k-fold evaluation producing the three report tables."""
    source = v["source"]

    def make(seed):
        m = _build(v, seed)
        if source is not None:
            import_by_name(m, source)
        return _apply_trainable(m, v["trainable"])

    probe = make(0)
    index, data = _dataset(v, probe.input_shape)
    folds = make_splits(data, SplitPlan(v["split_mode"], "kfold", v["folds"], seed=v["seed"]))
    cfg = _train_config(v)
    res = cross_validate_shared(make, data, folds, cfg, v["seed"], v["validation_fraction"])
    _, vt, vp = E.video_level(res.probabilities, data.y, data.video_ids)
    by_video = E.confusion(vt, vp)

    steps = cfg.steps_for(len(data) - len(folds[0]))
    t1 = E.ReportTable(["Model", "Hyper Parameters", "Train", "Validation", "Test(CV)"],
                       percent={"Train", "Validation", "Test(CV)"}, title="Models and accuracy")
    mean = lambda xs: float(np.mean(xs)) if xs else "n/a"  # noqa: E731
    t1.rows.append([v["arch"], _hyper_text(v, steps), mean(res.train_accuracy), mean(res.val_accuracy), res.mean])
    t2 = E.diagnostics_table({str(v["batch_size"]): res.pooled}, "Pairwise diagnostics (pooled folds)")
    matrices = {"frames": res.pooled, "videos": by_video}
    if v["baseline"]:
        counts = _video_counts(index, v)
        base_videos, base_frames = _baseline_tables(counts, _video_sets(data.video_ids, folds))
        matrices.update({"baseline videos": base_videos, "baseline frames": base_frames})
        base_videos.to_csv(out / "confusion_baseline.csv")
    t3 = E.diagnostics_table(matrices, "Model versus count baseline")
    E.emit_report(t1, "markdown", out / "table1.md")
    E.emit_report(t2, "markdown", out / "table2.md")
    E.emit_report(t3, "markdown", out / "table3.md")
    res.pooled.to_csv(out / "confusion_frames.csv")
    by_video.to_csv(out / "confusion_videos.csv")
    per_fold = E.ReportTable(["fold", "accuracy"], [[k, a] for k, a in enumerate(res.fold_accuracy)])
    E.emit_report(per_fold, "csv", out / "folds.csv")


def cmd_pca(v: dict[str, Any], out: Path) -> None:
    """Transfer values at a layer, 2-component PCA, scatter export."""
    model = _build(v, 0)
    load_weights(model, v["weights"])
    _, data = _dataset(v, model.input_shape)
    tv = extract_transfer_values(model, v["layer"], data, out / "transfer_values.nnwt")
    pca = pca_fit(tv)
    formats = ("csv", "svg") if v["format"] == "both" else (v["format"],)
    for fmt in formats:
        scatter_export(pca.projected, tv.labels, out / f"pca.{fmt}", fmt, title=f"{v['arch']} {v['layer']}")
    table = E.ReportTable(["pair", "separation"], title="Class separation in the PC1/PC2 plane")
    for name, pair in (("Low vs Medium+Heavy", (0, (1, 2))), ("Medium vs Heavy", (1, 2)), ("Low vs Medium", (0, 1))):
        try:
            table.rows.append([name, separation_metric(pca.projected, tv.labels, pair)])
        except ValueError:
            table.rows.append([name, "n/a"])
    table2 = E.ReportTable(["component", "explained variance"], title="Explained variance")
    table2.rows = [[f"PC{i + 1}", float(x)] for i, x in enumerate(pca.explained_variance)]
    E.emit_report([table, table2], "markdown", out / "separation.md")


def _recorded_arch(weights: str | None) -> dict[str, str]:
    if weights is None:
        return {}
    cfg = Path(weights).parent / "config.txt"
    if not cfg.exists():
        return {}
    recorded = C.parse_text(cfg.read_text(encoding="utf-8"), str(cfg))
    return {k: recorded[k] for k in ("arch", "num_dense_nodes", "activation", "head", "input_size") if k in recorded}


def inspect_rows(model) -> list[list[str]]:
    rows = []
    for layer in model.layers:
        rows.append([layer.name, "×".join(str(d) for d in layer.out_shape), f"{layer.n_params:,}",
                     "yes" if layer.name in model.trainable else "no"])
    return rows


def _reduction_lines(input_size: int | None, last_k: int = 5) -> str:
    # both counts come from layer specs so the full VGG19 is never allocated
    full, full_tr = spec_param_counts("VGG19", last_k, input_size=input_size)
    trunc, trunc_tr = spec_param_counts("VGG19_TRUNC", last_k, input_size=input_size)
    return (f"reduction vs VGG19 (total): {full:,} -> {trunc:,} ({1 - trunc / full:.2%})\n"
            f"reduction vs VGG19 (trainable, last {last_k}): {full_tr:,} -> {trunc_tr:,} "
            f"({1 - trunc_tr / full_tr:.2%})\n")


def cmd_inspect(v: dict[str, Any], out: Path | None) -> str:
    """Per-layer output shapes and parameter counts."""
    if v["arch"] is None:
        raise CliError("config", "arch: not given and no recorded config next to the weights", EXIT_CONFIG)
    model = _build(v, 0)
    if v["weights"] is not None:
        load_weights(model, v["weights"])
    table = E.ReportTable(["layer", "output shape", "params", "trainable"], inspect_rows(model),
                          title=f"{v['arch']}")
    total = count_params(model)
    text = E.render_markdown(table) + f"\ntotal params: {total:,}\n"
    if v["arch"] == "VGG19_TRUNC":
        text += _reduction_lines(v["input_size"])
    if out is not None:
        (out / "inspect.md").write_text(text, encoding="utf-8")
    return text


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "transfer": cmd_transfer, "baseline": cmd_baseline,
            "eval": cmd_eval, "pca": cmd_pca, "inspect": cmd_inspect}


def _validate_paths(command: str, v: dict[str, Any]) -> None:
    problems = []
    for key in ("data", "source", "weights"):
        if v.get(key) is not None and not Path(v[key]).exists():
            problems.append(f"{key}: path {v[key]} does not exist")
    if problems:
        raise C.ConfigError(problems)


def run(argv: list[str]) -> int:
    args = _parser().parse_args(argv)
    command = args.command
    keys = C.SCHEMAS[command]
    file_values = C.read_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if command == "inspect" and "arch" not in overrides and "arch" not in file_values:
        weights = overrides.get("weights", file_values.get("weights"))
        file_values = {**_recorded_arch(weights), **file_values}
    values, raw = C.resolve(command, file_values, overrides)
    _validate_paths(command, values)
    if command == "inspect":
        out = Path(args.out) if args.out else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(C.render(command, raw), encoding="utf-8")
        sys.stdout.write(cmd_inspect(values, out))
        return 0
    out = _out_dir(args, command)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(C.render(command, raw), encoding="utf-8")
    COMMANDS[command](values, out)
    print(out)
    return 0


def _fail(code: str, detail: str, status: int) -> int:
    print(f"error code={code} detail={json.dumps(detail)}", file=sys.stderr)
    return status


def main(argv: list[str] | None = None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except CliError as e:
        return _fail(e.code, e.detail, e.status)
    except C.ConfigError as e:
        return _fail("config", "; ".join(e.problems), EXIT_CONFIG)
    except (DatasetError, NetpbmError) as e:
        return _fail("dataset", str(e), EXIT_INPUT)
    except ShapeConflictError as e:
        return _fail("shape_conflict", str(e), EXIT_INPUT)
    except WeightFileError as e:
        return _fail("weight_file", str(e), EXIT_INPUT)
    except (ValueError, KeyError) as e:
        return _fail("invalid", str(e).strip("'\""), EXIT_RUNTIME)
    except OSError as e:
        return _fail("io", f"{e.filename}: {e.strerror}" if e.filename else str(e), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
