"""Flat ``key=value`` run configuration with per-command schemas.

Files are UTF-8, one assignment per line, ``#`` starts a comment.  Values
from the file are overridden by command-line flags; every key is validated
and all problems are reported together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .model import CATALOG


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    problems = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{origin}:{n}: expected key=value, got {line!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            problems.append(f"{origin}:{n}: empty key")
        elif key in out:
            problems.append(f"{origin}:{n}: duplicate key {key!r}")
        else:
            out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


def read_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from None
    return parse_text(text, str(path))


# -- value parsers -------------------------------------------------------------------------

def _int(lo: int | None = None):
    def parse(s: str) -> int:
        v = int(s)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        return v
    return parse


def _float(lo: float | None = None, hi: float | None = None, open_lo: bool = False):
    def parse(s: str) -> float:
        v = float(s)
        if v != v:
            raise ValueError("must be a number")
        if lo is not None and (v <= lo if open_lo else v < lo):
            raise ValueError(f"must be {'>' if open_lo else '>='} {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return parse


def _choice(*options: str):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


def _range(s: str) -> tuple[int, int]:
    lo, _, hi = s.partition("-")
    a, b = int(lo), int(hi)
    if a < 0 or b < a:
        raise ValueError("must be LO-HI with 0 <= LO <= HI")
    return a, b


def _fractions(s: str) -> tuple[float, float, float]:
    parts = tuple(float(p) for p in s.split(","))
    if len(parts) != 3 or any(p < 0 for p in parts) or abs(sum(parts) - 1) > 1e-9:
        raise ValueError("must be three non-negative fractions summing to 1")
    return parts


def _trainable(s: str):
    if s == "all":
        return "all"
    if s.isdigit():
        return int(s)
    names = [n.strip() for n in s.split(",") if n.strip()]
    if not names:
        raise ValueError("must be 'all', a layer count, or comma-separated layer names")
    return tuple(names)


def _text(s: str) -> str:
    if not s:
        raise ValueError("must not be empty")
    return s


def _optional(parse: Callable[[str], Any]):
    def inner(s: str):
        return None if s in ("", "auto", "none") else parse(s)
    return inner


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str | None  # None means required
    help: str = ""


COMMON = {
    "seed": Key(_int(0), "0", "root seed for every random stream"),
}

_MODEL = {
    "arch": Key(_choice(*CATALOG), "CNN5", "catalog architecture"),
    "num_dense_nodes": Key(_optional(_int(1)), "auto", "dense width for CNN5/6/7"),
    "activation": Key(_optional(_choice("relu", "tanh", "linear")), "auto", "hidden activation for CNN5/6/7"),
    "head": Key(_optional(_text), "auto", "name of the output layer"),
    "input_size": Key(_optional(_int(1)), "auto", "square input side; frames are resized to it"),
}

_TRAIN = {
    **_MODEL,
    "data": Key(_text, None, "dataset directory"),
    "batch_size": Key(_int(1), "32", ""),
    "epochs": Key(_int(1), "10", ""),
    "steps_per_epoch": Key(_optional(_int(1)), "auto", "default ceil(train size / batch size)"),
    "learning_rate": Key(_float(0.0, open_lo=True), "5e-5", "Adam step size"),
    "preprocess": Key(_text, "scale_pm1", "scale_pm1 or mean_subtract:R,G,B"),
    "split_mode": Key(_choice("by_video", "by_frame"), "by_video", ""),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "synth": {
        "videos_per_class": Key(_int(1), "60", ""),
        "frames_per_video": Key(_int(1), "12", ""),
        "size": Key(_int(8), "64", "square frame side in pixels"),
        "lanes": Key(_int(1), "7", ""),
        "weather_mix": Key(_float(0.0, 1.0), "0.2", "fraction of videos with fog, rain, or corruption"),
        "weather": Key(_optional(_text), "none", "force one effect on every video, e.g. fog:0.7"),
        "labeling": Key(_choice("class", "tercile"), "class", "tercile builds the source-task corpus"),
        "source_range": Key(_range, "1-24", "count range for labeling=tercile"),
        "low_range": Key(_range, "1-8", ""),
        "medium_range": Key(_range, "9-20", ""),
        "heavy_range": Key(_range, "18-35", ""),
        "validation": Key(_bool, "false", "keep vehicles from overlapping"),
    },
    "train": {**_TRAIN, "split_fractions": Key(_fractions, "0.7,0.15,0.15", "train,val,test")},
    "transfer": {
        **_TRAIN,
        "arch": Key(_choice(*CATALOG), "VGG_S", "catalog architecture"),
        "source": Key(_text, None, "weight file to import by layer name"),
        "trainable": Key(_trainable, "5", "all, last-k count, or layer names"),
        "split_fractions": Key(_fractions, "0.7,0.15,0.15", "train,val,test"),
    },
    "baseline": {
        "data": Key(_text, None, "dataset directory"),
        "intensity_threshold": Key(_float(0.0, open_lo=True), "40", "luma distance from background"),
        "min_area": Key(_int(1), "9", "smallest blob counted, in pixels"),
        "folds": Key(_int(2), "10", ""),
    },
    "eval": {
        **_TRAIN,
        "source": Key(_optional(_text), "none", "optional weight file for transfer"),
        "trainable": Key(_trainable, "all", "all, last-k count, or layer names"),
        "folds": Key(_int(2), "10", ""),
        "validation_fraction": Key(_float(0.0, 0.5), "0.1", "videos held out of each fold's training set"),
        "baseline": Key(_bool, "true", "also score the count baseline on the same folds"),
        "intensity_threshold": Key(_float(0.0, open_lo=True), "40", ""),
        "min_area": Key(_int(1), "9", ""),
    },
    "pca": {
        **_MODEL,
        "data": Key(_text, None, "dataset directory"),
        "weights": Key(_text, None, "trained weight file"),
        "layer": Key(_text, "flatten", "transfer layer"),
        "preprocess": Key(_text, "scale_pm1", ""),
        "format": Key(_choice("csv", "svg", "both"), "both", "scatter export"),
    },
    "inspect": {
        **_MODEL,
        "arch": Key(_optional(_choice(*CATALOG)), "auto", "defaults to the arch recorded next to the weights"),
        "weights": Key(_optional(_text), "none", "weight file to load and check"),
    },
}


def schema(command: str) -> dict[str, Key]:
    return {**COMMON, **SCHEMAS[command]}


def resolve(command: str, file_values: dict[str, str], overrides: dict[str, str]) -> tuple[dict[str, Any], dict[str, str]]:
    """Merge defaults < file < overrides, then validate every key.

    Returns (parsed values, resolved raw strings).  Raises
    :class:`ConfigError` listing every unknown, missing, or invalid key.
    """
    keys = schema(command)
    raw = {k: spec.default for k, spec in keys.items() if spec.default is not None}
    problems = [f"{k}: unknown key for '{command}'" for k in sorted(file_values) if k not in keys]
    raw.update({k: v for k, v in file_values.items() if k in keys})
    raw.update(overrides)
    values: dict[str, Any] = {}
    for k in sorted(keys):
        if k not in raw:
            problems.append(f"{k}: required")
            continue
        try:
            values[k] = keys[k].parse(raw[k])
        except ValueError as e:
            problems.append(f"{k}: {e}" if str(e) else f"{k}: invalid value {raw[k]!r}")
    if problems:
        raise ConfigError(problems)
    return values, raw


def render(command: str, raw: dict[str, str]) -> str:
    lines = [f"# resolved configuration for '{command}'"]
    lines += [f"{k}={raw[k]}" for k in sorted(raw)]
    return "\n".join(lines) + "\n"
