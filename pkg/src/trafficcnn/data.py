"""Frame ingestion: netpbm I/O, resizing, preprocessing, datasets, and splits."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .optim import ArrayDataset
from .tensor import Rng

LABELS = ("Low", "Medium", "Heavy")
LABEL_DIRS = ("low", "medium", "heavy")
FRAME_NAME = re.compile(r"^(?P<video>.+)_f(?P<frame>\d+)\.ppm$")


# -- netpbm ----------------------------------------------------------------------

class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(NetpbmError):
    pass


class MaxvalError(NetpbmError):
    pass


class TruncatedError(NetpbmError):
    pass


class HeaderError(NetpbmError):
    pass


def _header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    """Parse ``magic width height maxval``; returns (width, height, raster offset)."""
    if buf[:2] != magic:
        raise BadMagicError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        # whitespace and comments between tokens
        while pos < len(buf):
            c = buf[pos:pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                break
        if pos >= len(buf):
            raise TruncatedError("header ends before width/height/maxval", pos)
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise HeaderError(f"expected a decimal number, found {buf[pos:pos + 1]!r}", pos)
        values.append((int(buf[start:pos]), start))
    (w, _), (h, hpos), (maxval, mpos) = values
    if w < 1 or h < 1:
        raise HeaderError(f"image dimensions must be positive, got {w}x{h}", hpos)
    if maxval != 255:
        raise MaxvalError(f"maxval must be 255, got {maxval}", mpos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise TruncatedError("missing whitespace after maxval", pos)
    return w, h, pos + 1


def _parse(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    w, h, off = _header(buf, magic)
    need = w * h * channels
    if len(buf) - off < need:
        raise TruncatedError(f"raster needs {need} bytes, found {len(buf) - off}", len(buf))
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return raster.reshape(h, w, channels).astype(np.float32)


def parse_ppm(data: bytes) -> np.ndarray:
    """Binary P6 -> float32 ``[h, w, 3]`` with values 0-255."""
    return _parse(data, b"P6", 3)


def parse_pgm(data: bytes) -> np.ndarray:
    """Binary P5 -> float32 ``[h, w, 1]`` with values 0-255."""
    return _parse(data, b"P5", 1)


def encode_pnm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode() + raster.tobytes()


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write P6 (3 channels) or P5 (1 channel); values are rounded and clipped to 0-255."""
    Path(path).write_bytes(encode_pnm(image))


write_pgm = write_ppm


def read_image(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    return parse_pgm(buf) if buf[:2] == b"P5" else parse_ppm(buf)


# -- image ops -------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping."""
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    h, w = image.shape[:2]
    if (h, w) == (th, tw):
        return image.copy()
    src = np.asarray(image, dtype=np.float64)

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, th)
    c0, c1, fc = axis(w, tw)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(image.dtype if image.dtype.kind == "f" else np.float32)


@dataclass(frozen=True)
class PreprocessMode:
    """``scale_pm1`` maps 0..255 to -1..1; ``mean_subtract`` removes per-channel means."""

    kind: str = "scale_pm1"
    means: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("scale_pm1", "mean_subtract"):
            raise ValueError(f"unknown preprocess mode {self.kind!r}")
        if self.kind == "mean_subtract" and not self.means:
            raise ValueError("mean_subtract needs per-channel means")

    @classmethod
    def parse(cls, text: str) -> "PreprocessMode":
        if text == "scale_pm1":
            return cls()
        if text.startswith("mean_subtract"):
            _, _, rest = text.partition(":")
            return cls("mean_subtract", tuple(float(v) for v in rest.split(",") if v))
        raise ValueError(f"unknown preprocess mode {text!r}")


def preprocess(image: np.ndarray, mode: PreprocessMode = PreprocessMode()) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if mode.kind == "scale_pm1":
        return x / np.float32(127.5) - np.float32(1.0)
    return x - np.asarray(mode.means, dtype=np.float32)


# -- datasets -----------------------------------------------------------------------

@dataclass(frozen=True)
class FrameRef:
    path: Path
    label: int
    video_id: str
    frame_index: int


@dataclass
class DatasetIndex:
    samples: list[FrameRef] = field(default_factory=list)
    root: Path | None = None

    @property
    def class_counts(self) -> tuple[int, ...]:
        counts = [0] * len(LABELS)
        for s in self.samples:
            counts[s.label] += 1
        return tuple(counts)

    @property
    def videos(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.video_id, []).append(i)
        return out

    @property
    def video_ids(self) -> list[str]:
        return [s.video_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self):
        return len(self.samples)


class DatasetError(ValueError):
    pass


def load_directory_dataset(root: str | Path) -> DatasetIndex:
    """Index ``root/{low,medium,heavy}/{video_id}_f{frame}.ppm`` (missing class dirs are empty)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    for p in sorted(root.iterdir()):
        if p.is_dir() and p.name not in LABEL_DIRS:
            raise DatasetError(f"unknown class directory {p}")
    samples = []
    video_label: dict[str, int] = {}
    for label, d in enumerate(LABEL_DIRS):
        sub = root / d
        if not sub.is_dir():
            continue
        for p in sorted(sub.iterdir(), key=lambda q: q.name):
            m = FRAME_NAME.match(p.name)
            if not m:
                raise DatasetError(f"unparsable frame filename {p}")
            try:
                read_image(p)
            except NetpbmError as e:
                raise DatasetError(f"cannot decode {p}: {e}") from e
            vid = m["video"]
            if video_label.setdefault(vid, label) != label:
                raise DatasetError(f"video {vid!r} appears under two classes ({p})")
            samples.append(FrameRef(p, label, vid, int(m["frame"])))
    return DatasetIndex(samples, root)


def load_arrays(index: DatasetIndex, size: tuple[int, int] | None = None,
                mode: PreprocessMode | None = PreprocessMode(), indices: Sequence[int] | None = None) -> ArrayDataset:
    """Decode, resize, and preprocess frames into an :class:`ArrayDataset`."""
    sel = range(len(index)) if indices is None else indices
    imgs = []
    for i in sel:
        img = read_image(index.samples[i].path)
        if size is not None:
            img = resize_bilinear(img, size)
        imgs.append(img if mode is None else preprocess(img, mode))
    x = np.stack(imgs) if imgs else np.zeros((0, *(size or (1, 1)), 3), dtype=np.float32)
    return ArrayDataset(x, [index.samples[i].label for i in sel], [index.samples[i].video_id for i in sel])


# -- splits ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    mode: str = "by_video"
    kind: str = "kfold"
    k: int = 10
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("by_video", "by_frame"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.kind not in ("kfold", "holdout"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == "kfold" and self.k < 2:
            raise ValueError("k must be >= 2")
        if self.kind == "holdout":
            if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) \
                    or abs(sum(self.fractions) - 1) > 1e-9:
                raise ValueError(f"holdout fractions must be 3 non-negative values summing to 1, got {self.fractions}")

    def to_text(self) -> str:
        return "\n".join([f"split_mode={self.mode}", f"split_kind={self.kind}", f"split_k={self.k}",
                          "split_fractions=" + ",".join(repr(f) for f in self.fractions),
                          f"split_seed={self.seed}"]) + "\n"


def _units(video_ids: Sequence[str], mode: str) -> list[list[int]]:
    if mode == "by_frame":
        return [[i] for i in range(len(video_ids))]
    groups: dict[str, list[int]] = {}
    for i, v in enumerate(video_ids):
        groups.setdefault(v, []).append(i)
    return [groups[v] for v in sorted(groups)]


def make_splits(data, plan: SplitPlan):
    """Partition sample indices of ``data`` (anything with ``video_ids``).

    k-fold returns a list of ``k`` index arrays; holdout returns a dict with
    ``train``, ``val``, ``test``.  Units (videos or frames) are shuffled with
    the plan seed and dealt into contiguous near-equal chunks.
    """
    units = _units(data.video_ids, plan.mode)
    perm = Rng(plan.seed).permutation(len(units))
    units = [units[i] for i in perm]

    def gather(chunk):
        return np.array(sorted(i for u in chunk for i in u), dtype=np.int64)

    if plan.kind == "kfold":
        if plan.k > len(units):
            raise ValueError(f"k={plan.k} exceeds the number of units ({len(units)})")
        chunks = np.array_split(np.arange(len(units)), plan.k)
        return [gather(units[c[0]:c[-1] + 1] if len(c) else []) for c in chunks]
    n = len(units)
    n_train = int(round(plan.fractions[0] * n))
    n_val = int(round(plan.fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {"train": gather(units[:n_train]), "val": gather(units[n_train:n_train + n_val]),
            "test": gather(units[n_train + n_val:])}
