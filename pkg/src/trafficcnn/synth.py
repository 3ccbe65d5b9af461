"""Synthetic highway scenes with fog, rain, and signal corruption.

Each video is a fixed camera over ``lanes`` horizontal lanes.  The vehicle
count is drawn once per video from its class range and every vehicle stays
in frame, so the per-frame count is constant.  Vehicles in a lane share one
displacement schedule, which keeps the flow consistent across frames.

Scene layout and weather use separate child streams of the video seed, so
re-rendering a video under different weather leaves its vehicles untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LABEL_DIRS, LABELS, write_ppm
from .tensor import Rng

FOG_GRAY = 200.0

# RGB vehicle colours; luma contrast against the default road is >= 60
PALETTE = (
    (235, 235, 235),
    (200, 200, 205),
    (230, 210, 80),
    (245, 170, 150),
    (22, 22, 28),
    (20, 30, 85),
)


@dataclass(frozen=True)
class SceneConfig:
    size: tuple[int, int] = (64, 64)
    lanes: int = 7
    count_ranges: tuple[tuple[int, int], ...] = ((1, 8), (9, 20), (18, 35))
    vehicle_length: tuple[int, int] = (5, 8)
    vehicle_height: tuple[int, int] = (3, 4)
    max_travel: int = 8
    road_level: float = 90.0
    road_noise: float = 6.0
    marking_delta: float = 14.0
    palette: tuple[tuple[int, int, int], ...] = PALETTE
    validation: bool = False
    gap: int = 2
    max_overlap: int = 2
    platoon_probability: float = 0.35

    def __post_init__(self):
        h, w = self.size
        for lo, hi in self.count_ranges:
            if not 0 <= lo <= hi:
                raise ValueError(f"invalid count range ({lo}, {hi})")
        if self.lanes < 1 or h // self.lanes < self.vehicle_height[1]:
            raise ValueError("vehicles do not fit in the lanes")
        if w - self.max_travel < self.vehicle_length[1]:
            raise ValueError("vehicles do not fit along the lanes")
        if self.vehicle_length[0] < 1 or self.vehicle_height[0] < 1:
            raise ValueError("vehicle sizes must be >= 1")
        if not 0 <= self.max_overlap < self.vehicle_length[0] - 2:
            raise ValueError("max_overlap must leave part of every vehicle visible")
        if not 0 <= self.platoon_probability <= 1:
            raise ValueError("platoon_probability must lie in [0, 1]")

    @property
    def lane_height(self) -> int:
        return self.size[0] // self.lanes

    @property
    def min_gap(self) -> int:
        """Smallest spacing between neighbours in a lane; negative means overlap."""
        return self.gap if self.validation else -self.max_overlap

    def lane_capacity(self) -> int:
        """Vehicles per lane guaranteed to fit at the minimum spacing."""
        span = self.size[1] - self.max_travel
        return (span + self.min_gap) // (self.vehicle_length[1] + self.min_gap)


@dataclass(frozen=True)
class WeatherEffect:
    kind: str = "clear"
    density: float = 0.0
    streak_count: int = 0
    streak_intensity: float = 0.0
    block_count: int = 0
    jump_probability: float = 0.0

    def __post_init__(self):
        if self.kind not in ("clear", "fog", "rain", "corrupt"):
            raise ValueError(f"unknown weather {self.kind!r}")
        if not 0 <= self.density <= 1 or not 0 <= self.streak_intensity <= 1 \
                or not 0 <= self.jump_probability <= 1:
            raise ValueError(f"weather parameters out of range: {self}")
        if self.streak_count < 0 or self.block_count < 0:
            raise ValueError(f"weather counts must be non-negative: {self}")

    def __str__(self):
        if self.kind == "fog":
            return f"fog:{self.density:.3f}"
        if self.kind == "rain":
            return f"rain:{self.streak_count}:{self.streak_intensity:.3f}"
        if self.kind == "corrupt":
            return f"corrupt:{self.block_count}:{self.jump_probability:.3f}"
        return "clear"

    @classmethod
    def parse(cls, text: str) -> "WeatherEffect":
        parts = text.split(":")
        if parts[0] == "clear":
            return cls()
        if parts[0] == "fog":
            return cls("fog", density=float(parts[1]))
        if parts[0] == "rain":
            return cls("rain", streak_count=int(parts[1]), streak_intensity=float(parts[2]))
        if parts[0] == "corrupt":
            return cls("corrupt", block_count=int(parts[1]), jump_probability=float(parts[2]))
        raise ValueError(f"unknown weather {text!r}")


@dataclass
class FrameSample:
    image: np.ndarray
    label: int
    video_id: str
    frame_index: int


@dataclass
class Video:
    video_id: str
    label: int
    true_count: int
    weather: WeatherEffect
    frames: list[FrameSample]
    boxes: list[list[tuple[int, int, int, int]]] = field(default_factory=list)

    @property
    def counts(self) -> list[int]:
        return [len(b) for b in self.boxes]


# -- weather ---------------------------------------------------------------------------

def apply_fog(frame: np.ndarray, density: float) -> np.ndarray:
    """Convex blend toward gray 200."""
    f = np.asarray(frame, dtype=np.float32)
    if density == 0:
        return f.copy()
    return np.float32(1 - density) * f + np.float32(density * FOG_GRAY)


def apply_rain(frame: np.ndarray, streak_count: int, streak_intensity: float, rng: Rng) -> np.ndarray:
    """Overdraw short bright diagonal streaks (1 px wide, 3-6 px long)."""
    out = np.array(frame, dtype=np.float32, copy=True)
    h, w = out.shape[:2]
    for _ in range(streak_count):
        length = int(rng.integers(3, 7))
        r, c = int(rng.integers(0, h)), int(rng.integers(0, w))
        for k in range(length):
            rr, cc = r + k, c - k
            if 0 <= rr < h and 0 <= cc < w:
                out[rr, cc] += (255.0 - out[rr, cc]) * np.float32(streak_intensity)
    return out


def apply_corruption(frames: Sequence[np.ndarray], block_count: int, jump_probability: float,
                     rng: Rng) -> list[np.ndarray]:
    """Noise blocks per frame; with ``jump_probability`` a frame repeats its predecessor."""
    out: list[np.ndarray] = []
    for i, frame in enumerate(frames):
        if i > 0 and rng.random() < jump_probability:
            out.append(out[-1].copy())
            continue
        f = np.array(frame, dtype=np.float32, copy=True)
        h, w = f.shape[:2]
        for _ in range(block_count):
            bh, bw = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            r, c = int(rng.integers(0, max(1, h - bh + 1))), int(rng.integers(0, max(1, w - bw + 1)))
            block = f[r:r + bh, c:c + bw]
            block[...] = rng.integers(0, 256, size=block.shape).astype(np.float32)
        out.append(f)
    return out


def apply_weather(frames: list[np.ndarray], weather: WeatherEffect, rng: Rng) -> list[np.ndarray]:
    if weather.kind == "fog":
        return [apply_fog(f, weather.density) for f in frames]
    if weather.kind == "rain":
        return [apply_rain(f, weather.streak_count, weather.streak_intensity, rng.child(i))
                for i, f in enumerate(frames)]
    if weather.kind == "corrupt":
        return apply_corruption(frames, weather.block_count, weather.jump_probability, rng)
    return frames


def sample_weather(rng: Rng, fraction: float) -> WeatherEffect:
    """Clear with probability ``1 - fraction``, else fog/rain/corrupt uniformly."""
    if rng.random() >= fraction:
        return WeatherEffect()
    kind = ("fog", "rain", "corrupt")[int(rng.integers(0, 3))]
    if kind == "fog":
        return WeatherEffect("fog", density=round(float(rng.uniform(0.5, 0.85)), 3))
    if kind == "rain":
        return WeatherEffect("rain", streak_count=int(rng.integers(15, 41)),
                             streak_intensity=round(float(rng.uniform(0.4, 0.7)), 3))
    return WeatherEffect("corrupt", block_count=int(rng.integers(1, 4)), jump_probability=0.15)


# -- scene rendering ------------------------------------------------------------------------

def _vehicle_mask(h: int, w: int) -> np.ndarray:
    m = np.ones((h, w), dtype=bool)
    if h >= 3 and w >= 3:
        m[0, 0] = m[0, -1] = m[-1, 0] = m[-1, -1] = False
    return m


def _background(config: SceneConfig, rng: Rng) -> np.ndarray:
    h, w = config.size
    bg = config.road_level + rng.uniform(-config.road_noise, config.road_noise, size=(h, w))
    top = (h - config.lanes * config.lane_height) // 2
    for lane in range(1, config.lanes):
        r = top + lane * config.lane_height
        for c in range(0, w, 6):
            bg[r, c:c + 3] += config.marking_delta
    return np.repeat(bg[..., None], 3, axis=2).astype(np.float32)


def _place_lane(n: int, lengths: list[int], span: int, config: SceneConfig,
                rng: Rng, crowded: bool = True) -> tuple[list[int], list[bool]]:
    """Left-to-right positions, plus which vehicles close up on their predecessor.

    In validation mode neighbours keep at least ``gap`` pixels apart.
    Otherwise each follower joins the vehicle ahead as a platoon with
    ``platoon_probability`` (touching, or overlapping by up to
    ``max_overlap`` pixels, which a blob detector sees as one object), and
    lanes too full for free spacing are packed into platoons as needed.  A
    vehicle is never hidden behind another.  Scenes that are not
    ``crowded`` keep free-flow spacing, like validation mode.
    """
    if config.validation or not crowded:
        joined = [False] * n
    else:
        joined = [False] + [bool(rng.random() < config.platoon_probability) for _ in range(n - 1)]
    gaps = [0] * n
    for i in range(1, n):
        gaps[i] = -int(rng.integers(0, config.max_overlap + 1)) if joined[i] else config.gap
    for i in range(1, n):
        if sum(lengths) + sum(gaps) <= span:
            break
        joined[i], gaps[i] = True, -config.max_overlap
    free = span - sum(lengths) - sum(gaps)
    if free < 0:
        raise ValueError(f"{n} vehicles do not fit in a lane of {span} pixels")
    loose = [i for i in range(1, n) if not joined[i]]
    slack = rng.generator.multinomial(free, [1.0 / (len(loose) + 2)] * (len(loose) + 2))
    extra = dict(zip(loose, (int(v) for v in slack[1:-1])))
    xs, x = [], int(slack[0])
    for i, L in enumerate(lengths):
        if i:
            x += gaps[i] + extra.get(i, 0)
        xs.append(x)
        x += L
    return xs, joined


def generate_video(label: int, frames: int, config: SceneConfig = SceneConfig(),
                   weather: WeatherEffect = WeatherEffect(), seed: int | Rng = 0,
                   count: int | None = None, video_id: str = "v000",
                   count_range: tuple[int, int] | None = None) -> Video:
    """Render one video of class ``label`` (0=Low, 1=Medium, 2=Heavy)."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    scene, wrng = rng.child(0), rng.child(1)
    lo, hi = count_range or config.count_ranges[label]
    h, w = config.size
    lane_h = config.lane_height
    cap = config.lane_capacity()
    if max(hi, count or 0) > cap * config.lanes:
        raise ValueError(f"count up to {max(hi, count or 0)} infeasible: {config.lanes} lanes x {cap} vehicles")
    if count is None:
        count = int(scene.integers(lo, hi + 1))

    # lane assignment, capacity-limited so every lane's vehicles fit
    lanes_of = []
    load = [0] * config.lanes
    for _ in range(count):
        open_lanes = [l for l in range(config.lanes) if load[l] < cap]
        lane = open_lanes[int(scene.integers(0, len(open_lanes)))]
        load[lane] += 1
        lanes_of.append(lane)

    # light traffic flows freely; only scenes denser than the Low range bunch into platoons
    crowded = count > config.count_ranges[0][1]
    top = (h - config.lanes * lane_h) // 2
    travel = [int(scene.integers(0, config.max_travel + 1)) for _ in range(config.lanes)]
    vehicles = []  # (lane, row, x0, vh, vl, colour)
    for lane in range(config.lanes):
        n = load[lane]
        if not n:
            continue
        lengths = [int(scene.integers(config.vehicle_length[0], config.vehicle_length[1] + 1)) for _ in range(n)]
        heights = [int(scene.integers(config.vehicle_height[0], config.vehicle_height[1] + 1)) for _ in range(n)]
        xs, joined = _place_lane(n, lengths, w - travel[lane], config, scene, crowded)
        row = colour_idx = 0
        for L, vh, x0, join in zip(lengths, heights, xs, joined):
            if config.validation:
                row = top + lane * lane_h + (lane_h - vh) // 2
            elif join:
                row = min(row, top + lane * lane_h + lane_h - vh)  # same row as the vehicle ahead
            else:
                row = top + lane * lane_h + int(scene.integers(0, lane_h - vh + 1))
            # a platoon member never shares its predecessor's colour, so the cars stay distinguishable
            choices = [c for c in range(len(config.palette)) if not join or c != colour_idx]
            colour_idx = choices[int(scene.integers(0, len(choices)))]
            vehicles.append((lane, row, x0, vh, L, config.palette[colour_idx]))

    bg = _background(config, scene)
    raw, boxes = [], []
    for t in range(frames):
        img = bg.copy()
        fb = []
        for lane, row, x0, vh, L, colour in vehicles:
            step = 0 if frames == 1 else int(round(travel[lane] * t / (frames - 1)))
            shift = step if lane < config.lanes // 2 else travel[lane] - step
            col = x0 + shift
            mask = _vehicle_mask(vh, L)
            img[row:row + vh, col:col + L][mask] = colour
            fb.append((row, col, vh, L))
        raw.append(img)
        boxes.append(fb)
    rendered = apply_weather(raw, weather, wrng)
    samples = [FrameSample(f, label, video_id, t) for t, f in enumerate(rendered)]
    return Video(video_id, label, count, weather, samples, boxes)


# -- corpora --------------------------------------------------------------------------------

@dataclass
class ManifestRow:
    video_id: str
    label: int
    true_count: int
    weather: str


def generate_videos(videos_per_class: int | Sequence[int], frames_per_video: int, seed: int = 0,
                    config: SceneConfig = SceneConfig(), weather_mix: float = 0.2,
                    weather_override: WeatherEffect | None = None, labeling: str = "class",
                    source_range: tuple[int, int] = (1, 24)) -> list[Video]:
    """Generate a corpus in memory.

    ``labeling='tercile'`` draws every count from ``source_range`` and labels
    each video by the tercile of its count rank (a related source task).
    """
    if isinstance(videos_per_class, int):
        videos_per_class = (videos_per_class,) * len(LABELS)
    root = Rng(seed)
    videos: list[Video] = []
    if labeling == "class":
        for label, nv in enumerate(videos_per_class):
            for i in range(nv):
                vrng = root.child(label, i)
                weather = weather_override or sample_weather(vrng.child(7), weather_mix)
                vid = f"{LABEL_DIRS[label]}{i:03d}"
                videos.append(generate_video(label, frames_per_video, config, weather, vrng, video_id=vid))
        return videos
    if labeling != "tercile":
        raise ValueError(f"unknown labeling {labeling!r}")
    total = sum(videos_per_class)
    draft = []
    for i in range(total):
        vrng = root.child(len(LABELS), i)
        weather = weather_override or sample_weather(vrng.child(7), weather_mix)
        draft.append(generate_video(0, frames_per_video, config, weather, vrng, video_id=f"src{i:04d}",
                                    count_range=source_range))
    order = sorted(range(total), key=lambda i: (draft[i].true_count, i))
    for rank, i in enumerate(order):
        label = min(len(LABELS) - 1, rank * len(LABELS) // total)
        v = draft[i]
        v.label = label
        for f in v.frames:
            f.label = label
        videos.append(v)
    return videos


def write_corpus(videos: Sequence[Video], root: str | Path) -> list[ManifestRow]:
    """Write frames in the dataset directory layout plus ``manifest.csv`` beside it."""
    root = Path(root)
    for d in LABEL_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    rows = []
    for v in videos:
        for f in v.frames:
            write_ppm(f.image, root / LABEL_DIRS[v.label] / f"{v.video_id}_f{f.frame_index:03d}.ppm")
        rows.append(ManifestRow(v.video_id, v.label, v.true_count, str(v.weather)))
    write_manifest(rows, root / "manifest.csv")
    return rows


def write_manifest(rows: Sequence[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["video_id", "class", "true_count", "weather"])
        for r in rows:
            w.writerow([r.video_id, LABELS[r.label], r.true_count, r.weather])


def read_manifest(path: str | Path) -> list[ManifestRow]:
    with open(path, newline="") as f:
        return [ManifestRow(r["video_id"], LABELS.index(r["class"]), int(r["true_count"]), r["weather"])
                for r in csv.DictReader(f)]


def generate_corpus(root: str | Path, videos_per_class: int | Sequence[int] = 2, frames_per_video: int = 5,
                    seed: int = 0, config: SceneConfig = SceneConfig(), weather_mix: float = 0.2,
                    weather_override: WeatherEffect | None = None, labeling: str = "class",
                    source_range: tuple[int, int] = (1, 24)) -> list[ManifestRow]:
    videos = generate_videos(videos_per_class, frames_per_video, seed, config, weather_mix,
                             weather_override, labeling, source_range)
    return write_corpus(videos, root)


def with_overlap(config: SceneConfig, overlap: int) -> SceneConfig:
    """Move the Heavy lower bound so Medium and Heavy share ``overlap`` counts (0 = disjoint)."""
    (l0, l1), (m0, m1), (h0, h1) = config.count_ranges
    return replace(config, count_ranges=((l0, l1), (m0, m1), (m1 + 1 - overlap, h1)))
