from dataclasses import replace

import numpy as np
import pytest

from trafficcnn import synth as S
from trafficcnn.baseline import count_blobs
from trafficcnn.data import load_directory_dataset


def test_fog_halves_spread():
    rng = np.random.default_rng(0)
    frame = rng.uniform(0, 255, (32, 32, 3)).astype(np.float32)
    fogged = S.apply_fog(frame, 0.5)
    assert fogged.std() == pytest.approx(frame.std() / 2, rel=1e-5)
    assert np.array_equal(S.apply_fog(frame, 0.0), frame)
    assert np.allclose(S.apply_fog(frame, 1.0), S.FOG_GRAY)


def test_regeneration_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    S.generate_corpus(a, 2, 2, seed=11)
    S.generate_corpus(b, 2, 2, seed=11)
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert fa == fb
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_corpus_layout(tmp_path):
    rows = S.generate_corpus(tmp_path, 2, 5, seed=3)
    assert len(rows) == 6
    assert len(list(tmp_path.rglob("*.ppm"))) == 30
    assert S.read_manifest(tmp_path / "manifest.csv") == rows
    assert load_directory_dataset(tmp_path).class_counts == (10, 10, 10)


def test_single_vehicle_is_one_blob():
    v = S.generate_video(0, 3, count=1, seed=2)
    for f in v.frames:
        assert count_blobs(f.image).count == 1


@pytest.mark.parametrize("seed", range(5))
def test_validation_mode_blobs_equal_count(seed):
    cfg = S.SceneConfig(validation=True)
    v = S.generate_video(1, 2, cfg, seed=seed)
    for f in v.frames:
        assert count_blobs(f.image).count == v.true_count


def test_counts_follow_class_ranges():
    videos = S.generate_videos(15, 1, seed=8, weather_mix=0)
    for v in videos:
        lo, hi = S.SceneConfig().count_ranges[v.label]
        assert lo <= v.true_count <= hi
        assert v.counts == [v.true_count]
    means = [np.mean([v.true_count for v in videos if v.label == c]) for c in range(3)]
    assert means[0] < means[1] < means[2]


def test_heavy_needs_lane_capacity():
    tight = S.SceneConfig(lanes=2)
    with pytest.raises(ValueError, match="infeasible"):
        S.generate_video(2, 1, tight, seed=0)


def test_vehicles_never_fully_hidden():
    # every drawn box keeps some pixels that no later vehicle overwrites
    for seed in range(10):
        v = S.generate_video(2, 1, seed=seed, count=30)
        boxes = v.boxes[0]
        cover = np.full(S.SceneConfig().size, -1)
        for k, (r, c, h, w) in enumerate(boxes):
            cover[r:r + h, c:c + w] = k
        assert len(np.unique(cover[cover >= 0])) == len(boxes)


def test_tercile_labels_balanced_and_ordered():
    videos = S.generate_videos(10, 1, seed=4, labeling="tercile")
    labels = [v.label for v in videos]
    assert [labels.count(c) for c in range(3)] == [10, 10, 10]
    by_label = [[v.true_count for v in videos if v.label == c] for c in range(3)]
    assert max(by_label[0]) <= min(by_label[1]) and max(by_label[1]) <= min(by_label[2])
    assert all(1 <= c <= 24 for c in sum(by_label, []))


def test_weather_override_and_parse():
    fog = S.WeatherEffect.parse("fog:0.7")
    assert str(fog) == "fog:0.700"
    clear = S.generate_video(0, 1, seed=1, weather=S.WeatherEffect())
    foggy = S.generate_video(0, 1, seed=1, weather=fog)
    assert np.allclose(foggy.frames[0].image, S.apply_fog(clear.frames[0].image, 0.7))
    with pytest.raises(ValueError):
        S.WeatherEffect.parse("snow")
    with pytest.raises(ValueError):
        S.WeatherEffect("fog", density=1.5)


def test_fog_lowers_detected_heavy_counts():
    clear = S.generate_videos((0, 0, 8), 1, seed=6, weather_mix=0)
    fog = S.generate_videos((0, 0, 8), 1, seed=6, weather_override=S.WeatherEffect("fog", 0.7))
    c = sum(count_blobs(v.frames[0].image).count for v in clear)
    f = sum(count_blobs(v.frames[0].image).count for v in fog)
    assert f < c


def test_with_overlap_moves_heavy_floor():
    cfg = S.SceneConfig()
    assert S.with_overlap(cfg, 0).count_ranges[2][0] == 21
    assert S.with_overlap(cfg, 3).count_ranges[2][0] == 18
    with pytest.raises(ValueError):
        replace(cfg, max_overlap=4)
