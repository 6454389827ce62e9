import hashlib
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from larnet.dataio import (ClipLoader, DatasetError, DatasetManifest, ManifestEntry, MOTION_PROGRAMS,
                           SyntheticSpec, VideoClip, compute_position_encoding, denormalize,
                           generate_synthetic_dataset, load_clip, load_image, load_manifest, normalize,
                           read_frames, save_strip)


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


@pytest.mark.parametrize("start,total,expected", [(0, 100, 0.0), (25, 100, 0.25), (84, 112, 0.75)])
def test_position_encoding_examples(start, total, expected):
    assert compute_position_encoding(start, total) == expected


@pytest.mark.parametrize("start,total", [(0, 0), (5, 5), (6, 5), (-1, 5)])
def test_position_encoding_rejects_bad_input(start, total):
    with pytest.raises(ValueError):
        compute_position_encoding(start, total)


@given(st.integers(1, 10_000).flatmap(lambda n: st.tuples(st.integers(0, n - 1), st.just(n))))
def test_position_encoding_is_exact_ratio_in_unit_interval(pair):
    start, total = pair
    p = compute_position_encoding(start, total)
    assert 0.0 <= p < 1.0
    assert p == start / total


def test_denormalize_endpoints_and_midpoint_rule():
    out = denormalize(np.array([-1.0, 0.0, 1.0]))
    assert out.dtype == np.uint8
    # midpoint rounds half-up: (0 + 1) * 127.5 = 127.5 -> 128
    assert out.tolist() == [0, 128, 255]


@given(st.lists(st.integers(0, 255), min_size=1, max_size=64))
def test_pixel_round_trip_is_exact(pixels):
    arr = np.array(pixels, dtype=np.uint8)
    assert np.array_equal(denormalize(normalize(arr)), arr)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=64))
def test_normalized_round_trip_within_one_level(values):
    x = np.array(values, dtype=np.float32)
    assert np.max(np.abs(normalize(denormalize(x)) - x)) <= 1 / 255 + 1e-6


def test_default_spec_has_eight_motion_classes():
    spec = SyntheticSpec()
    spec.validate()
    assert spec.num_classes == 8 and len(MOTION_PROGRAMS) == 8


def test_synthetic_generation_is_seed_stable(tmp_path):
    spec = SyntheticSpec(num_classes=3, videos_per_class=2, frames_per_video=6, seed=7)
    a = generate_synthetic_dataset(spec, str(tmp_path / "a"))
    b = generate_synthetic_dataset(spec, str(tmp_path / "b"))
    assert tree_digest(a.root) == tree_digest(b.root)
    c = generate_synthetic_dataset(SyntheticSpec(num_classes=3, videos_per_class=2, frames_per_video=6, seed=8),
                                   str(tmp_path / "c"))
    assert tree_digest(a.root) != tree_digest(c.root)


def test_full_spec_entry_count(tmp_path):
    spec = SyntheticSpec(num_classes=8, videos_per_class=50, frames_per_video=32, frame_size=16)
    m = generate_synthetic_dataset(spec, str(tmp_path))
    assert len(m.entries) == 400
    assert sorted({e.class_id for e in m.entries}) == list(range(8))
    assert sum(e.split == "test" for e in m.entries) == 8 * 5


def test_manifest_schema_and_png_frames(tiny_dataset):
    with open(os.path.join(tiny_dataset.root, "manifest.json")) as f:
        raw = json.load(f)
    assert raw["schema"] == 1
    e = tiny_dataset.entries[0]
    img = Image.open(os.path.join(tiny_dataset.root, e.video_dir, "000000.png"))
    assert img.mode == "RGB" and img.size == (56, 56)
    loaded = load_manifest(tiny_dataset.root)
    assert loaded.entries == tiny_dataset.entries and loaded.classes == tiny_dataset.classes


def test_short_videos_fail_at_load_time(tmp_path):
    m = generate_synthetic_dataset(SyntheticSpec(num_classes=1, videos_per_class=1, frames_per_video=8),
                                   str(tmp_path))
    with pytest.raises(DatasetError):
        ClipLoader(m, clip_len=16)
    with pytest.raises(DatasetError):
        load_clip(m, 0, 16, np.random.default_rng(0))


def test_only_valid_start_for_exact_length(tmp_path):
    m = generate_synthetic_dataset(SyntheticSpec(num_classes=1, videos_per_class=1, frames_per_video=16),
                                   str(tmp_path))
    rng = np.random.default_rng(0)
    for _ in range(5):
        clip = load_clip(m, 0, 16, rng)
        assert clip.start_frame == 0 and clip.position == 0.0


def test_sampled_starts_cover_valid_range(tiny_dataset):
    loader = ClipLoader(tiny_dataset, clip_len=16)
    rng = np.random.default_rng(1)
    starts = {loader.sample(0, rng).start_frame for _ in range(200)}
    assert starts == set(range(0, 20 - 16 + 1))
    clip = loader.sample(0, rng)
    assert clip.frames.shape == (16, 56, 56, 3)
    assert clip.frames.min() >= -1 and clip.frames.max() <= 1
    assert clip.start_frame + 16 <= clip.total_frames
    assert clip.position == clip.start_frame / clip.total_frames


def test_fixed_rng_gives_identical_clip(tiny_dataset):
    a = load_clip(tiny_dataset, 1, 16, np.random.default_rng(3))
    b = load_clip(tiny_dataset, 1, 16, np.random.default_rng(3))
    assert a.start_frame == b.start_frame and np.array_equal(a.frames, b.frames)


def test_resize_on_load(tiny_dataset):
    clip = ClipLoader(tiny_dataset, clip_len=4, resolution=32).clip_at(0, 0)
    assert clip.frames.shape == (4, 32, 32, 3)


def test_missing_and_corrupt_frames(tmp_path):
    m = generate_synthetic_dataset(SyntheticSpec(num_classes=1, videos_per_class=1, frames_per_video=4),
                                   str(tmp_path))
    vdir = os.path.join(m.root, m.entries[0].video_dir)
    with open(os.path.join(vdir, "000002.png"), "wb") as f:
        f.write(b"not a png")
    with pytest.raises(DatasetError, match="decode"):
        read_frames(vdir, 0, 4)
    os.remove(os.path.join(vdir, "000003.png"))
    with pytest.raises(DatasetError, match="missing"):
        read_frames(vdir, 3, 1)


def test_manifest_validation(tmp_path):
    entries = [ManifestEntry("v", "walk", 1, 20, 56)]
    with pytest.raises(DatasetError):
        DatasetManifest(str(tmp_path), entries, ["walk"]).validate()
    with pytest.raises(DatasetError):
        DatasetManifest(str(tmp_path), [ManifestEntry("v", "run", 0, 20, 56)], ["walk"]).validate()
    with pytest.raises(DatasetError, match="schema"):
        (tmp_path / "manifest.json").write_text('{"schema": 2, "classes": [], "entries": []}')
        load_manifest(str(tmp_path))
    with pytest.raises(DatasetError):
        load_manifest(str(tmp_path / "nowhere"))


def test_video_clip_invariants():
    frames = np.zeros((4, 8, 8, 3), np.float32)
    with pytest.raises(ValueError):
        VideoClip(frames, 3, 6, 0, "a")
    with pytest.raises(ValueError):
        VideoClip(frames[0], 0, 6, 0, "a")


def test_invalid_synthetic_spec(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SyntheticSpec(num_classes=9), str(tmp_path))
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SyntheticSpec(frames_per_video=1), str(tmp_path))


def test_image_and_strip_io(tmp_path, tiny_dataset):
    e = tiny_dataset.entries[0]
    img = load_image(os.path.join(tiny_dataset.root, e.video_dir, "000000.png"), 32)
    assert img.shape == (32, 32, 3) and img.min() >= -1 and img.max() <= 1
    frames = np.stack([img] * 3)
    save_strip(frames, str(tmp_path / "strip.png"))
    assert Image.open(tmp_path / "strip.png").size == (96, 32)
