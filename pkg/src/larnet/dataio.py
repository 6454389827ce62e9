"""Frame-directory datasets, synthetic action videos and clip sampling.

On-disk layout::

    root/
      manifest.json
      <video_dir>/000000.png, 000001.png, ...

Pixels are stored as 8-bit RGB and exposed to the model in [-1, 1].
``denormalize`` maps back with ``rint((x + 1) * 127.5)`` (round half to even),
so 0.0 -> 128.
"""
import json
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = 1

# Motion program per class id, in class order.
MOTION_PROGRAMS = (
    "translate right",
    "translate up",
    "diagonal",
    "grow",
    "shrink",
    "oscillate horizontal",
    "rotate around center",
    "wave arm",
)
SHAPES = ("square", "circle", "triangle")


class DatasetError(Exception):
    """Raised for malformed manifests, missing frames or impossible clips."""


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, C] float32 in [-1, 1]
    start_frame: int
    total_frames: int
    class_id: int
    class_name: str

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [T, H, W, C], got {self.frames.shape}")
        if self.start_frame < 0 or self.start_frame + len(self.frames) > self.total_frames:
            raise ValueError("clip extends past the end of its source video")

    @property
    def position(self) -> float:
        return compute_position_encoding(self.start_frame, self.total_frames)


@dataclass
class ManifestEntry:
    video_dir: str
    class_name: str
    class_id: int
    num_frames: int
    frame_size: int
    split: str = "train"
    # generated clips: start frame of the paired ground-truth clip
    source_start: Optional[int] = None


@dataclass
class DatasetManifest:
    root: str
    entries: List[ManifestEntry]
    classes: List[str]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def indices(self, split: Optional[str] = None) -> List[int]:
        return [i for i, e in enumerate(self.entries) if split is None or e.split == split]

    def validate(self, clip_len: Optional[int] = None):
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("duplicate class names in vocabulary")
        for e in self.entries:
            if not 0 <= e.class_id < len(self.classes):
                raise DatasetError(f"class_id {e.class_id} outside vocabulary of {len(self.classes)}")
            if self.classes[e.class_id] != e.class_name:
                raise DatasetError(f"class_id {e.class_id} is {self.classes[e.class_id]!r}, entry says {e.class_name!r}")
            if clip_len is not None and e.num_frames < clip_len:
                raise DatasetError(f"{e.video_dir}: {e.num_frames} frames < clip length {clip_len}")

    def to_json(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "classes": list(self.classes),
            "entries": [{k: v for k, v in vars(e).items() if v is not None} for e in self.entries],
        }

    def save(self, path: Optional[str] = None) -> str:
        path = path or os.path.join(self.root, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")
        return path


def load_manifest(path: str) -> DatasetManifest:
    """Read ``manifest.json`` (or the directory containing it)."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DatasetError(f"manifest not found: {path}")
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
    if raw.get("schema") != MANIFEST_SCHEMA:
        raise DatasetError(f"{path}: unsupported manifest schema {raw.get('schema')!r}")
    try:
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        manifest = DatasetManifest(os.path.dirname(os.path.abspath(path)), entries, list(raw["classes"]))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    manifest.validate()
    return manifest


def compute_position_encoding(start_frame: int, total_frames: int) -> float:
    """Relative position of a clip's first frame within its source video."""
    if total_frames <= 0:
        raise ValueError("total_frames must be positive")
    if not 0 <= start_frame < total_frames:
        raise ValueError(f"start_frame {start_frame} outside [0, {total_frames})")
    return start_frame / total_frames


def normalize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 127.5 - 1.0


def denormalize(frames) -> np.ndarray:
    """Map [-1, 1] frames to uint8 pixels, rounding half to even."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.clip(np.rint((frames + 1.0) * 127.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# Synthetic moving-shape actions
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 8
    videos_per_class: int = 50
    frames_per_video: int = 32
    frame_size: int = 56
    shapes: Sequence[str] = SHAPES
    motions: Sequence[str] = MOTION_PROGRAMS
    test_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if not 1 <= self.num_classes <= len(self.motions):
            raise ValueError(f"num_classes must be in [1, {len(self.motions)}]")
        if len(set(self.motions[:self.num_classes])) != self.num_classes:
            raise ValueError("each class needs its own motion program")
        unknown = set(self.motions) - set(MOTION_PROGRAMS)
        if unknown:
            raise ValueError(f"unknown motion programs: {sorted(unknown)}")
        bad_shapes = set(self.shapes) - set(SHAPES)
        if bad_shapes or not self.shapes:
            raise ValueError(f"shape palette must be a non-empty subset of {SHAPES}")
        if self.videos_per_class < 1 or self.frames_per_video < 2 or self.frame_size < 16:
            raise ValueError("videos_per_class >= 1, frames_per_video >= 2 and frame_size >= 16 required")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")


def _shape_polygon(shape, cx, cy, r, angle=0.0):
    if shape == "square":
        pts = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    elif shape == "triangle":
        pts = [(0, -1.15), (1.1, 0.85), (-1.1, 0.85)]
    else:
        return None
    c, s = math.cos(angle), math.sin(angle)
    return [(cx + r * (x * c - y * s), cy + r * (x * s + y * c)) for x, y in pts]


def _draw_shape(draw, shape, cx, cy, r, color, angle=0.0):
    poly = _shape_polygon(shape, cx, cy, r, angle)
    if poly is None:
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    else:
        draw.polygon(poly, fill=color)


def _motion_state(motion, u, size, r, start, phase):
    """Centre, radius and extra params at normalized time u in [0, 1]."""
    cx, cy = start
    lo, hi = r + 1, size - r - 1
    travel = 0.55 * size
    extra = {}
    if motion == "translate right":
        cx = cx + travel * u
    elif motion == "translate up":
        cy = cy - travel * u
    elif motion == "diagonal":
        cx, cy = cx + 0.7 * travel * u, cy - 0.7 * travel * u
    elif motion == "grow":
        r = r * (0.5 + 1.3 * u)
    elif motion == "shrink":
        r = r * (1.8 - 1.3 * u)
    elif motion == "oscillate horizontal":
        cx = size / 2 + 0.3 * size * math.sin(2 * math.pi * 2 * u + phase)
    elif motion == "rotate around center":
        a = 2 * math.pi * u + phase
        cx, cy = size / 2 + 0.28 * size * math.cos(a), size / 2 + 0.28 * size * math.sin(a)
    elif motion == "wave arm":
        extra["arm_angle"] = -math.pi / 2 + 0.9 * math.sin(2 * math.pi * 2 * u + phase)
    else:
        raise ValueError(f"unknown motion program {motion!r}")
    cx = float(np.clip(cx, lo, hi)) if motion not in ("grow", "shrink", "wave arm") else cx
    cy = float(np.clip(cy, lo, hi)) if motion not in ("grow", "shrink", "wave arm") else cy
    return cx, cy, r, extra


def _start_position(motion, size, r, rng):
    span = lambda a, b: float(rng.uniform(a * size, b * size))
    if motion == "translate right":
        return span(0.15, 0.3), span(0.25, 0.75)
    if motion == "translate up":
        return span(0.25, 0.75), span(0.7, 0.85)
    if motion == "diagonal":
        return span(0.15, 0.3), span(0.7, 0.85)
    if motion == "wave arm":
        return span(0.4, 0.6), span(0.55, 0.7)
    return span(0.4, 0.6), span(0.4, 0.6)


def render_video(motion: str, shape: str, num_frames: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one synthetic action video as uint8 [T, H, W, 3]."""
    background = tuple(int(v) for v in rng.integers(0, 80, size=3))
    color = tuple(int(v) for v in rng.integers(130, 256, size=3))
    arm_color = tuple(int(v) for v in rng.integers(130, 256, size=3))
    r = float(rng.uniform(0.09, 0.13) * size)
    start = _start_position(motion, size, r, rng)
    phase = float(rng.uniform(0, 2 * math.pi))
    spin = float(rng.uniform(0, math.pi / 2))
    frames = np.empty((num_frames, size, size, 3), dtype=np.uint8)
    for t in range(num_frames):
        u = t / (num_frames - 1)
        cx, cy, rr, extra = _motion_state(motion, u, size, r, start, phase)
        img = Image.new("RGB", (size, size), background)
        draw = ImageDraw.Draw(img)
        _draw_shape(draw, shape, cx, cy, rr, color, spin)
        if "arm_angle" in extra:
            a = extra["arm_angle"]
            length = 2.4 * r
            px, py = cx + r * 0.9, cy - r * 0.2
            draw.line([(px, py), (px + length * math.cos(a), py + length * math.sin(a))],
                      fill=arm_color, width=max(2, int(size / 20)))
        frames[t] = np.asarray(img)
    return frames


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str) -> DatasetManifest:
    """Write a deterministic moving-shapes action dataset to ``out_dir``.

    Every video gets its own child RNG stream derived from ``spec.seed`` so the
    output is a pure function of the spec.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    classes = list(spec.motions[:spec.num_classes])
    n_test = int(round(spec.videos_per_class * spec.test_fraction))
    streams = np.random.SeedSequence(spec.seed).spawn(spec.num_classes * spec.videos_per_class)
    entries = []
    for class_id, motion in enumerate(classes):
        for k in range(spec.videos_per_class):
            rng = np.random.default_rng(streams[class_id * spec.videos_per_class + k])
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            frames = render_video(motion, shape, spec.frames_per_video, spec.frame_size, rng)
            video_dir = f"{motion.replace(' ', '_')}_{k:04d}"
            write_frames(frames, os.path.join(out_dir, video_dir))
            split = "test" if k >= spec.videos_per_class - n_test else "train"
            entries.append(ManifestEntry(video_dir, motion, class_id, spec.frames_per_video, spec.frame_size, split))
    manifest = DatasetManifest(os.path.abspath(out_dir), entries, classes)
    manifest.save()
    return manifest


def write_frames(frames: np.ndarray, video_dir: str):
    """Save uint8 [T, H, W, 3] frames as zero-padded PNGs."""
    os.makedirs(video_dir, exist_ok=True)
    for t, frame in enumerate(frames):
        Image.fromarray(frame, "RGB").save(os.path.join(video_dir, f"{t:06d}.png"), optimize=False)


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

def read_frames(video_dir: str, start: int, count: int, size: Optional[int] = None) -> np.ndarray:
    """Read ``count`` consecutive frames as uint8 [T, H, W, 3], optionally resized."""
    out = []
    for t in range(start, start + count):
        path = os.path.join(video_dir, f"{t:06d}.png")
        if not os.path.exists(path):
            raise DatasetError(f"missing frame {path}")
        try:
            with Image.open(path) as img:
                img = img.convert("RGB")
                if size is not None and img.size != (size, size):
                    img = img.resize((size, size), Image.BILINEAR)
                out.append(np.asarray(img))
        except OSError as exc:
            raise DatasetError(f"cannot decode {path}: {exc}") from exc
    return np.stack(out)


class ClipLoader:
    """Samples contiguous stride-1 clips from a manifest.

    Decoded videos are cached in memory as uint8; the cache is only ever
    filled, so concurrent readers see consistent data.
    """

    def __init__(self, manifest: DatasetManifest, clip_len: int = 16, resolution: Optional[int] = None,
                 cache: bool = True):
        manifest.validate(clip_len)
        self.manifest = manifest
        self.clip_len = clip_len
        self.resolution = resolution
        self._cache = {} if cache else None

    def _video(self, index):
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        e = self.manifest.entries[index]
        frames = read_frames(os.path.join(self.manifest.root, e.video_dir), 0, e.num_frames, self.resolution)
        if self._cache is not None:
            self._cache[index] = frames
        return frames

    def clip_at(self, index: int, start: int) -> VideoClip:
        e = self.manifest.entries[index]
        if start + self.clip_len > e.num_frames:
            raise DatasetError(f"clip [{start}, {start + self.clip_len}) exceeds {e.num_frames} frames")
        pixels = self._video(index)[start:start + self.clip_len]
        return VideoClip(normalize(pixels), start, e.num_frames, e.class_id, e.class_name)

    def sample(self, index: int, rng: np.random.Generator) -> VideoClip:
        e = self.manifest.entries[index]
        if self.clip_len > e.num_frames:
            raise DatasetError(f"clip length {self.clip_len} > {e.num_frames} frames in {e.video_dir}")
        start = int(rng.integers(0, e.num_frames - self.clip_len + 1))
        return self.clip_at(index, start)


def load_clip(manifest: DatasetManifest, entry_index: int, clip_len: int, rng: np.random.Generator,
              resolution: Optional[int] = None) -> VideoClip:
    """Sample one clip with a uniformly random valid start frame.

    The returned clip carries its class fields and ``position`` (start/total).
    """
    if not 0 <= entry_index < len(manifest.entries):
        raise DatasetError(f"entry {entry_index} out of range")
    e = manifest.entries[entry_index]
    if clip_len > e.num_frames:
        raise DatasetError(f"clip length {clip_len} > {e.num_frames} frames in {e.video_dir}")
    return ClipLoader(manifest, clip_len, resolution, cache=False).sample(entry_index, rng)


def load_image(path: str, resolution: Optional[int] = None) -> np.ndarray:
    """Read one image as a normalized [H, W, 3] frame."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if resolution is not None and img.size != (resolution, resolution):
                img = img.resize((resolution, resolution), Image.BILINEAR)
            return normalize(np.asarray(img))
    except OSError as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc


def save_strip(frames: np.ndarray, path: str):
    """Tile normalized [T, H, W, C] frames horizontally into one PNG."""
    pixels = denormalize(frames)
    Image.fromarray(np.concatenate(list(pixels), axis=1), "RGB").save(path)
