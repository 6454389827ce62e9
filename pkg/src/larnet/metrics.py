"""PSNR, SSIM, Frechet distances (FID/FVD) and per-class / per-timestep reports.

Frames are numpy arrays [H, W, C] (clips [T, H, W, C]) in the normalized
[-1, 1] range unless ``data_range`` says otherwise.

Conventions:
    * PSNR of identical frames is ``inf``; aggregation caps every value at
      ``PSNR_CAP`` dB so perfect frames do not swamp means.
    * Classes with no clips are reported as absent (missing rows / None),
      never as zero.
    * FID/FVD values depend on the feature extractor. With the desk-scale
      synthetic classifier they are comparable across runs of this package
      only.
"""
import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
DEFAULT_RANGE = 2.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EIG_TOL = 1e-10


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr_frames(a, b, data_range: float = DEFAULT_RANGE) -> np.ndarray:
    """Per-frame PSNR of clips [T, H, W, C] (inf where frames are identical)."""
    a, b = _check_pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(data_range ** 2 / mse)


def psnr(a, b, data_range: float = DEFAULT_RANGE) -> float:
    """PSNR in dB of a frame [H, W, C], or the capped per-frame mean of a clip [T, H, W, C]."""
    a, b = _check_pair(a, b)
    if a.ndim == 4:
        return float(np.minimum(psnr_frames(a, b, data_range), PSNR_CAP).mean())
    return float(psnr_frames(a[None], b[None], data_range)[0])


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    # img [H, W, C] -> [H-k+1, W-k+1, C]
    patches = sliding_window_view(img, win.shape, axis=(0, 1))
    return np.einsum("ijcab,ab->ijc", patches, win)


def ssim(a, b, data_range: float = DEFAULT_RANGE) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5), averaged over windows and channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError(f"ssim expects a frame [H, W(, C)], got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"frame {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    win = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim_frames(a, b, data_range: float = DEFAULT_RANGE) -> np.ndarray:
    a, b = _check_pair(a, b)
    return np.array([ssim(x, y, data_range) for x, y in zip(a, b)])


# --------------------------------------------------------------------------
# Frechet distance
# --------------------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray, name: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    tol = EIG_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of (S1 S2)^(1/2) is computed as the trace of
    (S1^(1/2) S2 S1^(1/2))^(1/2), which is symmetric PSD; eigenvalues in
    (-tol, 0) are clipped to zero, anything more negative is an error.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64)), np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    d = mu1.shape[0]
    if mu2.shape != (d,) or s1.shape != (d, d) or s2.shape != (d, d):
        raise ValueError(f"dimension mismatch: mu {mu1.shape}/{mu2.shape}, sigma {s1.shape}/{s2.shape}")
    for name, s in (("sigma1", s1), ("sigma2", s2)):
        if not np.allclose(s, s.T, atol=1e-8 * max(1.0, np.abs(s).max())):
            raise ValueError(f"{name} is not symmetric")
    root1 = _psd_sqrt(s1, "sigma1")
    _psd_sqrt(s2, "sigma2")
    cross = _psd_sqrt(root1 @ s2 @ root1, "sigma1^1/2 sigma2 sigma1^1/2")
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))


def gaussian_moments(features, ddof: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors [N, D], got {feats.shape}")
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False, ddof=ddof))


def feature_distance(real_feats, gen_feats, ddof: int = 1) -> float:
    real_feats, gen_feats = np.asarray(real_feats), np.asarray(gen_feats)
    if real_feats.ndim != 2 or gen_feats.ndim != 2 or real_feats.shape[1] != gen_feats.shape[1]:
        raise ValueError(f"feature dims differ: {real_feats.shape} vs {gen_feats.shape}")
    return frechet_distance(*gaussian_moments(real_feats, ddof), *gaussian_moments(gen_feats, ddof))


def fid(real_frames, gen_frames, extractor: Callable, ddof: int = 1) -> float:
    """Frechet distance of frame-level features; clips [N, T, ...] are pooled to frames."""
    if extractor is None:
        raise ValueError("FID needs a frame feature extractor")
    real, gen = np.asarray(real_frames), np.asarray(gen_frames)
    if real.ndim == 5:
        real = real.reshape(-1, *real.shape[2:])
    if gen.ndim == 5:
        gen = gen.reshape(-1, *gen.shape[2:])
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("FID needs at least 2 frames per side")
    return feature_distance(extractor(real), extractor(gen), ddof)


def fvd(real_clips, gen_clips, extractor: Callable, ddof: int = 1) -> float:
    """Frechet distance of one clip-level feature per video."""
    if extractor is None:
        raise ValueError("FVD needs a clip feature extractor")
    real, gen = np.asarray(real_clips), np.asarray(gen_clips)
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("FVD needs at least 2 clips per side")
    return feature_distance(extractor(real), extractor(gen), ddof)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def framewise_quality(pairs: Iterable[Tuple[np.ndarray, np.ndarray]],
                      data_range: float = DEFAULT_RANGE) -> Dict[str, np.ndarray]:
    """Mean (capped) PSNR and SSIM at each time step over (generated, real) clip pairs."""
    psnrs, ssims = [], []
    length = None
    for gen, real in pairs:
        gen, real = _check_pair(gen, real)
        if length is not None and len(gen) != length:
            raise ValueError(f"clip length {len(gen)} differs from {length}")
        length = len(gen)
        psnrs.append(np.minimum(psnr_frames(gen, real, data_range), PSNR_CAP))
        ssims.append(ssim_frames(gen, real, data_range))
    if not psnrs:
        raise ValueError("no clip pairs given")
    return {"psnr": np.mean(psnrs, axis=0), "ssim": np.mean(ssims, axis=0)}


@dataclass
class ClipScore:
    name: str
    class_id: int
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    clips: List[ClipScore]
    classes: List[str]
    psnr_curve: np.ndarray
    ssim_curve: np.ndarray
    per_class: Dict[str, Dict[str, Optional[float]]]
    fid: Optional[float] = None
    fvd: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def psnr(self) -> float:
        return float(np.mean([c.psnr for c in self.clips]))

    @property
    def ssim(self) -> float:
        return float(np.mean([c.ssim for c in self.clips]))

    def aggregate(self) -> Dict[str, Optional[float]]:
        return {"psnr": self.psnr, "ssim": self.ssim, "fid": self.fid, "fvd": self.fvd}

    def write_csv(self, out_dir: str, prefix: str = "") -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "metrics": os.path.join(out_dir, f"{prefix}metrics.csv"),
            "framewise": os.path.join(out_dir, f"{prefix}framewise.csv"),
            "clips": os.path.join(out_dir, f"{prefix}clips.csv"),
        }
        with open(paths["metrics"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "metric", "value"])
            for metric, value in self.aggregate().items():
                if value is not None:
                    w.writerow(["all", metric, repr(float(value))])
            for name in self.classes:
                for metric, value in self.per_class.get(name, {}).items():
                    if value is not None:
                        w.writerow([name, metric, repr(float(value))])
        with open(paths["framewise"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "psnr", "ssim"])
            for t, (p, s) in enumerate(zip(self.psnr_curve, self.ssim_curve), 1):
                w.writerow([t, repr(float(p)), repr(float(s))])
        with open(paths["clips"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["clip", "class", "psnr", "ssim"])
            for c in self.clips:
                w.writerow([c.name, self.classes[c.class_id], repr(c.psnr), repr(c.ssim)])
        return paths


def build_report(items: Sequence[Tuple[str, int, np.ndarray, np.ndarray]], classes: Sequence[str],
                 frame_extractor: Optional[Callable] = None, clip_extractor: Optional[Callable] = None,
                 data_range: float = DEFAULT_RANGE) -> MetricReport:
    """Score (name, class_id, generated clip, real clip) items.

    FID/FVD are computed when the matching extractor is given; per-class
    FID/FVD need at least two clips of the class and are None otherwise.
    """
    if not items:
        raise ValueError("nothing to evaluate")
    clips = []
    psnr_rows, ssim_rows = [], []
    by_class = defaultdict(list)
    for name, class_id, gen, real in items:
        gen, real = _check_pair(gen, real)
        p = np.minimum(psnr_frames(gen, real, data_range), PSNR_CAP)
        s = ssim_frames(gen, real, data_range)
        psnr_rows.append(p)
        ssim_rows.append(s)
        clips.append(ClipScore(name, int(class_id), float(p.mean()), float(s.mean())))
        by_class[int(class_id)].append(len(clips) - 1)
    report = MetricReport(clips, list(classes), np.mean(psnr_rows, axis=0), np.mean(ssim_rows, axis=0), {})
    gen_all = np.stack([np.asarray(it[2]) for it in items])
    real_all = np.stack([np.asarray(it[3]) for it in items])
    if frame_extractor is not None:
        report.fid = fid(real_all, gen_all, frame_extractor)
    if clip_extractor is not None:
        report.fvd = fvd(real_all, gen_all, clip_extractor)
    for class_id, idx in sorted(by_class.items()):
        name = classes[class_id]
        entry = {
            "psnr": float(np.mean([clips[i].psnr for i in idx])),
            "ssim": float(np.mean([clips[i].ssim for i in idx])),
            "fid": None,
            "fvd": None,
        }
        if frame_extractor is not None:
            entry["fid"] = fid(real_all[idx], gen_all[idx], frame_extractor)
        if clip_extractor is not None and len(idx) >= 2:
            entry["fvd"] = fvd(real_all[idx], gen_all[idx], clip_extractor)
        report.per_class[name] = entry
        report.counts[name] = len(idx)
    return report


def per_class_report(manifest, gen_dir: str, frame_extractor=None, clip_extractor=None,
                     resolution: Optional[int] = None, require_all_classes: bool = False) -> MetricReport:
    """Pair generated clips in ``gen_dir`` with their ground truth and score them.

    ``gen_dir`` holds a manifest whose entries name the source video directory
    and carry ``source_start``.
    """
    from .dataio import load_manifest, read_frames, normalize, DatasetError

    gen_manifest = load_manifest(gen_dir)
    real_by_dir = {e.video_dir: e for e in manifest.entries}
    items = []
    for e in gen_manifest.entries:
        src = real_by_dir.get(e.video_dir)
        if src is None:
            raise DatasetError(f"generated clip {e.video_dir} has no ground truth in the manifest")
        start = e.source_start or 0
        gen = normalize(read_frames(os.path.join(gen_manifest.root, e.video_dir), 0, e.num_frames, resolution))
        real = normalize(read_frames(os.path.join(manifest.root, src.video_dir), start, e.num_frames, resolution))
        items.append((e.video_dir, src.class_id, gen, real))
    if require_all_classes:
        missing = set(range(manifest.num_classes)) - {it[1] for it in items}
        if missing:
            raise DatasetError(f"no generated clips for classes {[manifest.classes[i] for i in sorted(missing)]}")
    return build_report(items, manifest.classes, frame_extractor, clip_extractor)


def read_metric_csv(path: str) -> Dict[str, Dict[str, float]]:
    out: Dict[str, Dict[str, float]] = defaultdict(dict)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"class", "metric", "value"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            out[row["class"]][row["metric"]] = float(row["value"])
    return dict(out)


def finite_or_cap(value: float) -> float:
    return PSNR_CAP if math.isinf(value) else value
