"""Test-set generation, scoring and the figure plots."""
import csv
import logging
import os
from typing import Optional

import numpy as np

from .dataio import ClipLoader, DatasetManifest, ManifestEntry, denormalize, load_manifest, write_frames
from .embeddings import ActionEncoder
from .metrics import MetricReport, per_class_report
from .networks import ModelBundle
from .training import generate_video

log = logging.getLogger(__name__)

TEXT_COLUMNS = ("class", "metric")


def generate_test_set(bundle: ModelBundle, encoder: ActionEncoder, manifest: DatasetManifest, out_dir: str,
                      split: Optional[str] = "test", seed: int = 0, mode: str = "generated") -> DatasetManifest:
    """Generate one clip per ``split`` entry, conditioned on that entry's first clip frame.

    Clip starts and noise are drawn from ``seed``; ``mode="extracted"`` drives
    the motion with the ground-truth clip instead of the motion generator.
    The output manifest records the source video and start for pairing.
    """
    if mode not in ("generated", "extracted"):
        raise ValueError(f"unknown motion mode {mode!r}")
    cfg = bundle.cfg
    loader = ClipLoader(manifest, cfg.clip_len, cfg.resolution)
    indices = manifest.indices(split)
    if not indices:
        raise ValueError(f"manifest has no {split!r} entries")
    rng = np.random.default_rng(seed)
    entries = []
    for n, i in enumerate(indices):
        clip = loader.sample(i, rng)
        drive = clip.frames if mode == "extracted" else None
        video = generate_video(bundle, encoder, clip.frames[0], clip.class_id, clip.position,
                               seed=seed * 100003 + n, drive=drive)
        src = manifest.entries[i]
        write_frames(denormalize(video), os.path.join(out_dir, src.video_dir))
        entries.append(ManifestEntry(src.video_dir, src.class_name, src.class_id, cfg.clip_len, cfg.resolution,
                                     split or "all", source_start=clip.start_frame))
    gen = DatasetManifest(os.path.abspath(out_dir), entries, list(manifest.classes))
    gen.save()
    return gen


def evaluate_bundle(bundle: ModelBundle, encoder: ActionEncoder, manifest: DatasetManifest, out_dir: str,
                    split: Optional[str] = "test", seed: int = 0, extractor=None,
                    mode: str = "generated") -> MetricReport:
    """Generate the test set under ``out_dir/generated`` and write metric CSVs to ``out_dir``."""
    gen_dir = os.path.join(out_dir, "generated")
    generate_test_set(bundle, encoder, manifest, gen_dir, split, seed, mode)
    frame_fn = extractor.frame_features if extractor is not None else None
    clip_fn = extractor.clip_features if extractor is not None else None
    report = per_class_report(manifest, gen_dir, frame_fn, clip_fn, resolution=bundle.cfg.resolution)
    report.write_csv(out_dir)
    return report


def classify_generated(gen_dir: str, extractor) -> float:
    """Fraction of generated clips the classifier assigns to their conditioning class."""
    from .dataio import normalize, read_frames

    gen = load_manifest(gen_dir)
    clips = [normalize(read_frames(os.path.join(gen.root, e.video_dir), 0, e.num_frames)) for e in gen.entries]
    pred = extractor.predict(np.stack(clips))
    return float(np.mean(pred == np.array([e.class_id for e in gen.entries])))


# --------------------------------------------------------------------------
# Plots
# --------------------------------------------------------------------------

def _read_columns(path: str, required):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column {missing[0]!r}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        return {c: [r[c] if c in TEXT_COLUMNS else float(r[c]) for r in rows] for c in required}
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed value ({exc})") from exc


def plot_framewise(csv_path: str, png_path: str, title: str = "Frame quality over time"):
    """Per-timestep PSNR/SSIM curve from a ``t,psnr,ssim`` CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = _read_columns(csv_path, ("t", "psnr", "ssim"))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(cols["t"], cols["psnr"], "o-", color="tab:blue", label="PSNR")
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(cols["t"], cols["ssim"], "s--", color="tab:red", label="SSIM")
    ax2.set_ylabel("SSIM", color="tab:red")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return png_path


def plot_per_class(csv_path: str, png_path: str, title: str = "Per-class scores"):
    """Grouped bars per class: FVD, FID and PSNR on the left axis, SSIM on the right."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = _read_columns(csv_path, ("class", "metric", "value"))
    table = {}
    for name, metric, value in zip(cols["class"], cols["metric"], cols["value"]):
        if name != "all":
            table.setdefault(name, {})[metric] = value
    if not table:
        raise ValueError(f"{csv_path}: no per-class rows")
    classes = list(table)
    left = [m for m in ("fvd", "fid", "psnr") if any(m in table[c] for c in classes)]
    x = np.arange(len(classes))
    width = 0.8 / (len(left) + 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(classes)), 4))
    for k, m in enumerate(left):
        ax.bar(x + k * width, [table[c].get(m, np.nan) for c in classes], width, label=m.upper())
    ax.set_ylabel(" / ".join(m.upper() for m in left))
    ax2 = ax.twinx()
    ax2.bar(x + len(left) * width, [table[c].get("ssim", np.nan) for c in classes], width,
            color="tab:gray", label="SSIM")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(classes, rotation=30, ha="right")
    handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return png_path
