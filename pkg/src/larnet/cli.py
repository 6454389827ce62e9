"""Command line entry point: ``larnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import config as C
from .dataio import DatasetError, SyntheticSpec, denormalize, generate_synthetic_dataset, load_image, \
    load_manifest, normalize, read_frames, save_strip, write_frames
from .embeddings import EmbeddingError
from .networks import ConfigError, load_model
from .training import TrainingDiverged, checkpoint_classes, checkpoint_train_config, make_encoder, train

log = logging.getLogger("larnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_EPILOG = "config keys (set with --set key=value or in a --config file):\n" + C.config_help()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve_manifest(path: str) -> str:
    return os.path.join(path, "manifest.json") if os.path.isdir(path) else path


def _train_config(args, base_out: str) -> C.TrainConfig:
    """Build and validate the config before any work starts."""
    try:
        overrides = [C.parse_override(s) for s in args.set or []]
    except C.ConfigValueError as exc:
        raise UsageError(str(exc))
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    if getattr(args, "dataset", None):
        overrides.append(("dataset", _resolve_manifest(args.dataset)))
    try:
        base = C.load_config(args.config) if args.config else C.TrainConfig()
        if getattr(args, "ablation", None):
            cfg = C.make_ablation_config(args.ablation, base, overrides)
        else:
            cfg = C.apply_overrides(base, overrides)
    except C.ConfigValueError as exc:
        raise UsageError(str(exc))
    if not any(k == "out_dir" for k, _ in overrides):
        cfg.out_dir = base_out
    if not cfg.dataset:
        raise UsageError("no dataset given (use --dataset or --set dataset=...)")
    return cfg


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(num_classes=args.num_classes, videos_per_class=args.videos_per_class,
                         frames_per_video=args.frames, frame_size=args.size, test_fraction=args.test_fraction,
                         seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = generate_synthetic_dataset(spec, args.out)
    print(f"wrote {len(manifest.entries)} videos in {manifest.num_classes} classes to {manifest.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args, args.out)
    if not os.path.exists(cfg.dataset):
        raise DatasetError(f"dataset manifest {cfg.dataset} not found")
    os.makedirs(cfg.out_dir, exist_ok=True)
    C.dump_config(cfg, os.path.join(cfg.out_dir, "config.txt"))
    state = train(cfg, resume=args.resume)
    print(f"trained to step {state.step}; checkpoints in {cfg.out_dir}")
    return EXIT_OK


def _load_for_inference(path: str):
    bundle = load_model(path)
    classes = checkpoint_classes(path)
    tcfg = checkpoint_train_config(path) or C.TrainConfig()
    if classes is None:
        raise ConfigError(f"{path} does not record the action vocabulary")
    return bundle, make_encoder(tcfg, classes), tcfg


def cmd_generate(args) -> int:
    from .training import generate_video

    if args.mode == "extracted" and not args.drive:
        raise UsageError("--mode extracted needs --drive")
    if args.mode == "generated" and args.drive:
        raise UsageError("--drive is only used with --mode extracted")
    bundle, encoder, _ = _load_for_inference(args.checkpoint)
    res, t = bundle.cfg.resolution, bundle.cfg.clip_len
    x0 = load_image(args.actor, res)
    drive = None
    if args.drive:
        if not os.path.isdir(args.drive):
            raise DatasetError(f"driving clip {args.drive} not found")
        drive = normalize(read_frames(args.drive, 0, t, res))
    video = generate_video(bundle, encoder, x0, args.action, args.position, seed=args.seed, drive=drive)
    frames_dir = os.path.join(args.out, "frames")
    write_frames(denormalize(video), frames_dir)
    save_strip(video, os.path.join(args.out, "strip.png"))
    print(f"wrote {len(video)} frames to {frames_dir}")
    return EXIT_OK


def _load_extractor(path: Optional[str]):
    from .extractors import load_extractor

    if not path:
        log.warning("no feature extractor given: FID/FVD are reported as absent")
        return None
    if not os.path.exists(path):
        log.warning("feature extractor %s missing: FID/FVD are reported as absent", path)
        return None
    return load_extractor(path)


def _emit_plots(out_dir: str):
    from .evaluation import plot_framewise, plot_per_class

    plot_framewise(os.path.join(out_dir, "framewise.csv"), os.path.join(out_dir, "framewise.png"))
    plot_per_class(os.path.join(out_dir, "metrics.csv"), os.path.join(out_dir, "per_class.png"))


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_bundle
    from .metrics import build_report

    extractor = _load_extractor(args.extractor)
    if args.self_check:
        manifest = load_manifest(_resolve_manifest(args.dataset))
        from .dataio import ClipLoader
        loader = ClipLoader(manifest, args.clip_len, args.resolution)
        rng = np.random.default_rng(args.seed)
        items = []
        for i in manifest.indices(args.split):
            clip = loader.sample(i, rng)
            items.append((manifest.entries[i].video_dir, clip.class_id, clip.frames, clip.frames))
        report = build_report(items, manifest.classes,
                              extractor.frame_features if extractor else None,
                              extractor.clip_features if extractor else None)
        report.write_csv(args.out)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --self-check is given")
        bundle, encoder, tcfg = _load_for_inference(args.checkpoint)
        dataset = _resolve_manifest(args.dataset) if args.dataset else tcfg.dataset
        if not dataset or not os.path.exists(dataset):
            raise DatasetError(f"dataset manifest {dataset!r} not found")
        manifest = load_manifest(dataset)
        report = evaluate_bundle(bundle, encoder, manifest, args.out, args.split, args.seed, extractor, args.mode)
    _emit_plots(args.out)
    agg = report.aggregate()
    print(" ".join(f"{k}={'absent' if v is None else f'{v:.4f}'}" for k, v in agg.items()))
    return EXIT_OK


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in name).strip("_")


def _run_complete(run_dir: str, steps: int) -> bool:
    from .networks import read_checkpoint

    path = os.path.join(run_dir, "last.pt")
    if not os.path.exists(path):
        return False
    try:
        return read_checkpoint(path)["train_state"]["step"] >= steps
    except Exception:
        return False


def cmd_ablate(args) -> int:
    from .evaluation import evaluate_bundle

    if not args.names:
        raise UsageError("give at least one ablation name")
    names = []
    for n in args.names:
        try:
            names.append(C.canonical_ablation_name(n))
        except C.ConfigValueError as exc:
            raise UsageError(str(exc))
    configs = {}
    for name in names:
        for seed in args.seeds:
            args.ablation, args.seed = name, seed
            configs[name, seed] = _train_config(args, os.path.join(args.out, _slug(name), f"seed{seed}"))
    extractor = _load_extractor(args.extractor)
    detail = []
    for (name, seed), cfg in configs.items():
        row = {"ablation": name, "seed": seed, "status": "ok", "psnr": None, "ssim": None, "fid": None, "fvd": None}
        try:
            if _run_complete(cfg.out_dir, cfg.steps):
                log.info("%s seed %d: cached checkpoint, skipping training", name, seed)
            else:
                resume = os.path.join(cfg.out_dir, "last.pt")
                train(cfg, resume=resume if os.path.exists(resume) else None)
            bundle, encoder, _ = _load_for_inference(os.path.join(cfg.out_dir, "last.pt"))
            report = evaluate_bundle(bundle, encoder, load_manifest(cfg.dataset), os.path.join(cfg.out_dir, "eval"),
                                     args.split, seed, extractor)
            row.update(report.aggregate())
        except Exception as exc:  # a failed run is recorded, the sweep goes on
            log.error("%s seed %d failed: %s", name, seed, exc)
            row["status"] = f"failed: {exc}"
        detail.append(row)
    _write_ablation_tables(detail, names, args.out)
    failed = sum(r["status"] != "ok" for r in detail)
    print(f"{len(detail)} runs, {failed} failed; summary in {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK


def _write_ablation_tables(detail, names, out_dir):
    metrics = ("psnr", "ssim", "fid", "fvd")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation_runs.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, ["ablation", "seed", "status", *metrics])
        w.writeheader()
        for r in detail:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ablation", *metrics, "runs"])
        for name in names:
            rows = [r for r in detail if r["ablation"] == name and r["status"] == "ok"]
            med = []
            for m in metrics:
                vals = [r[m] for r in rows if r[m] is not None]
                med.append(repr(float(np.median(vals))) if vals else "")
            w.writerow([name, *med, len(rows)])


def cmd_plot(args) -> int:
    from .evaluation import plot_framewise, plot_per_class

    if not args.framewise and not args.metrics:
        raise UsageError("give --framewise and/or --metrics")
    os.makedirs(args.out, exist_ok=True)
    if args.framewise:
        print(plot_framewise(args.framewise, os.path.join(args.out, "framewise.png")))
    if args.metrics:
        print(plot_per_class(args.metrics, os.path.join(args.out, "per_class.png")))
    return EXIT_OK


def cmd_train_extractor(args) -> int:
    from .extractors import ClassifierConfig, save_extractor, train_classifier

    manifest = load_manifest(_resolve_manifest(args.dataset))
    cfg = ClassifierConfig(num_classes=manifest.num_classes, resolution=args.resolution, clip_len=args.clip_len)
    model, acc = train_classifier(manifest, cfg, steps=args.steps, seed=args.seed, split="train")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "extractor.pt")
    save_extractor(model, path)
    print(f"classifier train accuracy {acc:.3f}; saved to {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_config_args(p, ablation=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--dataset", help="dataset directory or manifest.json")
    if ablation:
        p.add_argument("--ablation", help=f"named preset, one of {C.ablation_names()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="larnet", description="Conditional action video synthesis toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=CONFIG_EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "Render the synthetic moving-shapes action dataset.")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--videos-per-class", type=int, default=50)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--size", type=int, default=56)
    p.add_argument("--test-fraction", type=float, default=0.1)

    p = add("train", cmd_train, "Train a model (optionally a named ablation preset).")
    _add_config_args(p)
    p.add_argument("--out", default="runs/larnet")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = add("generate", cmd_generate, "Generate one clip from an actor image and an action.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--actor", required=True, help="actor image")
    p.add_argument("--action", required=True, help="action name")
    p.add_argument("--position", type=float, default=0.0, help="clip position in [0, 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("generated", "extracted"), default="generated")
    p.add_argument("--drive", help="frame directory of the driving clip (mode extracted)")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "Score a checkpoint on a dataset split; writes CSVs and plots.")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="defaults to the dataset the checkpoint was trained on")
    p.add_argument("--split", default="test")
    p.add_argument("--extractor", help="feature extractor checkpoint for FID/FVD")
    p.add_argument("--mode", choices=("generated", "extracted"), default="generated")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--self-check", action="store_true", help="score real clips against themselves")
    p.add_argument("--clip-len", type=int, default=16, help="clip length for --self-check")
    p.add_argument("--resolution", type=int, default=56, help="resolution for --self-check")

    p = add("ablate", cmd_ablate, "Train and evaluate ablation presets over seeds; writes a summary table.")
    p.add_argument("names", nargs="*", help="ablation names")
    _add_config_args(p, ablation=False)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--split", default="test")
    p.add_argument("--extractor")
    p.add_argument("--out", required=True)

    p = add("plot", cmd_plot, "Plot a per-timestep quality curve and/or per-class bars from CSVs.")
    p.add_argument("--framewise", help="CSV with columns t,psnr,ssim")
    p.add_argument("--metrics", help="CSV with columns class,metric,value")
    p.add_argument("--out", required=True)

    p = add("train-extractor", cmd_train_extractor, "Train the action classifier used for FID/FVD features.")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=56)
    p.add_argument("--clip-len", type=int, default=16)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"larnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ConfigError, EmbeddingError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"larnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
