"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 need days of CPU time (20k-step trainings, an 18-run ablation);
they run only with ``LARNET_FULL_ACCEPTANCE=1`` and are reported as skipped
otherwise. ``LARNET_ACCEPTANCE_DIR`` keeps their datasets and checkpoints so
a second invocation reuses finished runs. The full-width overfit check
(criterion 5) takes about 35 minutes on one CPU core; ``LARNET_SKIP_OVERFIT=1``
skips it.

Tolerances are fixed here and never loosened.
"""
import os
import statistics

import numpy as np
import pytest
import torch

from larnet.config import make_ablation_config
from larnet.dataio import ClipLoader, SyntheticSpec, generate_synthetic_dataset, load_manifest
from larnet.losses import (COMPONENTS, LossWeights, gradient_penalty, mix_adversarial_losses, total_loss,
                           wgan_critic_loss, wgan_generator_loss)
from larnet.metrics import fid, frechet_distance, fvd, psnr, ssim
from larnet.networks import IntegratorCell, IntegratorLevel, MotionBlock, integrate_step, load_model, save_model
from larnet.training import generate_video, make_encoder, train

FULL = os.environ.get("LARNET_FULL_ACCEPTANCE") == "1"
WORK = os.environ.get("LARNET_ACCEPTANCE_DIR", "/tmp/larnet_acceptance")
OVERFIT = FULL or os.environ.get("LARNET_SKIP_OVERFIT") != "1"
FULL_REASON = "needs LARNET_FULL_ACCEPTANCE=1 (multi-day CPU budget)"
OVERFIT_REASON = "skipped by LARNET_SKIP_OVERFIT=1"

# pinned tolerances
EQ_SCALAR = 0.552184
TOL_SCALAR = 1e-5
TOL_PASSTHROUGH = 1e-4
TOL_GRAD = 1e-4
TOL_GP_TWO = 1e-6
TOL_PSNR = 1e-3
TOL_SSIM = 1e-6
TOL_FRECHET = 1e-6
TOL_IDENTICAL_SETS = 1e-3
OVERFIT_STEPS = 500
OVERFIT_MSE = 0.01
E2E_STEPS = 20_000
E2E_PSNR = 20.0
E2E_ACCURACY = 0.80
ABLATION_SEEDS = (0, 1, 2)
DETERMINISM_STEPS = 200

RESULTS = []


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def skip(number, reason):
    line = f"criterion {number}: SKIPPED | {reason}"
    RESULTS.append(line)
    print(line)
    pytest.skip(reason)


# --------------------------------------------------------------------------
# 1. gated integrator unit suite
# --------------------------------------------------------------------------

def _forced_cell(channels, b_bias, f_bias, kernel=3):
    cell = IntegratorCell(channels, kernel).double()
    with torch.no_grad():
        cell.w_b.weight.zero_()
        cell.w_b.bias.fill_(b_bias)
        cell.w_f.weight.zero_()
        cell.w_f.bias.fill_(f_bias)
    return cell


def test_criterion_1_integrator_suite():
    torch.manual_seed(0)
    e_a = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    e_m = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    passthrough = (integrate_step(e_a, e_m, _forced_cell(4, 40.0, 0.0)) - e_a).abs().max().item()

    closed = integrate_step(5 * e_a, e_m, _forced_cell(4, -40.0, 0.0))
    bounded = closed.abs().max().item() < 1.0

    scalar = _forced_cell(1, 0.0, 20.0, kernel=1)
    with torch.no_grad():
        scalar.w_a.weight.fill_(1.0)
        scalar.w_a.bias.zero_()
    one = lambda v: torch.full((1, 1, 1, 1), v, dtype=torch.float64)
    value = integrate_step(one(0.5), one(0.2), scalar).item()

    level = IntegratorLevel(4, with_carry=True).double()
    seq = torch.randn(2, 4, 16, 5, 5, dtype=torch.float64)
    carry = torch.randn(2, 4, 16, 5, 5, dtype=torch.float64)
    base = level(e_a, seq, carry)
    bumped = seq.clone()
    bumped[:, :, 10] += 1.0
    causal = torch.equal(level(e_a, bumped, carry)[:, :, :10], base[:, :, :10])

    ok = passthrough < TOL_PASSTHROUGH and bounded and abs(value - EQ_SCALAR) < TOL_SCALAR and causal
    report(1, ok, f"passthrough err {passthrough:.2e}, closed-gate bounded {bounded}, "
                  f"scalar {value:.6f} (want {EQ_SCALAR}), causal {causal}")


# --------------------------------------------------------------------------
# 2. finite-difference gradient checks
# --------------------------------------------------------------------------

def _max_relative_error(module, loss_fn, eps=1e-6):
    worst = 0.0
    params = list(module.parameters())
    analytic = torch.autograd.grad(loss_fn(), params)
    for p, g in zip(params, analytic):
        numeric = torch.zeros_like(p).view(-1)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        numeric = numeric.view_as(p)
        worst = max(worst, ((g - numeric).norm() / max(g.norm(), numeric.norm(), 1e-12)).item())
    return worst


def test_criterion_2_gradient_checks():
    torch.manual_seed(1)
    level = IntegratorLevel(2, with_carry=True).double()
    e_a = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    e_m = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    carry = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    w = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    err_level = _max_relative_error(level, lambda: (level(e_a, e_m, carry) * w).sum())

    block = MotionBlock(2, 2, upsample=True).double()
    h = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64)
    w2 = torch.randn(1, 2, 2, 4, 4, dtype=torch.float64)
    err_block = _max_relative_error(block, lambda: (block(h)[1] * w2).sum())
    report(2, err_level < TOL_GRAD and err_block < TOL_GRAD,
           f"integrator level rel err {err_level:.2e}, motion-generator final block rel err {err_block:.2e}")


# --------------------------------------------------------------------------
# 3. loss identities
# --------------------------------------------------------------------------

def test_criterion_3_loss_identities():
    rng = torch.Generator().manual_seed(0)
    real = torch.randn(6, 3, 4, 4, generator=rng, dtype=torch.float64)
    fake = torch.randn(6, 3, 4, 4, generator=rng, dtype=torch.float64)
    # 16 entries of +-1/4: unit norm with no rounding, so the penalty is exactly zero
    w = torch.zeros(48, dtype=torch.float64)
    w[torch.randperm(48, generator=rng)[:16]] = 0.25 * torch.sign(torch.randn(16, generator=rng, dtype=torch.float64))
    gp_one = gradient_penalty(lambda x: x.flatten(1) @ w, real, fake, torch.Generator().manual_seed(1)).item()
    gp_two = gradient_penalty(lambda x: x.flatten(1) @ (2 * w), real, fake, torch.Generator().manual_seed(1)).item()

    torch.manual_seed(2)
    critic = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(2 * 4 * 3 * 3, 8), torch.nn.Tanh(),
                                 torch.nn.Linear(8, 1), torch.nn.Flatten(0))
    v_gen, v_real = torch.randn(3, 2, 4, 3, 3), torch.randn(3, 2, 4, 3, 3)
    d_mix, g_mix = mix_adversarial_losses(critic, v_gen, v_real, 0.0, 10.0, torch.Generator().manual_seed(5))
    d_plain = wgan_critic_loss(critic, v_real, v_gen, 10.0, torch.Generator().manual_seed(5))
    g_plain = wgan_generator_loss(critic, v_gen)
    bitwise = torch.equal(d_mix, d_plain) and torch.equal(g_mix, g_plain)

    comps = {k: torch.tensor(v, dtype=torch.float64) for k, v in zip(COMPONENTS, (0.3, -1.2, 0.05, 4.0, 0.7))}
    weights = LossWeights(1.0, 0.1, 10.0, 0.1, 1.0)
    doubled = LossWeights(*(2 * x for x in weights.as_tuple()))
    homog = abs(total_loss(comps, doubled).item() - 2 * total_loss(comps, weights).item()) < 1e-12

    ok = gp_one == 0.0 and abs(gp_two - 1.0) < TOL_GP_TWO and bitwise and homog
    report(3, ok, f"GP unit-norm {gp_one:.1e}, GP norm-2 {gp_two:.9f}, mix_prob=0 bitwise {bitwise}, "
                  f"homogeneous {homog}")


# --------------------------------------------------------------------------
# 4. metric oracles
# --------------------------------------------------------------------------

def test_criterion_4_metric_oracles():
    zeros, half = np.zeros((16, 16, 3)), np.full((16, 16, 3), 0.5)
    p = psnr(zeros, half, data_range=1.0)
    x = np.random.default_rng(0).uniform(-1, 1, (32, 32, 3))
    s = ssim(x, x)
    fd25 = frechet_distance(np.zeros(2), np.eye(2), np.array([3.0, 4.0]), np.eye(2))
    d = 7
    fdd = frechet_distance(np.zeros(d), 4 * np.eye(d), np.zeros(d), np.eye(d))
    frames = np.random.default_rng(1).uniform(-1, 1, (40, 4, 4, 3))
    feat = lambda a: np.asarray(a).reshape(len(a), -1)[:, :5]
    clips = np.random.default_rng(2).uniform(-1, 1, (20, 4, 4, 4, 3))
    f_id = fid(frames, frames.copy(), feat)
    v_id = fvd(clips, clips.copy(), feat)
    ok = (abs(p - 6.0206) < TOL_PSNR and abs(s - 1) < TOL_SSIM and abs(fd25 - 25) < TOL_FRECHET
          and abs(fdd - d) < TOL_FRECHET and abs(f_id) <= TOL_IDENTICAL_SETS and abs(v_id) <= TOL_IDENTICAL_SETS)
    report(4, ok, f"PSNR {p:.4f} dB, SSIM(x,x) {s:.8f}, FD {fd25:.8f} / {fdd:.8f} (d={d}), "
                  f"FID/FVD identical {f_id:.2e} / {v_id:.2e}")


# --------------------------------------------------------------------------
# 5. single-clip overfit
# --------------------------------------------------------------------------

def test_criterion_5_overfit_single_clip(tmp_path):
    if not OVERFIT:
        skip(5, OVERFIT_REASON)
    data = generate_synthetic_dataset(
        SyntheticSpec(num_classes=1, videos_per_class=1, frames_per_video=16, test_fraction=0.0, seed=3),
        str(tmp_path / "data"))
    cfg = make_ablation_config("LARNet-MI-3+[Lv_madv, Lm_adv]", overrides=[
        ("dataset", os.path.join(data.root, "manifest.json")), ("batch_size", 1), ("steps", OVERFIT_STEPS),
        ("out_dir", str(tmp_path / "run")), ("checkpoint_every", OVERFIT_STEPS)])
    state = train(cfg)
    clip = ClipLoader(data, cfg.clip_len, cfg.resolution).clip_at(0, 0)
    enc = make_encoder(cfg, data.classes)
    video = generate_video(state.bundle, enc, clip.frames[0], 0, clip.position, seed=123)
    mse = float(np.mean((video - clip.frames) ** 2))
    driven = generate_video(state.bundle, enc, clip.frames[0], 0, clip.position, seed=123, drive=clip.frames)
    driven_mse = float(np.mean((driven - clip.frames) ** 2))
    report(5, mse < OVERFIT_MSE, f"reconstruction MSE {mse:.5f} after {OVERFIT_STEPS} steps "
                                 f"(threshold {OVERFIT_MSE}, fresh noise draw; "
                                 f"with extracted motion {driven_mse:.5f})")


# --------------------------------------------------------------------------
# 6-8. synthetic end-to-end, ablation ordering, framewise degradation
# --------------------------------------------------------------------------

def _full_dataset():
    root = os.path.join(WORK, "synthetic")
    if not os.path.exists(os.path.join(root, "manifest.json")):
        generate_synthetic_dataset(SyntheticSpec(num_classes=8, videos_per_class=50, frames_per_video=32,
                                                 frame_size=56, seed=0), root)
    return load_manifest(root)


def _extractor(manifest):
    from larnet.extractors import ClassifierConfig, load_extractor, save_extractor, train_classifier

    path = os.path.join(WORK, "extractor.pt")
    if not os.path.exists(path):
        model, _ = train_classifier(manifest, ClassifierConfig(num_classes=8), steps=3000, seed=0, split="train")
        save_extractor(model, path)
    return path, load_extractor(path)


def _trained_run(name, seed, manifest, extractor_path, steps=E2E_STEPS):
    from larnet.networks import read_checkpoint

    out = os.path.join(WORK, "runs", name.replace(" ", "").replace("[", "").replace("]", ""), f"seed{seed}")
    last = os.path.join(out, "last.pt")
    cfg = make_ablation_config(name, overrides=[
        ("dataset", os.path.join(manifest.root, "manifest.json")), ("steps", steps), ("seed", seed),
        ("out_dir", out), ("perceptual_net", extractor_path)])
    if not (os.path.exists(last) and read_checkpoint(last)["train_state"]["step"] >= steps):
        train(cfg, resume=last if os.path.exists(last) else None)
    return cfg, out


def _evaluate(cfg, out, manifest, extractor, seed=0):
    from larnet.evaluation import evaluate_bundle
    from larnet.training import checkpoint_classes

    path = os.path.join(out, "last.pt")
    bundle = load_model(path)
    enc = make_encoder(cfg, checkpoint_classes(path))
    return evaluate_bundle(bundle, enc, manifest, os.path.join(out, "eval"), "test", seed, extractor)


@pytest.fixture(scope="module")
def e2e_run():
    if not FULL:
        return None
    manifest = _full_dataset()
    ext_path, extractor = _extractor(manifest)
    cfg, out = _trained_run("LARNet-MI-3+[Lv_madv, Lm_adv]", 0, manifest, ext_path)
    report_ = _evaluate(cfg, out, manifest, extractor)
    return cfg, out, manifest, extractor, report_


def test_criterion_6_synthetic_end_to_end(e2e_run):
    if not FULL:
        skip(6, FULL_REASON)
    from larnet.evaluation import classify_generated

    cfg, out, manifest, extractor, rep = e2e_run
    acc = classify_generated(os.path.join(out, "eval", "generated"), extractor)
    report(6, rep.psnr >= E2E_PSNR and acc >= E2E_ACCURACY,
           f"test PSNR {rep.psnr:.2f} dB (need {E2E_PSNR}), classifier agreement {acc:.3f} (need {E2E_ACCURACY})")


def test_criterion_7_ablation_ordering():
    if not FULL:
        skip(7, FULL_REASON)
    manifest = _full_dataset()
    ext_path, extractor = _extractor(manifest)
    chain = ["LARNet-MI-3", "LARNet-MI-1", "LARNet-Base", "BaseNet-2"]
    plain, mix = "LARNet-MI-3+[Lv_adv, Lm_adv]", "LARNet-MI-3+[Lv_madv, Lm_adv]"
    scores = {}
    for name in chain + [plain, mix]:
        for seed in ABLATION_SEEDS:
            cfg, out = _trained_run(name, seed, manifest, ext_path)
            rep = _evaluate(cfg, out, manifest, extractor, seed)
            scores[name, seed] = {"psnr": statistics.median(c.psnr for c in rep.clips),
                                  "ssim": statistics.median(c.ssim for c in rep.clips), "fvd": rep.fvd}
    pairs_ok, details = True, []
    for hi, lo in zip(chain, chain[1:]):
        for metric in ("psnr", "ssim"):
            wins = sum(scores[hi, s][metric] >= scores[lo, s][metric] for s in ABLATION_SEEDS)
            pairs_ok &= wins >= 2
            details.append(f"{hi}>={lo} {metric} {wins}/{len(ABLATION_SEEDS)}")
    fvd_mix = statistics.median(scores[mix, s]["fvd"] for s in ABLATION_SEEDS)
    fvd_plain = statistics.median(scores[plain, s]["fvd"] for s in ABLATION_SEEDS)
    report(7, pairs_ok and fvd_mix <= fvd_plain,
           "; ".join(details) + f"; median FVD mix {fvd_mix:.3f} vs plain {fvd_plain:.3f}")


def test_criterion_8_framewise_degradation(e2e_run):
    if not FULL:
        skip(8, FULL_REASON)
    from larnet.evaluation import plot_framewise

    cfg, out, manifest, extractor, rep = e2e_run
    csv_path = os.path.join(out, "eval", "framewise.csv")
    png_path = plot_framewise(csv_path, os.path.join(out, "eval", "framewise.png"))
    first, last = rep.psnr_curve[0], rep.psnr_curve[-1]
    report(8, first > last and os.path.exists(png_path),
           f"PSNR t=1 {first:.2f} dB vs t={len(rep.psnr_curve)} {last:.2f} dB; curve at {csv_path}")


# --------------------------------------------------------------------------
# 9. determinism and persistence
# --------------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path):
    data = generate_synthetic_dataset(SyntheticSpec(num_classes=8, videos_per_class=2, frames_per_video=20,
                                                    test_fraction=0.0, seed=7), str(tmp_path / "data"))

    def cfg_for(out):
        # reduced width keeps the 4 x 200-step runs within minutes; the loop is the full one
        return make_ablation_config("LARNet-MI-3+[Lv_madv, Lm_adv]", overrides=[
            ("dataset", os.path.join(data.root, "manifest.json")), ("steps", DETERMINISM_STEPS), ("seed", 7),
            ("base_channels", 16), ("critic_channels", 8), ("batch_size", 2), ("n_critic", 2),
            ("checkpoint_every", 100), ("out_dir", str(tmp_path / out))])

    read = lambda p: open(p).read()
    a = train(cfg_for("a"))
    train(cfg_for("b"))
    same_csv = read(tmp_path / "a" / "losses.csv") == read(tmp_path / "b" / "losses.csv")

    path = str(tmp_path / "model.pt")
    save_model(a.bundle, path)
    loaded = load_model(path, expect=a.bundle.cfg)
    enc = make_encoder(a.config, data.classes)
    x0 = np.random.default_rng(0).uniform(-1, 1, (56, 56, 3)).astype(np.float32)
    bit_exact = np.array_equal(generate_video(a.bundle, enc, x0, 2, 0.1, seed=1),
                               generate_video(loaded, enc, x0, 2, 0.1, seed=1))

    cfg_c = cfg_for("c")
    train(cfg_c, stop_at=DETERMINISM_STEPS // 2)
    resumed = train(cfg_c, resume=str(tmp_path / "c" / "last.pt"))
    resume_ok = read(tmp_path / "a" / "losses.csv") == read(tmp_path / "c" / "losses.csv") and all(
        torch.equal(x, y) for x, y in zip(a.bundle.state_dict().values(), resumed.bundle.state_dict().values()))
    report(9, same_csv and bit_exact and resume_ok,
           f"{DETERMINISM_STEPS}-step retrain CSV identical {same_csv}, checkpoint forward bit-exact {bit_exact}, "
           f"resume at {DETERMINISM_STEPS // 2} matches uninterrupted {resume_ok}")
