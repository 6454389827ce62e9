"""Adversarial training loop, checkpoints and loss logging.

Each generator step is preceded by ``n_critic`` critic updates (D_v and/or
D_m, whichever the ablation enables). All randomness (batch order, z, remix
masks, GP interpolation) comes from one numpy Generator and one torch
Generator that are stored in every checkpoint, so a resumed run follows the
same trajectory as an uninterrupted one.
"""
import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig, apply_overrides, config_keys, _flatten
from .dataio import ClipLoader, DatasetError, load_manifest
from .embeddings import ActionEncoder, load_vector_table
from .extractors import load_extractor, random_perceptual_net
from .networks import (CHECKPOINT_FORMAT, CHECKPOINT_VERSION, ConfigError, ModelBundle, ModelConfig,
                       read_checkpoint)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step",) + L.COMPONENTS + ("total",)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batch:
    video: torch.Tensor     # [B, C, T, H, W]
    x0: torch.Tensor        # [B, C, H, W]
    a_e: torch.Tensor       # [B, D_e]
    p_e: torch.Tensor       # [B]
    z: torch.Tensor         # [B, D_z]
    class_ids: torch.Tensor


@dataclass
class TrainState:
    step: int
    config: TrainConfig
    classes: list
    bundle: ModelBundle
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    np_rng: np.random.Generator
    torch_rng: torch.Generator
    best: Optional[dict] = None


def model_config_for(cfg: TrainConfig, embed_dim: int) -> ModelConfig:
    return ModelConfig(
        resolution=cfg.resolution,
        clip_len=cfg.clip_len,
        base_channels=cfg.base_channels,
        hierarchy_levels=cfg.ablation.hierarchy_levels,
        use_motion_generator=cfg.ablation.use_motion_generator,
        embed_dim=embed_dim,
        z_dim=cfg.z_dim,
        critic_channels=cfg.critic_channels,
    )


def make_encoder(cfg: TrainConfig, classes) -> ActionEncoder:
    table = None if cfg.embedding == "onehot" else load_vector_table(cfg.embedding)
    return ActionEncoder(classes, table)


def _generator_params(bundle: ModelBundle, cfg: TrainConfig):
    params = []
    for name, p in bundle.generator.named_parameters():
        if cfg.freeze_extractor and name.startswith("motion_extractor."):
            p.requires_grad_(False)
            continue
        params.append(p)
    return params


def init_state(cfg: TrainConfig, classes, embed_dim: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    bundle = ModelBundle(model_config_for(cfg, embed_dim))
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(_generator_params(bundle, cfg), lr=cfg.lr_g, betas=betas)
    opt_d = torch.optim.Adam(bundle.critic_parameters(), lr=cfg.lr_d, betas=betas)
    torch_rng = torch.Generator().manual_seed(cfg.seed)
    np_rng = np.random.default_rng(cfg.seed)
    return TrainState(0, cfg, list(classes), bundle, opt_g, opt_d, np_rng, torch_rng)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": state.bundle.cfg.to_dict(),
        "state_dict": state.bundle.state_dict(),
        "classes": state.classes,
        "train_config": _flatten(state.config),
        "train_state": {
            "step": state.step,
            "opt_g": state.opt_g.state_dict(),
            "opt_d": state.opt_d.state_dict(),
            "np_rng": state.np_rng.bit_generator.state,
            "torch_rng": state.torch_rng.get_state(),
            "best": state.best,
        },
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str, expect: Optional[ModelConfig] = None) -> TrainState:
    """Restore a full training state; raises ConfigError if ``expect`` differs from the stored model config."""
    payload = read_checkpoint(path)
    if "train_state" not in payload:
        raise ConfigError(f"{path} holds model weights only, not a training state")
    stored = payload["train_config"]
    known = config_keys()
    cfg = apply_overrides(TrainConfig(), [(k, v) for k, v in stored.items() if k in known])
    mcfg = ModelConfig.from_dict(payload["model_config"])
    if expect is not None and mcfg != expect:
        diff = {k: (v, getattr(expect, k)) for k, v in mcfg.to_dict().items() if getattr(expect, k) != v}
        raise ConfigError(f"checkpoint model config differs: {diff}")
    state = init_state(cfg, payload["classes"], mcfg.embed_dim)
    if state.bundle.cfg != mcfg:
        raise ConfigError("stored train config does not reproduce the stored model config")
    state.bundle.load_state_dict(payload["state_dict"])
    ts = payload["train_state"]
    state.opt_g.load_state_dict(ts["opt_g"])
    state.opt_d.load_state_dict(ts["opt_d"])
    state.np_rng.bit_generator.state = ts["np_rng"]
    state.torch_rng.set_state(ts["torch_rng"])
    state.step = ts["step"]
    state.best = ts.get("best")
    return state


def checkpoint_classes(path: str):
    return read_checkpoint(path).get("classes")


def checkpoint_train_config(path: str) -> Optional[TrainConfig]:
    stored = read_checkpoint(path).get("train_config")
    if stored is None:
        return None
    known = config_keys()
    return apply_overrides(TrainConfig(), [(k, v) for k, v in stored.items() if k in known])


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: TrainConfig, state: Optional[TrainState] = None, manifest=None):
        self.cfg = cfg.validate()
        self.manifest = manifest or load_manifest(cfg.dataset)
        self.loader = ClipLoader(self.manifest, cfg.clip_len, cfg.resolution)
        self.indices = self.manifest.indices(cfg.split) or self.manifest.indices()
        if not self.indices:
            raise DatasetError("dataset has no entries")
        self.encoder = make_encoder(cfg, self.manifest.classes)
        if state is None:
            state = init_state(cfg, self.manifest.classes, self.encoder.dim)
        elif state.classes != list(self.manifest.classes):
            raise DatasetError("checkpoint classes do not match the dataset vocabulary")
        elif state.bundle.cfg != model_config_for(cfg, self.encoder.dim):
            raise ConfigError("checkpoint model does not match the training config")
        self.state = state
        self.weights = cfg.effective_weights()
        self.feature_net = None
        if self.weights.perceptual > 0:
            if cfg.perceptual_net == "random":
                self.feature_net = random_perceptual_net(cfg.seed)
            else:
                self.feature_net = load_extractor(cfg.perceptual_net).perceptual_net()

    @property
    def bundle(self) -> ModelBundle:
        return self.state.bundle

    def sample_batch(self) -> Batch:
        st = self.state
        picks = st.np_rng.choice(self.indices, size=self.cfg.batch_size)
        clips = [self.loader.sample(int(i), st.np_rng) for i in picks]
        video = torch.from_numpy(np.stack([c.frames for c in clips])).permute(0, 4, 1, 2, 3).contiguous()
        a_e = torch.from_numpy(self.encoder.encode_batch([c.class_id for c in clips]))
        p_e = torch.tensor([c.position for c in clips], dtype=torch.float32)
        z = torch.randn(len(clips), self.cfg.z_dim, generator=st.torch_rng)
        return Batch(video, video[:, :, 0], a_e, p_e, z, torch.tensor([c.class_id for c in clips]))

    def mix_prob(self) -> float:
        return self.cfg.mix.prob(self.state.step, self.cfg.steps)

    def critic_step(self) -> float:
        cfg, st, g = self.cfg, self.state, self.bundle.generator
        batch = self.sample_batch()
        with torch.no_grad():
            v_gen, e_m = g(batch.x0, batch.a_e, batch.p_e, batch.z)
            e_hat = g.extract_motion(batch.video) if cfg.ablation.motion_adv else None
        loss = 0.0
        lam = self.weights.gp_coefficient
        if cfg.ablation.video_adv != "none":
            fake = v_gen
            if cfg.ablation.video_adv == "mix":
                fake, _ = L.remix_videos(v_gen, batch.video, self.mix_prob(), st.torch_rng)
            loss = loss + L.wgan_critic_loss(self.bundle.video_critic, batch.video, fake, lam, st.torch_rng)
        if cfg.ablation.motion_adv:
            loss = loss + L.wgan_critic_loss(self.bundle.motion_critic, e_hat[0], e_m[0], lam, st.torch_rng)
        st.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        st.opt_d.step()
        return float(loss.detach())

    def generator_losses(self, batch: Batch) -> Dict[str, torch.Tensor]:
        cfg, st, g = self.cfg, self.state, self.bundle.generator
        zero = torch.zeros(())
        comps = {k: zero for k in L.COMPONENTS}
        e_a = g.appearance(batch.x0)
        cond = torch.cat([batch.a_e, batch.p_e.view(-1, 1), batch.z], dim=1)
        e_m = g.generate_motion(batch.a_e, batch.p_e, batch.z) if g.motion_generator is not None else None
        v_gen = g.synthesize(e_a, e_m, cond)
        comps["L_mse"] = L.mse_loss(v_gen, batch.video)
        if cfg.ablation.use_motion_supervision:
            e_hat = g.extract_motion(batch.video)
            comps["L_m_mse"] = L.pyramid_mse(e_m, e_hat)
            if cfg.extracted_recon and not cfg.freeze_extractor:
                v_drive = g.synthesize(e_a, e_hat, cond)
                comps["L_mse"] = 0.5 * (comps["L_mse"] + L.mse_loss(v_drive, batch.video))
        if cfg.ablation.motion_adv:
            comps["L_m_adv"] = L.wgan_generator_loss(self.bundle.motion_critic, e_m[0])
        if cfg.ablation.video_adv == "plain":
            comps["L_v_madv"] = L.wgan_generator_loss(self.bundle.video_critic, v_gen)
        elif cfg.ablation.video_adv == "mix":
            v_mix, _ = L.remix_videos(v_gen, batch.video, self.mix_prob(), st.torch_rng)
            comps["L_v_madv"] = L.wgan_generator_loss(self.bundle.video_critic, v_mix)
        if self.feature_net is not None:
            comps["L_p"] = L.perceptual_loss(v_gen, batch.video, self.feature_net)
        return comps

    def generator_step(self) -> Dict[str, float]:
        st = self.state
        _set_trainable(self.bundle.critic_parameters(), False)
        try:
            comps = self.generator_losses(self.sample_batch())
        finally:
            _set_trainable(self.bundle.critic_parameters(), True)
        total = L.total_loss(comps, self.weights)
        values = {k: float(v.detach()) for k, v in comps.items()}
        values["total"] = float(total.detach())
        if not all(math.isfinite(v) for v in values.values()):
            snap = os.path.join(self.cfg.out_dir, "nan_snapshot.pt")
            save_checkpoint(st, snap)
            raise TrainingDiverged(f"non-finite loss at step {st.step + 1}: {values}; state saved to {snap}")
        st.opt_g.zero_grad(set_to_none=True)
        total.backward()
        st.opt_g.step()
        return values

    def critic_active(self) -> bool:
        return self.cfg.ablation.video_adv != "none" or self.cfg.ablation.motion_adv

    def step(self) -> Dict[str, float]:
        if self.critic_active():
            for _ in range(self.cfg.n_critic):
                self.critic_step()
        values = self.generator_step()
        self.state.step += 1
        return values

    def run(self, stop_at: Optional[int] = None, callback: Optional[Callable[[int, dict], None]] = None,
            log_every: int = 50) -> TrainState:
        cfg = self.cfg
        os.makedirs(cfg.out_dir, exist_ok=True)
        csv_path = os.path.join(cfg.out_dir, "losses.csv")
        _truncate_csv(csv_path, self.state.step)
        end = min(stop_at or cfg.steps, cfg.steps)
        self.bundle.train()
        with open(csv_path, "a", newline="") as f:
            writer = csv.writer(f)
            if f.tell() == 0:
                writer.writerow(CSV_COLUMNS)
            while self.state.step < end:
                values = self.step()
                step = self.state.step
                writer.writerow([step] + [repr(values[k]) for k in CSV_COLUMNS[1:]])
                f.flush()
                if step % log_every == 0 or step == end:
                    log.info("step %d total %.4f mse %.4f", step, values["total"], values["L_mse"])
                if step % cfg.checkpoint_every == 0 or step == end:
                    save_checkpoint(self.state, os.path.join(cfg.out_dir, "last.pt"))
                    if step % cfg.checkpoint_every == 0:
                        save_checkpoint(self.state, os.path.join(cfg.out_dir, f"ckpt_{step:07d}.pt"))
                if callback is not None:
                    callback(step, values)
        return self.state


def _set_trainable(params, flag: bool):
    for p in params:
        p.requires_grad_(flag)


def _truncate_csv(path: str, step: int):
    """Drop logged rows past ``step`` so a resumed run appends cleanly."""
    if not os.path.exists(path):
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step] if rows else []
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def train(cfg: TrainConfig, resume: Optional[str] = None, stop_at: Optional[int] = None,
          manifest=None, callback=None) -> TrainState:
    """Train (or resume) until ``cfg.steps`` or ``stop_at``; returns the final state."""
    state = None
    if resume is not None:
        state = load_checkpoint(resume)
        state.config = cfg
    trainer = Trainer(cfg, state, manifest)
    if resume is None:
        # a fresh run owns its log
        csv_path = os.path.join(cfg.out_dir, "losses.csv")
        if os.path.exists(csv_path):
            os.remove(csv_path)
    return trainer.run(stop_at=stop_at, callback=callback)


@torch.no_grad()
def generate_video(bundle: ModelBundle, encoder: ActionEncoder, x0: np.ndarray, action, position: float = 0.0,
                   seed: int = 0, drive: Optional[np.ndarray] = None) -> np.ndarray:
    """One clip [T, H, W, C] in [-1, 1] from an actor frame [H, W, C] and an action id or name.

    ``drive`` ([T, H, W, C]) switches the motion source from the generator to
    motion extracted from that clip.
    """
    bundle.eval()
    cfg = bundle.cfg
    a_e = encoder.encode_id(action) if isinstance(action, (int, np.integer)) else encoder.encode_name(action)
    rng = torch.Generator().manual_seed(seed)
    z = torch.randn(1, cfg.z_dim, generator=rng)
    x = torch.from_numpy(np.ascontiguousarray(x0, dtype=np.float32)).permute(2, 0, 1)[None]
    drive_t = None
    if drive is not None:
        drive_t = torch.from_numpy(np.ascontiguousarray(drive, dtype=np.float32)).permute(3, 0, 1, 2)[None]
    video, _ = bundle.generator(x, torch.from_numpy(a_e)[None], torch.tensor([float(position)]), z, drive=drive_t)
    return video[0].permute(1, 2, 3, 0).numpy()
