"""Small action classifier used as frozen feature extractor.

Its 2D frame trunk supplies FID features and the perceptual-loss feature maps;
the 3D head on top of the per-frame maps supplies FVD features and class
predictions for the generated-clip accuracy check.
"""
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

EXTRACTOR_FORMAT = "larnet-extractor"
EXTRACTOR_VERSION = 1


@dataclass
class ClassifierConfig:
    num_classes: int = 8
    resolution: int = 56
    clip_len: int = 16
    width: int = 32


class FrameTrunk(nn.Module):
    """2D conv trunk applied to single frames [N, 3, H, W]; returns its layer outputs."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.layers = nn.ModuleList([
            nn.Sequential(nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, 1, 1), nn.LeakyReLU(0.2)),
        ])
        self.out_channels = 2 * width

    def forward(self, x) -> List[torch.Tensor]:
        maps = []
        for layer in self.layers:
            x = layer(x)
            maps.append(x)
        return maps


class ActionClassifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.trunk = FrameTrunk(w)
        self.temporal = nn.Sequential(
            nn.Conv3d(2 * w, 4 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv3d(4 * w, 4 * w, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(4 * w, cfg.num_classes)

    def frame_maps(self, frames):
        return self.trunk(frames)[-1]

    def frame_features(self, frames):
        return self.frame_maps(frames).mean(dim=(2, 3))

    def clip_features(self, video):
        # video [B, C, T, H, W]
        b, c, t, h, w = video.shape
        maps = self.frame_maps(video.transpose(1, 2).reshape(b * t, c, h, w))
        maps = maps.view(b, t, *maps.shape[1:]).transpose(1, 2)
        return self.temporal(maps).mean(dim=(2, 3, 4))

    def forward(self, video):
        return self.head(self.clip_features(video))


def clips_to_tensor(clips) -> torch.Tensor:
    """[N, T, H, W, C] numpy -> [N, C, T, H, W] float tensor."""
    return torch.as_tensor(np.asarray(clips, dtype=np.float32)).permute(0, 4, 1, 2, 3).contiguous()


def frames_to_tensor(frames) -> torch.Tensor:
    """[N, H, W, C] numpy -> [N, C, H, W] float tensor."""
    return torch.as_tensor(np.asarray(frames, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


class FeatureExtractorHandle:
    """Frozen frame-level / clip-level feature functions over numpy inputs."""

    def __init__(self, model: ActionClassifier, batch_size: int = 32):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.batch_size = batch_size

    @property
    def frame_dim(self) -> int:
        return self.model.trunk.out_channels

    @property
    def clip_dim(self) -> int:
        return self.model.head.in_features

    def _check(self, x, ndim):
        x = np.asarray(x, dtype=np.float32)
        res = self.model.cfg.resolution
        if x.ndim != ndim or x.shape[-3:-1] != (res, res):
            raise ValueError(f"extractor expects {res}x{res} inputs, got shape {x.shape}")
        return x

    @torch.no_grad()
    def frame_features(self, frames) -> np.ndarray:
        frames = self._check(frames, 4)
        out = [self.model.frame_features(frames_to_tensor(frames[i:i + self.batch_size * 8]))
               for i in range(0, len(frames), self.batch_size * 8)]
        return torch.cat(out).double().numpy()

    @torch.no_grad()
    def clip_features(self, clips) -> np.ndarray:
        clips = self._check(clips, 5)
        out = [self.model.clip_features(clips_to_tensor(clips[i:i + self.batch_size]))
               for i in range(0, len(clips), self.batch_size)]
        return torch.cat(out).double().numpy()

    @torch.no_grad()
    def predict(self, clips) -> np.ndarray:
        clips = self._check(clips, 5)
        out = [self.model(clips_to_tensor(clips[i:i + self.batch_size])).argmax(dim=1)
               for i in range(0, len(clips), self.batch_size)]
        return torch.cat(out).numpy()

    def perceptual_net(self) -> nn.Module:
        return self.model.trunk


def random_perceptual_net(seed: int, width: int = 32) -> nn.Module:
    """Frozen randomly initialized frame trunk, used when no trained extractor is configured."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    net = FrameTrunk(width)
    torch.random.set_rng_state(gen_state)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def train_classifier(manifest, cfg: Optional[ClassifierConfig] = None, steps: int = 1500, batch_size: int = 16,
                     lr: float = 1e-3, seed: int = 0, split: Optional[str] = None, log_every: int = 100):
    """Fit the classifier on random clips of ``manifest``; returns (model, final train accuracy)."""
    from .dataio import ClipLoader

    cfg = cfg or ClassifierConfig(num_classes=manifest.num_classes)
    loader = ClipLoader(manifest, cfg.clip_len, cfg.resolution)
    indices = manifest.indices(split)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model = ActionClassifier(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    correct = seen = 0
    for step in range(1, steps + 1):
        picks = rng.choice(indices, size=batch_size)
        clips = [loader.sample(int(i), rng) for i in picks]
        x = clips_to_tensor([c.frames for c in clips])
        y = torch.tensor([c.class_id for c in clips])
        logits = model(x)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        correct += int((logits.argmax(1) == y).sum())
        seen += len(y)
        if step % log_every == 0:
            log.info("classifier step %d loss %.4f acc %.3f", step, loss.item(), correct / seen)
            correct = seen = 0
    return model.eval(), evaluate_classifier(model, manifest, split, seed=seed + 1)


@torch.no_grad()
def evaluate_classifier(model: ActionClassifier, manifest, split: Optional[str] = None, seed: int = 0,
                        clips_per_video: int = 1) -> float:
    from .dataio import ClipLoader

    loader = ClipLoader(manifest, model.cfg.clip_len, model.cfg.resolution)
    rng = np.random.default_rng(seed)
    handle = FeatureExtractorHandle(model)
    clips, labels = [], []
    for i in manifest.indices(split):
        for _ in range(clips_per_video):
            c = loader.sample(i, rng)
            clips.append(c.frames)
            labels.append(c.class_id)
    pred = handle.predict(np.stack(clips))
    return float(np.mean(pred == np.asarray(labels)))


def save_extractor(model: ActionClassifier, path: str):
    torch.save({"format": EXTRACTOR_FORMAT, "version": EXTRACTOR_VERSION,
                "config": asdict(model.cfg), "state_dict": model.state_dict()}, path)


def load_extractor(path: str) -> FeatureExtractorHandle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != EXTRACTOR_FORMAT:
        raise ValueError(f"{path} is not a feature-extractor checkpoint")
    if payload.get("version") != EXTRACTOR_VERSION:
        raise ValueError(f"{path}: extractor version {payload.get('version')} != {EXTRACTOR_VERSION}")
    model = ActionClassifier(ClassifierConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return FeatureExtractorHandle(model)
