"""Generator, critics and the gated recurrent motion integrator.

Tensors are channels-first throughout: frames ``[B, C, H, W]``, videos and
motion features ``[B, C, T, H, W]``. Feature pyramids are lists ordered
coarse -> fine at spatial sizes ``res/8, res/4, res/2`` with channels
``base, base/2, base/4``.
"""
import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_SCALES = 3
CHECKPOINT_FORMAT = "larnet-model"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    resolution: int = 56
    clip_len: int = 16
    base_channels: int = 256
    # 0: non-recurrent concat fusion at the coarsest scale; 1..3: integrator levels
    hierarchy_levels: int = 3
    use_motion_generator: bool = True
    embed_dim: int = 8
    z_dim: int = 64
    critic_channels: int = 32
    image_channels: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        if self.resolution % 8 or self.resolution < 16:
            raise ConfigError(f"resolution must be a multiple of 8 and >= 16, got {self.resolution}")
        if self.base_channels % 8 or self.base_channels < 8:
            raise ConfigError("base_channels must be a positive multiple of 8")
        if not 0 <= self.hierarchy_levels <= NUM_SCALES:
            raise ConfigError(f"hierarchy_levels must be in [0, {NUM_SCALES}]")
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")

    @property
    def sizes(self) -> List[int]:
        return [self.resolution // 8, self.resolution // 4, self.resolution // 2]

    @property
    def channels(self) -> List[int]:
        return [self.base_channels, self.base_channels // 2, self.base_channels // 4]

    @property
    def motion_levels(self) -> int:
        """Number of pyramid levels the motion generator/extractor produce."""
        return max(self.hierarchy_levels, 1)

    @property
    def cond_dim(self) -> int:
        return self.embed_dim + 1 + self.z_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _act():
    return nn.LeakyReLU(0.2)


def tile_time(x: torch.Tensor, steps: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, C, T, H, W] by repetition."""
    return x.unsqueeze(2).expand(-1, -1, steps, -1, -1)


# --------------------------------------------------------------------------
# Appearance encoder E_a
# --------------------------------------------------------------------------

class AppearanceEncoder(nn.Module):
    """2D conv encoder returning the appearance pyramid (coarse -> fine)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2 = cfg.channels
        self.resolution = cfg.resolution
        self.stem = nn.Sequential(nn.Conv2d(cfg.image_channels, c2 // 2, 3, padding=1), _act())
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(c2 // 2, c2, 4, 2, 1), _act(), nn.Conv2d(c2, c2, 3, padding=1), _act()),
            nn.Sequential(nn.Conv2d(c2, c1, 4, 2, 1), _act(), nn.Conv2d(c1, c1, 3, padding=1), _act()),
            nn.Sequential(nn.Conv2d(c1, c0, 4, 2, 1), _act(), nn.Conv2d(c0, c0, 3, padding=1), _act()),
        ])
        self.heads = nn.ModuleList([nn.Conv2d(c, c, 1) for c in (c2, c1, c0)])

    def forward(self, x0: torch.Tensor) -> List[torch.Tensor]:
        if x0.dim() != 4 or x0.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"expected [B, C, {self.resolution}, {self.resolution}] frames, got {tuple(x0.shape)}")
        h = self.stem(x0)
        maps = []
        for down, head in zip(self.down, self.heads):
            h = down(h)
            maps.append(torch.tanh(head(h)))
        return maps[::-1]


# --------------------------------------------------------------------------
# Motion generator G_m and extractor E_v
# --------------------------------------------------------------------------

class MotionBlock(nn.Module):
    """One pyramid level of the motion decoder: optional 2x spatial upsample + output head."""

    def __init__(self, c_in: int, c_out: int, upsample: bool):
        super().__init__()
        if upsample:
            body = nn.ConvTranspose3d(c_in, c_out, (3, 4, 4), (1, 2, 2), (1, 1, 1))
        else:
            body = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.body = nn.Sequential(body, _act())
        self.head = nn.Conv3d(c_out, c_out, 3, padding=1)

    def forward(self, h):
        h = self.body(h)
        return h, torch.tanh(self.head(h))


class MotionGenerator(nn.Module):
    """G_m: (a_e, p_e, z) -> motion pyramid, each level [B, C, T, H, W].

    The concatenated condition is projected to a coarse seed of shape
    [C0, T/4, H0/2, W0/2] and decoded with 3D convolutions.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        h0 = cfg.sizes[0]
        self.seed_shape = (c[0], max(1, math.ceil(cfg.clip_len / 4)), math.ceil(h0 / 2), math.ceil(h0 / 2))
        self.project = nn.Linear(cfg.cond_dim, int(torch.tensor(self.seed_shape).prod()))
        self.stem = nn.ModuleList([
            nn.Sequential(nn.Conv3d(c[0], c[0], 3, padding=1), _act()),
            nn.Sequential(nn.Conv3d(c[0], c[0], 3, padding=1), _act()),
        ])
        self.blocks = nn.ModuleList(
            [MotionBlock(c[0], c[0], upsample=False)]
            + [MotionBlock(c[i - 1], c[i], upsample=True) for i in range(1, cfg.motion_levels)]
        )

    def forward(self, a_e: torch.Tensor, p_e: torch.Tensor, z: torch.Tensor) -> List[torch.Tensor]:
        cfg = self.cfg
        if a_e.shape[-1] != cfg.embed_dim or z.shape[-1] != cfg.z_dim:
            raise ValueError(f"expected a_e dim {cfg.embed_dim} and z dim {cfg.z_dim}, "
                             f"got {a_e.shape[-1]} and {z.shape[-1]}")
        cond = torch.cat([a_e, p_e.reshape(-1, 1).to(a_e), z], dim=1)
        h = self.project(cond).view(-1, *self.seed_shape)
        h0, t = cfg.sizes[0], cfg.clip_len
        h = F.interpolate(h, size=(max(1, t // 2), h0, h0), mode="trilinear", align_corners=False)
        h = self.stem[0](h)
        h = F.interpolate(h, size=(t, h0, h0), mode="trilinear", align_corners=False)
        h = self.stem[1](h)
        out = []
        for block in self.blocks:
            h, e_m = block(h)
            out.append(e_m)
        return out


class MotionExtractor(nn.Module):
    """E_v: 3D conv net mapping a real clip to a motion pyramid shaped like G_m's output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.channels
        self.stem = nn.Sequential(nn.Conv3d(cfg.image_channels, c2 // 2, 3, padding=1), _act())
        down = lambda a, b: nn.Sequential(nn.Conv3d(a, b, (3, 4, 4), (1, 2, 2), (1, 1, 1)), _act())
        self.down = nn.ModuleList([down(c2 // 2, c2), down(c2, c1), down(c1, c0)])
        self.heads = nn.ModuleList([nn.Conv3d(c, c, 3, padding=1) for c in (c2, c1, c0)])

    def forward(self, video: torch.Tensor) -> List[torch.Tensor]:
        cfg = self.cfg
        expected = (cfg.image_channels, cfg.clip_len, cfg.resolution, cfg.resolution)
        if video.dim() != 5 or tuple(video.shape[1:]) != expected:
            raise ValueError(f"expected clips of shape [B, {', '.join(map(str, expected))}], got {tuple(video.shape)}")
        h = self.stem(video)
        feats = []
        for down, head in zip(self.down, self.heads):
            h = down(h)
            feats.append(torch.tanh(head(h)))
        return feats[::-1][:cfg.motion_levels]


# --------------------------------------------------------------------------
# Motion integrator M_I
# --------------------------------------------------------------------------

class IntegratorCell(nn.Module):
    """Learnable kernels W_b, W_f (gates) and W_a (content) of one integrator level."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.channels = channels
        self.w_b = nn.Conv2d(2 * channels, channels, kernel_size, padding=pad)
        self.w_f = nn.Conv2d(2 * channels, channels, kernel_size, padding=pad)
        self.w_a = nn.Conv2d(2 * channels, channels, kernel_size, padding=pad)

    def forward(self, e_a_prev, e_m_t):
        return integrate_step(e_a_prev, e_m_t, self)


def integrate_step(e_a_prev: torch.Tensor, e_m_t: torch.Tensor, cell: IntegratorCell) -> torch.Tensor:
    """One gated update.

    b = sigmoid(W_b * <e_a, e_m>), f = sigmoid(W_f * <e_a, e_m>)
    e_v = b . e_a + (1 - b) . tanh(W_a * <e_m, f . e_a>)

    ``<.,.>`` is channel concatenation. The result is also the next hidden state.
    """
    if e_a_prev.shape != e_m_t.shape or e_a_prev.shape[1] != cell.channels:
        raise ValueError(f"integrator expects matching [B, {cell.channels}, H, W] inputs, "
                         f"got {tuple(e_a_prev.shape)} and {tuple(e_m_t.shape)}")
    joint = torch.cat([e_a_prev, e_m_t], dim=1)
    b = torch.sigmoid(cell.w_b(joint))
    f = torch.sigmoid(cell.w_f(joint))
    content = torch.tanh(cell.w_a(torch.cat([e_m_t, f * e_a_prev], dim=1)))
    return b * e_a_prev + (1 - b) * content


class IntegratorLevel(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3, with_carry: bool = False):
        super().__init__()
        self.cell = IntegratorCell(channels, kernel_size)
        # fuses the decoded features of the coarser level into the motion input
        self.fuse = nn.Conv2d(2 * channels, channels, 1) if with_carry else None

    def forward(self, e_a, e_m, carry=None):
        return integrate_sequence(e_a, e_m, self.cell, carry, self.fuse)


def integrate_sequence(e_a: torch.Tensor, e_m: torch.Tensor, cell: IntegratorCell,
                       carry: Optional[torch.Tensor] = None, fuse: Optional[nn.Module] = None) -> torch.Tensor:
    """Unroll ``integrate_step`` over time with the hidden state seeded by ``e_a``.

    Args:
        e_a: appearance map [B, C, H, W].
        e_m: motion sequence [B, C, T, H, W].
        carry: optional decoded features from the coarser level, [B, C, T, H, W];
            fused with e_m at every step by the 1x1 ``fuse`` conv.
    Returns:
        [B, C, T, H, W] integrated features e_v.
    """
    steps = e_m.shape[2]
    if steps == 0:
        raise ValueError("cannot integrate an empty motion sequence")
    if carry is not None and fuse is None:
        raise ValueError("carry given without a fusion conv")
    h = e_a
    outs = []
    for t in range(steps):
        m = e_m[:, :, t]
        if carry is not None:
            m = fuse(torch.cat([m, carry[:, :, t]], dim=1))
        h = integrate_step(h, m, cell)
        outs.append(h)
    return torch.stack(outs, dim=2)


class ConcatFusion(nn.Module):
    """Non-recurrent fusion of appearance and motion (LARNet-Base / BaseNet-2)."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(nn.Conv3d(2 * channels, channels, 3, padding=1), _act(),
                                 nn.Conv3d(channels, channels, 3, padding=1), nn.Tanh())

    def forward(self, e_a, e_m):
        return self.net(torch.cat([tile_time(e_a, e_m.shape[2]), e_m], dim=1))


class JointHead(nn.Module):
    """BaseNet-1: appearance and label decoded jointly, no motion pathway."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0 = cfg.channels[0]
        self.clip_len = cfg.clip_len
        self.project = nn.Linear(cfg.cond_dim, c0 * cfg.clip_len)
        self.net = nn.Sequential(nn.Conv3d(2 * c0, c0, 3, padding=1), _act(),
                                 nn.Conv3d(c0, c0, 3, padding=1), nn.Tanh())

    def forward(self, e_a, cond):
        b, c, h, w = e_a.shape
        code = self.project(cond).view(b, c, self.clip_len, 1, 1).expand(-1, -1, -1, h, w)
        return self.net(torch.cat([tile_time(e_a, self.clip_len), code], dim=1))


# --------------------------------------------------------------------------
# Video decoder G_v
# --------------------------------------------------------------------------

class DecoderBlock(nn.Module):
    """Doubles spatial size with a transposed 3D conv, then refines."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose3d(c_in, c_out, (3, 4, 4), (1, 2, 2), (1, 1, 1)), _act(),
            nn.Conv3d(c_out, c_out, 3, padding=1), _act(),
        )

    def forward(self, x):
        return self.net(x)


class Generator(nn.Module):
    """E_a, G_m, E_v, the integrator levels and the per-level decoders.

    The video is v = G_v(M_I(E_a(x0), e_m)) assembled coarse -> fine; the
    motion source is either G_m(a_e, p_e, z) or E_v(driving clip).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.appearance = AppearanceEncoder(cfg)
        if cfg.use_motion_generator:
            self.motion_generator = MotionGenerator(cfg)
            self.motion_extractor = MotionExtractor(cfg)
            self.joint_head = None
            if cfg.hierarchy_levels == 0:
                self.fusion = ConcatFusion(c[0])
                self.integrators = None
            else:
                self.fusion = None
                self.integrators = nn.ModuleList([
                    IntegratorLevel(c[i], cfg.kernel_size, with_carry=i > 0) for i in range(cfg.hierarchy_levels)
                ])
        else:
            self.motion_generator = self.motion_extractor = None
            self.fusion = self.integrators = None
            self.joint_head = JointHead(cfg)
        self.decoders = nn.ModuleList([DecoderBlock(c[0], c[1]), DecoderBlock(c[1], c[2]),
                                       DecoderBlock(c[2], c[2] // 2)])
        self.to_rgb = nn.Conv3d(c[2] // 2, cfg.image_channels, 3, padding=1)

    def generate_motion(self, a_e, p_e, z):
        if self.motion_generator is None:
            raise ConfigError("this model has no motion generator")
        return self.motion_generator(a_e, p_e, z)

    def extract_motion(self, video):
        if self.motion_extractor is None:
            raise ConfigError("this model has no motion extractor")
        return self.motion_extractor(video)

    def synthesize(self, e_a: List[torch.Tensor], e_m: Optional[List[torch.Tensor]] = None,
                   cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Decode the appearance pyramid under motion ``e_m`` into frames in [-1, 1]."""
        levels = self.cfg.hierarchy_levels
        if self.joint_head is not None:
            if cond is None:
                raise ValueError("joint head needs the condition vector")
            h = self.joint_head(e_a[0], cond)
        elif self.fusion is not None:
            h = self.fusion(e_a[0], e_m[0])
        else:
            h = self.integrators[0](e_a[0], e_m[0])
        for i, decoder in enumerate(self.decoders):
            h = decoder(h)
            nxt = i + 1
            if self.integrators is not None and nxt < levels:
                h = self.integrators[nxt](e_a[nxt], e_m[nxt], carry=h)
        return torch.tanh(self.to_rgb(h))

    def forward(self, x0, a_e, p_e, z, drive=None):
        """Returns (video, motion pyramid used)."""
        e_a = self.appearance(x0)
        cond = torch.cat([a_e, p_e.reshape(-1, 1).to(a_e), z], dim=1)
        if self.joint_head is not None:
            return self.synthesize(e_a, None, cond), None
        e_m = self.extract_motion(drive) if drive is not None else self.generate_motion(a_e, p_e, z)
        return self.synthesize(e_a, e_m, cond), e_m


# --------------------------------------------------------------------------
# Critics
# --------------------------------------------------------------------------

class VideoCritic(nn.Module):
    """D_v: 3D conv Wasserstein critic over [B, C, T, H, W] clips (no sigmoid, no batch norm)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.critic_channels
        self.net = nn.Sequential(
            nn.Conv3d(cfg.image_channels, w, (3, 4, 4), (1, 2, 2), (1, 1, 1)), _act(),
            nn.Conv3d(w, 2 * w, 4, 2, 1), _act(),
            nn.Conv3d(2 * w, 4 * w, 4, 2, 1), _act(),
            nn.Conv3d(4 * w, 8 * w, (3, 4, 4), (1, 2, 2), (1, 1, 1)), _act(),
        )
        self.out = nn.Linear(8 * w, 1)

    def forward(self, video):
        if video.dim() != 5:
            raise ValueError(f"expected [B, C, T, H, W], got {tuple(video.shape)}")
        return self.out(self.net(video).mean(dim=(2, 3, 4))).squeeze(1)


class MotionCritic(nn.Module):
    """D_m: 3D conv critic over the coarsest motion level [B, C0, T, H0, W0]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.critic_channels
        c0 = cfg.channels[0]
        self.in_channels = c0
        self.net = nn.Sequential(
            nn.Conv3d(c0, 2 * w, 3, padding=1), _act(),
            nn.Conv3d(2 * w, 4 * w, (4, 3, 3), (2, 1, 1), (1, 1, 1)), _act(),
            nn.Conv3d(4 * w, 4 * w, 4, 2, 1), _act(),
        )
        self.out = nn.Linear(4 * w, 1)

    def forward(self, e_m):
        if e_m.dim() != 5 or e_m.shape[1] != self.in_channels:
            raise ValueError(f"expected [B, {self.in_channels}, T, H, W], got {tuple(e_m.shape)}")
        return self.out(self.net(e_m).mean(dim=(2, 3, 4))).squeeze(1)


# --------------------------------------------------------------------------
# Bundle + checkpoint container
# --------------------------------------------------------------------------

class ModelBundle(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = Generator(cfg)
        self.video_critic = VideoCritic(cfg)
        self.motion_critic = MotionCritic(cfg) if cfg.use_motion_generator else None

    def generator_parameters(self):
        return list(self.generator.parameters())

    def critic_parameters(self):
        params = list(self.video_critic.parameters())
        if self.motion_critic is not None:
            params += list(self.motion_critic.parameters())
        return params


def count_parameters(module: Optional[nn.Module]) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


def save_model(bundle: ModelBundle, path: str, extra: Optional[dict] = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": bundle.cfg.to_dict(),
        "state_dict": bundle.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def read_checkpoint(path: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of types on corrupt files
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    return payload


def load_model(path: str, expect: Optional[ModelConfig] = None) -> ModelBundle:
    """Load a bundle; if ``expect`` is given the stored config must match it."""
    payload = read_checkpoint(path)
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expect is not None and cfg != expect:
        diff = {k: (v, getattr(expect, k)) for k, v in cfg.to_dict().items() if getattr(expect, k) != v}
        raise ConfigError(f"checkpoint config differs from the expected one: {diff}")
    bundle = ModelBundle(cfg)
    bundle.load_state_dict(payload["state_dict"])
    return bundle
