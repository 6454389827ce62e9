"""Training objectives: motion/video MSE, WGAN-GP, mix-adversarial, perceptual."""
from dataclasses import dataclass, fields
from typing import Callable, Dict, Optional, Tuple

import torch
import torch.nn as nn

COMPONENTS = ("L_m_mse", "L_m_adv", "L_mse", "L_v_madv", "L_p")


@dataclass
class LossWeights:
    motion_mse: float = 1.0      # lambda_1
    motion_adv: float = 0.1      # lambda_2
    video_mse: float = 10.0      # lambda_3
    video_adv: float = 0.1       # lambda_4
    perceptual: float = 1.0      # lambda_5
    gp_coefficient: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def as_tuple(self):
        return (self.motion_mse, self.motion_adv, self.video_mse, self.video_adv, self.perceptual)


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def pyramid_mse(generated, target) -> torch.Tensor:
    """Sum of per-level MSEs; the target side is treated as a constant."""
    if len(generated) != len(target):
        raise ValueError(f"pyramids have {len(generated)} and {len(target)} levels")
    return sum(mse_loss(g, t.detach()) for g, t in zip(generated, target))


def _uniform(n: int, like: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
    eps = torch.rand(n, generator=generator, dtype=like.dtype, device=like.device)
    return eps.view(n, *([1] * (like.dim() - 1)))


def gradient_penalty(critic: Callable, real: torch.Tensor, fake: torch.Tensor,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean over the batch of (||grad critic(x_hat)||_2 - 1)^2.

    x_hat = eps * real + (1 - eps) * fake with one eps ~ U(0, 1) per sample.
    """
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps = _uniform(real.shape[0], real, generator)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grad = None
    if scores.requires_grad:
        grad, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        # critic output does not depend on its input: gradient is identically zero
        grad = torch.zeros_like(x_hat)
    return (grad.flatten(1).norm(2, dim=1) - 1).pow(2).mean()


def wgan_critic_loss(critic, real, fake, gp_coefficient: float = 10.0,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """E[D(fake)] - E[D(real)] + lambda * GP."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    loss = critic(fake.detach()).mean() - critic(real.detach()).mean()
    if gp_coefficient:
        loss = loss + gp_coefficient * gradient_penalty(critic, real, fake, generator)
    return loss


def wgan_generator_loss(critic, fake) -> torch.Tensor:
    return -critic(fake).mean()


def remix_videos(v_gen: torch.Tensor, v_real: torch.Tensor, mix_prob: float,
                 generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Frame-wise stochastic remix of generated and real clips.

    Returns (v_m, mask) with mask [B, T]; True takes the real frame. Real frames
    are detached, so gradients only reach the generated frames.
    """
    if v_gen.shape != v_real.shape:
        raise ValueError(f"shape mismatch: {tuple(v_gen.shape)} vs {tuple(v_real.shape)}")
    if not 0.0 <= mix_prob <= 1.0:
        raise ValueError(f"mix_prob must be in [0, 1], got {mix_prob}")
    b, t = v_gen.shape[0], v_gen.shape[2]
    if mix_prob in (0.0, 1.0):
        # degenerate Bernoulli: no draw, so the rng stream is left untouched
        mask = torch.full((b, t), mix_prob == 1.0, dtype=torch.bool, device=v_gen.device)
    else:
        mask = torch.rand(b, t, generator=generator, device=v_gen.device) < mix_prob
    return apply_mix_mask(v_gen, v_real, mask), mask


def apply_mix_mask(v_gen, v_real, mask):
    m = mask.view(mask.shape[0], 1, mask.shape[1], 1, 1)
    return torch.where(m, v_real.detach(), v_gen)


def mix_adversarial_losses(critic, v_gen, v_real, mix_prob: float, gp_coefficient: float = 10.0,
                           generator: Optional[torch.Generator] = None):
    """WGAN-GP losses with Mix(v_gen, v_real) standing in for the fake sample.

    The mask is drawn before the interpolation coefficients from the same
    generator. At ``mix_prob`` 0 or 1 no mask draw happens, so the result is
    bit-identical to ``wgan_critic_loss``/``wgan_generator_loss`` on
    (v_real, v_gen) or (v_real, v_real) with an identically seeded generator.

    Returns (critic loss, generator loss).
    """
    v_mix, _ = remix_videos(v_gen, v_real, mix_prob, generator)
    return (wgan_critic_loss(critic, v_real, v_mix, gp_coefficient, generator),
            wgan_generator_loss(critic, v_mix))


def perceptual_loss(v: torch.Tensor, v_hat: torch.Tensor, feature_net: Optional[nn.Module]) -> torch.Tensor:
    """Mean squared distance of frame features, frames folded into the batch."""
    if feature_net is None:
        raise ValueError("perceptual loss needs a feature network")
    if v.shape != v_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(v.shape)} vs {tuple(v_hat.shape)}")
    frames = lambda x: x.transpose(1, 2).reshape(-1, *x.shape[1:2], *x.shape[3:])
    fa, fb = feature_net(frames(v)), feature_net(frames(v_hat))
    if isinstance(fa, torch.Tensor):
        fa, fb = [fa], [fb]
    return sum(mse_loss(a, b) for a, b in zip(fa, fb)) / len(fa)


def total_loss(components: Dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """lambda_1 L_m_mse + lambda_2 L_m_adv + lambda_3 L_mse + lambda_4 L_v_madv + lambda_5 L_p."""
    missing = [k for k in COMPONENTS if k not in components]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    for name, w in zip(COMPONENTS, weights.as_tuple()):
        if w < 0:
            raise ValueError(f"negative weight for {name}")
    return sum(w * components[k] for k, w in zip(COMPONENTS, weights.as_tuple()))
