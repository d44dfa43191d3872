"""Noise schedule, forward noising and the reverse sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import rng
from .backbone import NumericError

T_TRAIN = 200
T_INFER = 50


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor

    @classmethod
    def linear(cls, T: int = T_TRAIN, beta_start: float = 1e-4, beta_end: float = 2e-2):
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        return cls(betas, torch.cumprod(1.0 - betas, dim=0))

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> torch.Tensor:
        """``alphas_cumprod[t]`` as float32; ``t = -1`` means the clean image (1.0)."""
        t = torch.as_tensor(t)
        ab = torch.where(t >= 0, self.alphas_cumprod[t.clamp(min=0)], torch.ones((), dtype=torch.float64))
        return ab.float()

    def check(self, t):
        t = torch.as_tensor(t)
        if (t < 0).any() or (t >= self.T).any():
            raise ValueError(f"timestep out of range [0, {self.T})")

    def inference_timesteps(self, steps: int) -> list[int]:
        """Strided descending timesteps, ending near 0 and starting at ``T - 1``."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}]")
        ts = [round((i + 1) * self.T / steps) - 1 for i in range(steps)]
        return ts[::-1]


DEFAULT_SCHEDULE = NoiseSchedule.linear()


def _bcast(x, like):
    return x.reshape(-1, *([1] * (like.ndim - 1))) if x.ndim else x


def add_noise(z0, eps, t, sched: NoiseSchedule = DEFAULT_SCHEDULE):
    sched.check(t)
    ab = _bcast(sched.alpha_bar(t), z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def predict_x0(z_t, eps_hat, ab, clip: bool = True, clip_range: float = 1.0):
    x0 = (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    return x0.clamp(-clip_range, clip_range) if clip else x0


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule = DEFAULT_SCHEDULE,
              clip: bool = True, clip_range: float = 1.0):
    """Deterministic (eta = 0) update from ``t`` to ``t_prev`` (``-1`` = clean)."""
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0 = predict_x0(z_t, eps_hat, ab, clip, clip_range)
    if clip:
        eps_hat = (z_t - ab.sqrt() * x0) / (1.0 - ab).sqrt()
    return ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps_hat


def ddpm_step(z_t, eps_hat, t: int, t_prev: int, noise, sched: NoiseSchedule = DEFAULT_SCHEDULE,
              clip: bool = True, clip_range: float = 1.0):
    """Ancestral update: posterior mean plus ``sigma * noise`` (no noise into the clean image)."""
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    alpha = ab / ab_prev
    beta = 1.0 - alpha
    x0 = predict_x0(z_t, eps_hat, ab, clip, clip_range)
    mean = (ab_prev.sqrt() * beta / (1.0 - ab)) * x0 + (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)) * z_t
    if t_prev < 0:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + var.sqrt() * noise


def initial_noise(seed: int, shape) -> torch.Tensor:
    return rng.normal(rng.stream(seed, "z_T"), shape)


@torch.no_grad()
def sample(denoiser, cond, T: int = T_INFER, seed: int = 0, shape=(3, 32, 32),
           sched: NoiseSchedule = DEFAULT_SCHEDULE, method: str = "ddim", clip: bool = True,
           z_T: torch.Tensor | None = None, clip_range: float = 1.0):
    """Run the reverse process from seeded noise and return ``z_0``.

    ``denoiser(z_t, t, cond)`` predicts the noise. ``seed`` may be a list of seeds,
    in which case the samples are denoised together and a batch is returned.
    """
    batched = isinstance(seed, (list, tuple, range, np.ndarray))
    seeds = list(seed) if batched else [seed]
    if z_T is None:
        z = torch.stack([initial_noise(s, shape) for s in seeds])
    else:
        z = z_T if z_T.ndim == len(shape) + 1 else z_T[None]
    steps = sched.inference_timesteps(T)
    noise_gens = [rng.stream(s, "ddpm-noise") for s in seeds]
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        eps_hat = denoiser(z, torch.full((z.shape[0],), t), cond)
        if method == "ddim":
            z = ddim_step(z, eps_hat, t, t_prev, sched, clip, clip_range)
        elif method == "ddpm":
            noise = torch.stack([rng.normal(g, shape) for g in noise_gens])
            z = ddpm_step(z, eps_hat, t, t_prev, noise, sched, clip, clip_range)
        else:
            raise ValueError(f"unknown sampler {method!r}")
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite latent at reverse step {i} (t={t})")
    return z if batched else z[0]
