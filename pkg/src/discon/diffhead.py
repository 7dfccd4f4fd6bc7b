"""Per-token denoising diffusion head: a residual MLP predicting the injected
noise from (noisy token, timestep embedding, conditioning latent), trained by
noise-prediction regression and sampled by the ancestral reverse process with
a temperature on all injected noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import numerics as nm
from .numerics import Tensor
from .rng import Rng


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients; alpha_bar is the cumulative product of (1 - beta)."""

    betas: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T,)

    @property
    def steps(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        t = self.steps
        if t < 1:
            raise ValueError("schedule needs at least one step")
        if (self.betas <= 0.0).any():
            raise ValueError("betas must be positive")
        recomputed = np.cumprod(1.0 - self.betas)
        if np.abs(recomputed - self.alpha_bar).max() > 1e-12:
            raise ValueError("alpha_bar inconsistent with cumprod(1 - beta)")
        if not (np.diff(self.alpha_bar) < 0.0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[0] <= 0.99:
            raise ValueError(f"alpha_bar_1 = {self.alpha_bar[0]:.6f} must exceed 0.99")
        if self.alpha_bar[-1] >= 0.05:
            raise ValueError(f"alpha_bar_T = {self.alpha_bar[-1]:.6f} must be below 0.05")

    @classmethod
    def cosine(cls, steps: int = 100, offset: float = 0.008) -> "NoiseSchedule":
        t = np.arange(steps + 1) / steps
        f = np.cos((t + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        ratio = f[1:] / f[:-1]
        betas = np.clip(1.0 - ratio, 1e-8, 0.999)
        return cls(betas=betas, alpha_bar=np.cumprod(1.0 - betas))


@dataclass(frozen=True)
class HeadConfig:
    token_dim: int
    z_dim: int
    width: int = 128
    blocks: int = 3
    time_dim: int = 64

    def __post_init__(self):
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (N,) -> (N, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class _ResBlock(nn.Module):
    def __init__(self, width: int, rng: Rng):
        self.ln = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width, rng.child("fc1"))
        self.fc2 = nn.Linear(width, width, rng.child("fc2"), std=0.02)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.add(x, self.fc2(nm.gelu(self.fc1(self.ln(x)))))


class DiffusionHead(nn.Module):
    """Noise predictor conditioned by concatenating (x_t, t embedding, z)."""

    def __init__(self, config: HeadConfig, rng: Rng):
        c = config
        self.config = config
        self.in_proj = nn.Linear(c.token_dim + c.time_dim + c.z_dim, c.width, rng.child("in"))
        self.blocks = [_ResBlock(c.width, rng.child("block", i)) for i in range(c.blocks)]
        self.ln_f = nn.LayerNorm(c.width)
        self.out = nn.Linear(c.width, c.token_dim, rng.child("out"), std=0.02)

    def noise_pred(self, x_t: np.ndarray | Tensor, t: np.ndarray, z: np.ndarray | Tensor) -> Tensor:
        """Predicted noise for each row: x_t (N, d), t (N,) in [1, T], z (N, z_dim)."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        z = z if isinstance(z, Tensor) else Tensor(z)
        temb = Tensor(timestep_embedding(t, self.config.time_dim))
        h = self.in_proj(nm.concat([x_t, temb, z], axis=1))
        for block in self.blocks:
            h = block(h)
        return self.out(self.ln_f(h))


def q_sample(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. t is 1-based."""
    t = np.asarray(t)
    if t.min() < 1 or t.max() > schedule.steps:
        raise ValueError(f"t out of range [1, {schedule.steps}]")
    abar = schedule.alpha_bar[t - 1]
    if np.ndim(x0) > 1:
        abar = abar.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def diffusion_loss(
    head: DiffusionHead,
    z: Tensor | np.ndarray,
    x0: np.ndarray,
    schedule: NoiseSchedule,
    rng: Rng,
) -> Tensor:
    """Mean over rows of the squared noise-prediction error |eps - eps_hat|^2."""
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    t = rng.integers(1, schedule.steps + 1, (n,))
    eps = rng.normal((n, d))
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = head.noise_pred(x_t, t, z)
    return nm.scale(nm.mse(eps_hat, Tensor(eps)), float(d))


def sample_tokens(
    head: DiffusionHead,
    z: np.ndarray,
    schedule: NoiseSchedule,
    temperature: float,
    seed: int,
    stream_ids: np.ndarray | None = None,
    x0_clip: float = 8.0,
) -> np.ndarray:
    """Ancestral reverse diffusion for a batch of conditioning latents.

    The posterior mean is evaluated in its predicted-x0 form with x0 clamped
    to [-x0_clip, x0_clip]; inside the clamp this equals the usual eps-form
    update, and the clamp stops off-manifold prediction errors from being
    amplified through the 1/sqrt(alpha_bar) recursion.

    Row i draws all its noise from its own stream (seed, stream_ids[i]), so
    results are independent of how rows are batched together. Temperature
    scales every injected noise, initial and per-step.
    """
    if not 0.0 < temperature <= 1.0:
        raise ValueError(f"temperature must be in (0, 1], got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    d = head.config.token_dim
    T = schedule.steps
    if stream_ids is None:
        stream_ids = np.arange(n)

    noise = np.empty((n, T, d))  # [:, 0] seeds x_T; [:, T-t+1] is injected after step t
    for i in range(n):
        noise[i] = Rng(seed, "diffusion", int(stream_ids[i])).normal((T, d))

    abar = schedule.alpha_bar
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    posterior_var = schedule.betas * (1.0 - abar_prev) / (1.0 - abar)

    x = temperature * noise[:, 0]
    with nm.no_grad():
        for t in range(T, 0, -1):
            a, a_prev, beta = abar[t - 1], abar_prev[t - 1], schedule.betas[t - 1]
            eps_hat = head.noise_pred(x, np.full(n, t), z).data
            x0_hat = np.clip((x - np.sqrt(1.0 - a) * eps_hat) / np.sqrt(a), -x0_clip, x0_clip)
            x = (np.sqrt(a_prev) * beta * x0_hat + np.sqrt(1.0 - beta) * (1.0 - a_prev) * x) / (1.0 - a)
            if t > 1:
                x = x + temperature * np.sqrt(posterior_var[t - 1]) * noise[:, T - t + 1]
    return x


def sample_token(
    head: DiffusionHead,
    z: np.ndarray,
    schedule: NoiseSchedule,
    temperature: float,
    seed: int,
    x0_clip: float = 8.0,
) -> np.ndarray:
    """Single-latent ancestral sample, (z_dim,) -> (d,)."""
    return sample_tokens(head, np.asarray(z)[None], schedule, temperature, seed,
                         x0_clip=x0_clip)[0]
