"""DDPM machinery: linear beta schedule, forward noising, epsilon objective and
the ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericError


@dataclass
class NoiseSchedule:
    t_max: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.beta_1 < self.beta_T < 1:
            raise ConfigError("need 0 < beta_1 < beta_T < 1")
        # index 0 is the clean state: betas[0] unused, alpha_bar[0] = 1
        self.betas = np.concatenate([[0.0], np.linspace(self.beta_1, self.beta_T, self.t_max)])
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def ab(self, tau) -> torch.Tensor:
        idx = torch.as_tensor(tau, dtype=torch.long)
        if (idx < 0).any() or (idx > self.t_max).any():
            raise ConfigError(f"timestep outside [0, {self.t_max}]")
        return torch.as_tensor(self.alpha_bar, dtype=torch.get_default_dtype())[idx]

    def timesteps(self, n_steps: int) -> list[int]:
        """Descending visit order; every step from t_max to 1 when n_steps >= t_max."""
        if n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if n_steps >= self.t_max:
            return list(range(self.t_max, 0, -1))
        ts = np.unique(np.round(np.linspace(1, self.t_max, n_steps)).astype(int))
        return [int(t) for t in ts[::-1]]

    def step_coefficients(self, t: int, s: int) -> tuple[float, float, float]:
        """(alpha, beta, posterior variance) for a jump t -> s < t."""
        a_t, a_s = self.alpha_bar[t], self.alpha_bar[s]
        alpha = a_t / a_s
        beta = 1.0 - alpha
        var = (1.0 - a_s) / (1.0 - a_t) * beta
        return alpha, beta, var

    def untrained_variance(self, n_steps: int, prior_var: float = 1.0) -> float:
        """Per-element variance of a trajectory whose noise prediction is 0."""
        ts = self.timesteps(n_steps)
        v = prior_var
        for i, t in enumerate(ts):
            s = ts[i + 1] if i + 1 < len(ts) else 0
            alpha, _, var = self.step_coefficients(t, s)
            v = v / alpha + (var if s > 0 else 0.0)
        return v

    def to_json(self) -> dict:
        return {"t_max": self.t_max, "beta_1": self.beta_1, "beta_T": self.beta_T}


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, *([1] * (x.dim() - 1)))


def q_sample(x0: torch.Tensor, tau, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise DataError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(x0.shape)}")
    ab = _bcast(schedule.ab(tau), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_x0(x_t: torch.Tensor, tau, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = _bcast(schedule.ab(tau), x_t)
    return (x_t - (1 - ab).sqrt() * eps) / ab.sqrt()


def diffusion_loss(model, x0, cond, schedule: NoiseSchedule, generator: torch.Generator,
                   tau: torch.Tensor | None = None, eps: torch.Tensor | None = None):
    """Epsilon-prediction MSE; returns (loss, tau, eps)."""
    B = x0.shape[0]
    if tau is None:
        tau = torch.randint(1, schedule.t_max + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, tau, eps, schedule)
    eps_hat = model.denoise(x_t, tau, cond)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        norms = {k: float(v.norm()) for k, v in (("x_t", x_t), ("eps_hat", eps_hat))}
        raise NumericError(f"non-finite loss at tau={tau.tolist()}; norms {norms}")
    return loss, tau, eps


def _generators(seed, batch: int) -> list[torch.Generator]:
    if isinstance(seed, (int, np.integer)):
        return [torch.Generator().manual_seed(int(seed))]
    seeds = list(seed)
    if len(seeds) != batch:
        raise ConfigError("need one seed per batch item")
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


def _randn(gens: Sequence[torch.Generator], shape) -> torch.Tensor:
    if len(gens) == 1:
        return torch.randn(shape, generator=gens[0])
    return torch.stack([torch.randn(shape[1:], generator=g) for g in gens])


@torch.no_grad()
def sample(model, cond, schedule: NoiseSchedule, seed, n_steps: int, batch: int | None = None,
           trajectory: list | None = None) -> torch.Tensor:
    """Ancestral DDPM sampling of normalized image latents.

    ``seed`` is an int (one generator for the batch) or one seed per item,
    which makes each item's trajectory independent of batch composition.
    """
    B = batch if batch is not None else cond.batch_size
    shape = (B, model.n_img_tokens, model.D)
    gens = _generators(seed, B)
    x = _randn(gens, shape)
    ts = schedule.timesteps(n_steps)
    for i, t in enumerate(ts):
        s = ts[i + 1] if i + 1 < len(ts) else 0
        eps = model.denoise(x, torch.full((B,), t, dtype=torch.long), cond)
        alpha, beta, var = schedule.step_coefficients(t, s)
        mean = (x - beta / np.sqrt(1.0 - schedule.alpha_bar[t]) * eps) / np.sqrt(alpha)
        x = mean + np.sqrt(var) * _randn(gens, shape) if s > 0 else mean
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite latent at timestep {t}")
        if trajectory is not None:
            trajectory.append(t)
    return x
