"""Cosine noise schedule, forward noising, the epsilon-MSE objective and a
deterministic DDIM sampler.  Timesteps are 1-based: ``t`` in ``[1, T]``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MMDiT, forward
from .tensor import Tensor, mse

ALPHA_BAR_CLIP = 1e-5


@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # alpha_bar[t - 1] for t = 1..T, float64

    def at(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return self.alpha_bar[t - 1]


def make_schedule(T: int = 100, kind: str = "cosine", s: float = 0.008) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need at least 2 timesteps, got {T}")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")

    def f(x):
        return np.cos((x + s) / (1 + s) * np.pi / 2) ** 2

    t = np.arange(1, T + 1, dtype=np.float64)
    ab = np.clip(f(t / T) / f(0.0), ALPHA_BAR_CLIP, 1 - ALPHA_BAR_CLIP)
    return NoiseSchedule(T, ab)


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    p: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z_t: np.ndarray


def add_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.at(t)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    shape = (-1,) + (1,) * (x0.ndim - 1)
    a = np.sqrt(ab).astype(np.float32).reshape(shape)
    b = np.sqrt(1 - ab).astype(np.float32).reshape(shape)
    return (a * x0 + b * eps).astype(np.float32)


def make_batch(x0: np.ndarray, p: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> DiffusionBatch:
    """Draw t uniformly in [1, T] and unit Gaussian noise for each sample."""
    t = rng.integers(1, schedule.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return DiffusionBatch(x0, p, t, eps, add_noise(x0, t, eps, schedule))


def diffusion_loss(model: MMDiT, batch: DiffusionBatch, schedule: NoiseSchedule | None = None) -> Tensor:
    """Mean squared error between predicted and true noise."""
    pred, _ = forward(model, batch.z_t, batch.t, batch.p)
    if pred.shape != batch.eps.shape:
        raise ValueError(f"prediction {pred.shape} and noise {batch.eps.shape} differ")
    return mse(pred, batch.eps.astype(pred.dtype, copy=False))


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 1, steps)).astype(np.int64)
    return np.unique(ts)[::-1]


def sample(model: MMDiT, p, schedule: NoiseSchedule, steps: int = 50, seed: int = 0, x_T=None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM trajectory from seeded Gaussian noise.

    ``p`` is a (B, text_len) token array.  Returns images clipped to [-1, 1].
    """
    cfg = model.config
    p = np.asarray(p)
    if p.ndim == 1:
        p = p[None]
    ts = ddim_timesteps(schedule.T, steps)
    if x_T is None:
        rng = np.random.default_rng(seed)
        x_T = rng.standard_normal((len(p), cfg.image_size, cfg.image_size, cfg.channels))
    x = np.asarray(x_T, dtype=np.float64)
    for i, t in enumerate(ts):
        ab = schedule.alpha_bar[t - 1]
        ab_prev = schedule.alpha_bar[ts[i + 1] - 1] if i + 1 < len(ts) else 1.0
        eps, _ = forward(model, x.astype(np.float32), np.full(len(p), t), p)
        eps = eps.data.astype(np.float64)
        x0 = np.clip((x - np.sqrt(1 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * eps
    return np.clip(x, -1.0, 1.0).astype(np.float32)
