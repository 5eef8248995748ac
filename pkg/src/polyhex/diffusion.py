"""Noise schedule, forward corruption, training losses and the DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import tensor as T
from .core.tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed by step ``t`` in ``0..T``.

    Index 0 holds the convention ``alpha_bar[0] = 1`` (and ``beta[0] = 0``).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")
        return t


def build_schedule(T: int = 1024, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp over ``T`` steps with cumulative products in float64."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        frac = np.arange(T, dtype=np.float64) / (T - 1)
        betas = beta_start + frac * (beta_end - beta_start)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    if not np.all(np.diff(alpha_bar) < 0):
        # float64 underflow or rounding would make alpha_bar stall
        t = int(np.argmin(np.diff(alpha_bar) < 0)) + 1
        raise ValueError(f"alpha_bar stops decreasing at t={t} ({alpha_bar[t]:.3e}); "
                         "use a shorter or gentler schedule")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


@dataclass
class DiffusionSample:
    x0: np.ndarray
    xt: np.ndarray
    eps: np.ndarray
    t: int


def forward_sample(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> DiffusionSample:
    """Closed-form corruption x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    t = sched.check_step(t, allow_zero=True)
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 {x0.shape} and noise {noise.shape} differ in shape")
    ab = sched.alpha_bar[t]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    return DiffusionSample(x0, xt, noise, t)


def loss_l2(eps_pred, eps_true) -> Tensor:
    """Mean squared error over every entry."""
    diff = T.add(eps_pred, T.scale(T._as_tensor(eps_true), -1.0))
    return T.mean(T.square(diff))


def loss_l1(eps_pred, eps_true) -> Tensor:
    diff = T.add(eps_pred, T.scale(T._as_tensor(eps_true), -1.0))
    return T.mean(T.absolute(diff))


def loss_hybrid(eps_pred, eps_true, w: float) -> Tensor:
    """``w * L2 + (1 - w) * L1``; the caller draws w once per iteration."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"hybrid weight {w} outside [0, 1]")
    if w == 1.0:
        return loss_l2(eps_pred, eps_true)
    if w == 0.0:
        return loss_l1(eps_pred, eps_true)
    return T.add(T.scale(loss_l2(eps_pred, eps_true), w), T.scale(loss_l1(eps_pred, eps_true), 1.0 - w))


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from step t to t_prev < t."""
    t = sched.check_step(t)
    t_prev = sched.check_step(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    ab_t = sched.alpha_bar[t]
    if ab_t <= 0.0:
        raise FloatingPointError(f"alpha_bar[{t}] is zero")
    ab_prev = sched.alpha_bar[t_prev]
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def timestep_ladder(T_steps: int, stride: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs visited by the strided sampler, ending at t_prev = 0."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ts = list(range(T_steps, 0, -stride))
    return [(t, max(t - stride, 0)) for t in ts]


@dataclass(frozen=True)
class Normalization:
    """Center/scale that maps the condition's bbox long axis onto [-1, 1]."""

    center: np.ndarray
    scale: float

    @classmethod
    def fit(cls, points: np.ndarray) -> "Normalization":
        pts = np.asarray(points)[:, :3]
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        extent = float((hi - lo).max())
        return cls((lo + hi) / 2.0, extent / 2.0 if extent > 0 else 1.0)

    def apply(self, cloud: np.ndarray) -> np.ndarray:
        out = np.array(cloud, dtype=np.float64, copy=True)
        out[..., :3] = (out[..., :3] - self.center) / self.scale
        return out

    def invert(self, cloud: np.ndarray) -> np.ndarray:
        out = np.array(cloud, dtype=np.float64, copy=True)
        out[..., :3] = out[..., :3] * self.scale + self.center
        return out


def sample(model, condition: np.ndarray, M: int, stride: int = 4, seed: int = 0,
           sched: NoiseSchedule | None = None,
           on_step: Callable[[int, int], None] | None = None) -> np.ndarray:
    """Generate an ``M x 6`` polycube cloud conditioned on ``condition`` (N x 3).

    ``model`` must expose ``encode(g) -> latent`` and
    ``denoise(x_t, latent, t) -> eps_hat`` on normalized arrays. The chain
    starts from seeded Gaussian noise, runs ``ceil(T / stride)`` denoiser
    evaluations, maps back through the inverse normalization and
    renormalizes the normal channels.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    sched = sched or model.schedule
    cond = np.asarray(condition, dtype=np.float64)[:, :3]
    if len(cond) == 0:
        raise ValueError("empty condition cloud")
    norm = Normalization.fit(cond)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((M, 6))
    z_c = model.encode(norm.apply(cond))
    for t, t_prev in timestep_ladder(sched.T, stride):
        eps_hat = np.asarray(model.denoise(x, z_c, t), dtype=np.float64)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
        if on_step is not None:
            on_step(t, t_prev)
    x = norm.invert(x)
    n = np.linalg.norm(x[:, 3:], axis=1, keepdims=True)
    x[:, 3:] = x[:, 3:] / np.where(n > 0, n, 1.0)
    return x
