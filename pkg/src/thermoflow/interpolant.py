"""Noise-data interpolant, velocity targets, training loss, and ODE sampling.

The generative path connects a clean latent ``z0`` to Gaussian noise
``eps`` through ``z_t = alpha(t) * z0 + sigma(t) * eps`` on t in [0, 1],
with alpha decreasing from 1 to 0 and sigma increasing from 0 to 1.
Training regresses a network onto the per-sample path derivative
``alpha_dot * z0 + sigma_dot * eps``; sampling integrates the learned
velocity backward from t=1 to t=0 with Euler or Heun steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class Schedule:
    """An interpolant path: coefficient functions of t plus their derivatives."""

    name: str
    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    sigma_dot: Callable[[float], float]


LINEAR = Schedule(
    name="linear",
    alpha=lambda t: 1.0 - t,
    sigma=lambda t: t,
    alpha_dot=lambda t: -1.0,
    sigma_dot=lambda t: 1.0,
)

# cos(pi t / 2) written as sin(pi (1-t) / 2) so both endpoints evaluate
# exactly to 0.0 / 1.0 in floating point, keeping the bitwise endpoint
# contract of the interpolant.
COSINE = Schedule(
    name="cosine",
    alpha=lambda t: math.sin(0.5 * math.pi * (1.0 - t)),
    sigma=lambda t: math.sin(0.5 * math.pi * t),
    alpha_dot=lambda t: -0.5 * math.pi * math.cos(0.5 * math.pi * (1.0 - t)),
    sigma_dot=lambda t: 0.5 * math.pi * math.cos(0.5 * math.pi * t),
)

SCHEDULES = {s.name: s for s in (LINEAR, COSINE)}


def get_schedule(name: str) -> Schedule:
    if name not in SCHEDULES:
        raise ConfigError(f"unknown schedule '{name}'; available: {sorted(SCHEDULES)}")
    return SCHEDULES[name]


def _uniform_grid(steps: int) -> tuple[float, ...]:
    return tuple(np.linspace(1.0, 0.0, steps + 1).tolist())


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-integration settings; the grid runs from t=1 down to t=0."""

    steps: int = 50
    integrator: str = "euler"
    cfg_scale: float = 1.0
    time_grid: tuple[float, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampler steps must be >= 1, got {self.steps}")
        if self.integrator not in ("euler", "heun"):
            raise ConfigError(f"integrator must be 'euler' or 'heun', got '{self.integrator}'")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be non-negative, got {self.cfg_scale}")
        grid = self.time_grid if self.time_grid is not None else _uniform_grid(self.steps)
        grid = tuple(float(t) for t in grid)
        if len(grid) != self.steps + 1:
            raise ConfigError(f"time grid needs steps+1={self.steps + 1} points, got {len(grid)}")
        if grid[0] != 1.0 or grid[-1] != 0.0:
            raise ConfigError("time grid must start at 1 and end at 0")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("time grid must be strictly decreasing")
        object.__setattr__(self, "time_grid", grid)


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"interpolant time must lie in [0, 1], got {t}")
    return t


def _pair(z0, eps) -> tuple[np.ndarray, np.ndarray]:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionError(f"z0 and eps shapes differ: {z0.shape} vs {eps.shape}")
    return z0, eps


def forward_process(z0, eps, t: float, sched: Schedule) -> np.ndarray:
    """The noised latent alpha_t * z0 + sigma_t * eps."""
    z0, eps = _pair(z0, eps)
    t = _check_t(t)
    return sched.alpha(t) * z0 + sched.sigma(t) * eps


def velocity_target(z0, eps, t: float, sched: Schedule) -> np.ndarray:
    """The per-sample regression target alpha_dot_t * z0 + sigma_dot_t * eps."""
    z0, eps = _pair(z0, eps)
    t = _check_t(t)
    return sched.alpha_dot(t) * z0 + sched.sigma_dot(t) * eps


def flow_matching_loss(model, batch: dict, rng: np.random.Generator,
                       sched: Schedule = LINEAR) -> T.Tensor:
    """Mean squared velocity-regression error over one batch.

    ``batch`` carries numpy latents ``z0`` and ``z_rgb`` of shape
    (B, h, w, C) plus ``style_ids`` (one per item).  Per item, draws
    t ~ U(0,1) and eps ~ N(0,I), noises z0 along the schedule, and
    regresses the model velocity onto the path derivative.  Style
    dropout is applied through the model's bank, so the loss trains
    the unconditional slot too.
    """
    z0 = np.asarray(batch["z0"], dtype=np.float64)
    z_rgb = np.asarray(batch["z_rgb"], dtype=np.float64)
    style_ids = batch["style_ids"]
    n = z0.shape[0]
    if z_rgb.shape[0] != n or len(style_ids) != n:
        raise DimensionError("batch fields z0/z_rgb/style_ids disagree in length")

    t = rng.uniform(0.0, 1.0, size=n)
    eps = rng.standard_normal(z0.shape)
    bshape = (n,) + (1,) * (z0.ndim - 1)
    alpha = np.array([sched.alpha(v) for v in t]).reshape(bshape)
    sigma = np.array([sched.sigma(v) for v in t]).reshape(bshape)
    alpha_dot = np.array([sched.alpha_dot(v) for v in t]).reshape(bshape)
    sigma_dot = np.array([sched.sigma_dot(v) for v in t]).reshape(bshape)

    z_t = alpha * z0 + sigma * eps
    target = alpha_dot * z0 + sigma_dot * eps
    indices = np.array([model.bank.train_select_index(sid, rng) for sid in style_ids])

    pred = model.forward_styled(z_t, t, z_rgb, indices)
    err = T.sub(pred, T.Tensor(target))
    return T.mean_all(T.mul(err, err))


def guided_velocity(model, z_t, t, z_rgb, style_id: str, cfg_scale: float) -> np.ndarray:
    """Classifier-free-guided velocity v_un + s * (v_cond - v_un).

    s=1 short-circuits to the conditional pass and s=0 to the
    unconditional one, so those cases are bitwise-exact (and cost a
    single forward).
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    n = z_t.shape[0]
    tv = np.full(n, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
    cond_idx = np.full(n, model.bank.index_of(style_id))
    uncond_idx = np.full(n, model.bank.unconditional_index)
    if cfg_scale == 1.0:
        return model.forward_styled(z_t, tv, z_rgb, cond_idx).data
    if cfg_scale == 0.0:
        return model.forward_styled(z_t, tv, z_rgb, uncond_idx).data
    v_cond = model.forward_styled(z_t, tv, z_rgb, cond_idx).data
    v_un = model.forward_styled(z_t, tv, z_rgb, uncond_idx).data
    return v_un + cfg_scale * (v_cond - v_un)


def sample(model, eps, z_rgb, style_id: str, cfg: SamplerConfig,
           sched: Schedule = LINEAR) -> np.ndarray:
    """Integrate the learned velocity from t=1 (noise) down to t=0.

    Euler: z <- z + dt * v(z, t_k).  Heun adds the trapezoidal
    corrector using the velocity at the predicted endpoint.
    """
    z = np.array(eps, dtype=np.float64, copy=True)
    grid = cfg.time_grid

    def vel(state, t):
        return guided_velocity(model, state, t, z_rgb, style_id, cfg.cfg_scale)

    for t_k, t_next in zip(grid, grid[1:]):
        dt = t_next - t_k
        v1 = vel(z, t_k)
        if cfg.integrator == "euler":
            z = z + dt * v1
        else:
            z_pred = z + dt * v1
            v2 = vel(z_pred, t_next)
            z = z + 0.5 * dt * (v1 + v2)
    return z
