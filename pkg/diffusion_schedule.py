"""
Variance-preserving noise schedule, forward corruption and reverse updates.

Tables are kept in float64 (numpy) and converted to Python floats when they
scale a tensor, so the schedule identities hold to machine precision
regardless of the tensor dtype.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from config import ScheduleConfig
from errors import ParameterError, ShapeError
from utils import check_probability, check_same_shape

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Immutable noise schedule.

    Attributes:
        beta (np.ndarray): Per-step variances, shape (T,).
        alpha_t (np.ndarray): Signal coefficients sqrt(prod(1 - beta)), shape (T,).
        sigma_t (np.ndarray): Noise coefficients sqrt(1 - alpha_t**2), shape (T,).
    """

    beta: np.ndarray
    alpha_t: np.ndarray
    sigma_t: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_t[t]) ** 2

    def check_timestep(self, t: int) -> int:
        if not 0 <= int(t) < self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T})")
        return int(t)

    def coefficients(self, t: torch.Tensor, like: torch.Tensor):
        """Per-sample (alpha, sigma) for a batch of timesteps, shaped to broadcast over ``like``."""
        idx = t.long().cpu().numpy()
        if idx.min() < 0 or idx.max() >= self.T:
            raise ParameterError(f"timesteps must lie in [0, {self.T})")
        shape = (-1,) + (1,) * (like.dim() - 1)
        alpha = torch.as_tensor(self.alpha_t[idx], dtype=like.dtype, device=like.device).view(shape)
        sigma = torch.as_tensor(self.sigma_t[idx], dtype=like.dtype, device=like.device).view(shape)
        return alpha, sigma


def build_schedule(kind: str, T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """
    Build a linear-beta variance-preserving schedule.

    Args:
        kind (str): Schedule family; only 'linear' is supported.
        T (int): Number of diffusion steps (>= 2).
        beta_min (float): First beta.
        beta_max (float): Last beta, < 1.

    Returns:
        NoiseSchedule: alpha_t and sigma_t tables with alpha**2 + sigma**2 = 1.

    Raises:
        ParameterError: On an unknown kind or an invalid beta range.
    """
    if kind != "linear":
        raise ParameterError(f"unsupported schedule kind {kind!r}")
    if not isinstance(T, int) or T < 2:
        raise ParameterError(f"T must be an integer >= 2, got {T!r}")
    # Zero betas are accepted for the noiseless degenerate schedule.
    if not 0.0 <= beta_min <= beta_max < 1.0:
        raise ParameterError(f"need 0 <= beta_min <= beta_max < 1, got {beta_min}, {beta_max}")

    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    alpha_t = np.sqrt(alpha_bar)
    sigma_t = np.sqrt(1.0 - alpha_bar)
    for arr in (beta, alpha_t, sigma_t):
        arr.setflags(write=False)
    return NoiseSchedule(beta=beta, alpha_t=alpha_t, sigma_t=sigma_t)


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    """Build the schedule described by a config section."""
    beta_min, beta_max = cfg.endpoints()
    sched = build_schedule(cfg.kind, cfg.steps, beta_min, beta_max)
    logger.debug("schedule T=%d beta=[%.2e, %.2e] sigma_T=%.6f",
                 sched.T, beta_min, beta_max, sched.sigma_t[-1])
    return sched


def forward_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """
    Sample q(x_t | x_0): ``alpha_t * x0 + sigma_t * eps``.

    ``t`` is either an int shared by the whole tensor or a (B,) tensor of
    per-sample timesteps.
    """
    check_same_shape(x0, eps, "x0 and eps")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.shape[0] != x0.shape[0]:
            raise ShapeError(f"got {t.shape[0]} timesteps for a batch of {x0.shape[0]}")
        alpha, sigma = sched.coefficients(t, x0)
        return alpha * x0 + sigma * eps
    t = sched.check_timestep(int(t))
    return float(sched.alpha_t[t]) * x0 + float(sched.sigma_t[t]) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Clean-image estimate (x_t - sigma_t * eps_hat) / alpha_t."""
    return (x_t - float(sched.sigma_t[t]) * eps_hat) / float(sched.alpha_t[t])


def reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
                 eta: float = 0.0, rng: Optional[torch.Generator] = None,
                 t_prev: Optional[int] = None) -> torch.Tensor:
    """
    One reverse update from ``t`` to ``t_prev`` (default ``t - 1``).

    ``eta`` = 1 gives ancestral DDPM sampling, ``eta`` = 0 the deterministic
    DDIM update. At ``t`` = 0 (or ``t_prev`` < 0) the predicted clean image is
    returned with no noise injected.
    """
    check_same_shape(x_t, eps_hat, "x_t and eps_hat")
    t = sched.check_timestep(t)
    eta = check_probability(eta, "eta")
    if t_prev is None:
        t_prev = t - 1
    if t_prev >= t:
        raise ParameterError(f"t_prev {t_prev} must be smaller than t {t}")

    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    if t_prev < 0:
        return x0_hat

    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    if eta > 0.0 and ab_t < 1.0:
        sigma_eta = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(max(0.0, 1.0 - ab_t / ab_prev))
    else:
        sigma_eta = 0.0
    dir_coef = math.sqrt(max(0.0, 1.0 - ab_prev - sigma_eta ** 2))

    x_prev = math.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat
    if sigma_eta > 0.0:
        z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
        x_prev = x_prev + sigma_eta * z
    return x_prev
