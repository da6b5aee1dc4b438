"""Cosine variance schedule and the coefficient tables derived from it.

The cumulative signal retention is

    alpha_bar(t) = f(t) / f(0),   f(t) = cos((t/T + s) / (1 + s) * pi/2)^2

with a small offset ``s`` that keeps the early steps from collapsing.
Per-step quantities follow from the ratio of consecutive alpha_bar values:
beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}, clipped to at most 0.999.

Index convention: t = 0 means clean data, so ``alpha_bar`` has T+1 entries
and ``alpha_bar[0] == 1.0`` exactly. Per-step arrays (beta, alpha,
posterior_variance) are also indexed directly by t; slot 0 is NaN so an
accidental t = 0 lookup shows up immediately instead of silently shifting
the whole table by one.

All tables are float64 and frozen after construction; a NoiseSchedule is
safe to share across threads.
"""

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_OFFSET = 0.008
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed coefficient tables for a T-step diffusion process."""

    T: int
    s: float
    alpha_bar: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    posterior_variance: np.ndarray


def _validate_domain(t: int, T: int, s: float) -> None:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if s < 0:
        raise ValueError(f"offset s must be >= 0, got {s}")
    if not 0 <= t <= T:
        raise ValueError(f"t must be in 0..{T}, got {t}")


def cosine_alpha_bar(t: int, T: int, s: float = DEFAULT_OFFSET) -> float:
    """Cumulative signal retention alpha_bar(t) = f(t) / f(0)."""
    _validate_domain(t, T, s)
    f_t = math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    f_0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return f_t / f_0


def build_schedule(T: int, s: float = DEFAULT_OFFSET) -> NoiseSchedule:
    """Build the full coefficient table for a T-step cosine schedule.

    beta is clipped to BETA_MAX last, after all ratios are formed, so
    ``alpha_bar`` always holds the pure closed-form values.
    """
    _validate_domain(0, T, s)

    alpha_bar = np.array([cosine_alpha_bar(t, T, s) for t in range(T + 1)])

    beta = np.full(T + 1, np.nan)
    beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    beta[1:] = np.minimum(beta[1:], BETA_MAX)

    alpha = np.full(T + 1, np.nan)
    alpha[1:] = 1.0 - beta[1:]

    posterior_variance = np.full(T + 1, np.nan)
    # beta_tilde_t = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t);
    # zero at t = 1 because alpha_bar_0 == 1.
    posterior_variance[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])

    arrays = dict(
        alpha_bar=alpha_bar,
        beta=beta,
        alpha=alpha,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        posterior_variance=posterior_variance,
    )
    for a in arrays.values():
        a.flags.writeable = False
    return NoiseSchedule(T=T, s=float(s), **arrays)
