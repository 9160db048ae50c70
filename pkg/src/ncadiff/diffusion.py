"""DDPM forward noising and reverse-chain sampling.

The noise predictor is a pluggable function eps_hat = predictor(x_t, t);
conditioning on the image happens inside the predictor. Steps are indexed
t = 1..T.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .rng import RngStream


class ScheduleError(ValueError):
    pass


class NoiseSchedule:
    """Linear-beta variance schedule with precomputed alpha_bar products.

    Arrays are indexed 0..T-1 for steps 1..T; beta/alpha/alpha_bar are
    float64 regardless of model precision.
    """

    def __init__(self, T: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ScheduleError("schedule needs at least one step")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ScheduleError(f"beta endpoints out of range: {beta_start}, {beta_end}")
        self.T = T
        if T == 1:
            self.beta = np.array([beta_start], dtype=np.float64)
        else:
            self.beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        if not np.all((self.beta > 0) & (self.beta < 1)):
            raise ScheduleError("beta values must lie in (0,1)")

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} out of range [1, {self.T}]")
        return t - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t)])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    ab = sched.alpha_bar_at(t)
    return (math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Invert q_sample under a noise estimate: (x_t - sqrt(1-abar_t)*eps)/sqrt(abar_t)."""
    ab = sched.alpha_bar_at(t)
    return ((x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)).astype(x_t.dtype, copy=False)


def p_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray,
           sched: NoiseSchedule) -> np.ndarray:
    """One reverse transition t -> t-1 with sigma_t^2 = beta_t."""
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    if t == 1 and np.any(z != 0):
        raise ValueError("the final reverse step (t=1) must use z = 0")
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    return (mean + math.sqrt(beta) * z).astype(x_t.dtype, copy=False)


def reverse_chain(predictor: Callable[[np.ndarray, int], np.ndarray],
                  shape: tuple, sched: NoiseSchedule, rng: RngStream,
                  dtype=np.float32,
                  on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> np.ndarray:
    """Sample x_T ~ N(0,I) and denoise down to the continuous x0 estimate.

    on_step, if given, is called as on_step(t, x_t, eps_hat) before each
    transition (t descending from T to 1).
    """
    x = rng.normal(shape, dtype=dtype)
    for t in range(sched.T, 0, -1):
        eps_hat = predictor(x, t)
        if on_step is not None:
            on_step(t, x, eps_hat)
        z = rng.normal(shape, dtype=dtype) if t > 1 else np.zeros(shape, dtype=dtype)
        x = p_step(x, t, eps_hat, z, sched)
    return x
