"""Noise schedules and the forward diffusion process.

Index convention: t = 0 is the clean-data index (alpha[0] = 1, beta[0] = 0);
the train horizon runs t = 1..T.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError, ShapeError
from .latents import LatentTensor

VP = "vp"
KARRAS = "karras"

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
# The Karras ladder parameters are conventions for the toy model; the source
# method only fixes the functional form.
DEFAULT_SIGMA_MIN = 0.1
DEFAULT_SIGMA_MAX = 10.0
DEFAULT_RHO = 7.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal/noise coefficient tables.

    For the VP kind, ``alpha`` and ``beta`` are arrays of length T + 1 with
    alpha[t]^2 + beta[t]^2 = 1 for every t. ``sigma`` optionally carries a
    Karras sigma ladder.
    """

    kind: str
    T: int
    alpha: np.ndarray
    beta: np.ndarray
    sigma: Optional[np.ndarray] = None
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.kind not in (VP, KARRAS):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.alpha.shape != (self.T + 1,) or self.beta.shape != (self.T + 1,):
            raise ShapeError("alpha/beta tables must have length T + 1")

    # -- sigma-domain helpers (noise-to-signal ratio) ---------------------

    def sigma_ratio(self, t) -> np.ndarray:
        """beta_t / alpha_t for integer or fractional t (interpolated in log space)."""
        t = np.asarray(t, dtype=np.float64)
        log_sig = self._log_sigma_table()
        ti = np.clip(t, 1.0, float(self.T))
        lo = np.floor(ti).astype(int)
        hi = np.minimum(lo + 1, self.T)
        frac = ti - lo
        out = np.exp(log_sig[lo - 1] * (1 - frac) + log_sig[hi - 1] * frac)
        return out if out.shape else float(out)

    def sigma_to_t(self, sigma) -> np.ndarray:
        """Inverse of :meth:`sigma_ratio`: fractional train timestep for a sigma."""
        sigma = np.asarray(sigma, dtype=np.float64)
        log_sig = self._log_sigma_table()
        target = np.log(np.clip(sigma, np.exp(log_sig[0]), np.exp(log_sig[-1])))
        idx = np.searchsorted(log_sig, target, side="left")
        idx = np.clip(idx, 1, self.T - 1)
        lo, hi = idx - 1, idx
        denom = log_sig[hi] - log_sig[lo]
        frac = np.where(denom > 0, (target - log_sig[lo]) / np.where(denom == 0, 1.0, denom), 0.0)
        t = (lo + 1) + frac
        t = np.clip(t, 1.0, float(self.T))
        return t if t.shape else float(t)

    def _log_sigma_table(self) -> np.ndarray:
        # log(beta_t / alpha_t) for t = 1..T; monotone increasing for VP.
        return np.log(self.beta[1:] / self.alpha[1:])


def build_vp_schedule(T: int = DEFAULT_T,
                      beta_start: float = DEFAULT_BETA_START,
                      beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Variance-preserving schedule from a linear beta ramp.

    alpha_t = sqrt(cumprod_{k<=t}(1 - beta_lin_k)), beta_t = sqrt(1 - alpha_t^2).
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta_lin = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta_lin)
    alpha = np.concatenate([[1.0], np.sqrt(alpha_bar)])
    beta = np.sqrt(1.0 - alpha ** 2)
    return NoiseSchedule(kind=VP, T=T, alpha=alpha, beta=beta,
                         beta_start=beta_start, beta_end=beta_end)


def build_karras_sigmas(n: int,
                        sigma_min: float = DEFAULT_SIGMA_MIN,
                        sigma_max: float = DEFAULT_SIGMA_MAX,
                        rho: float = DEFAULT_RHO) -> np.ndarray:
    """Karras sigma ladder: rho-spaced interpolation from sigma_max down to sigma_min."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not (0 < sigma_min < sigma_max):
        raise ParameterError(f"need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})")
    if rho <= 0:
        raise ParameterError(f"rho must be > 0, got {rho}")
    if n == 1:
        return np.array([sigma_max], dtype=np.float64)
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    max_inv = sigma_max ** (1.0 / rho)
    min_inv = sigma_min ** (1.0 / rho)
    return (max_inv + ramp * (min_inv - max_inv)) ** rho


def vp_sigmas(sched: NoiseSchedule, n: int) -> np.ndarray:
    """Sigma ladder that revisits the VP train schedule: t evenly spaced T..1."""
    if sched.kind != VP:
        raise ParameterError("vp_sigmas needs a VP schedule")
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    ts = np.linspace(sched.T, 1, n)
    return np.asarray(sched.sigma_ratio(ts), dtype=np.float64).reshape(-1)


def vp_coeffs_for_sigma(sigma):
    """(alpha, beta) with alpha^2 + beta^2 = 1 and beta/alpha = sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    alpha = 1.0 / np.sqrt(1.0 + sigma ** 2)
    return alpha, sigma * alpha


def q_sample(z0: LatentTensor, t: int, eps: LatentTensor, sched: NoiseSchedule) -> LatentTensor:
    """Forward diffusion: alpha_t * z0 + beta_t * eps, elementwise."""
    if z0.data.shape != eps.data.shape:
        raise ShapeError(f"z0 shape {z0.data.shape} != eps shape {eps.data.shape}")
    if not (0 <= t <= sched.T):
        raise ParameterError(f"t must be in [0, {sched.T}], got {t}")
    out = sched.alpha[t] * z0.data + sched.beta[t] * eps.data
    return LatentTensor(out, z0.f)
