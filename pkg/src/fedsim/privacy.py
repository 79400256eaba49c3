"""Clipping, sensitivity, Gaussian-mechanism calibration and subsampling amplification.

The calibrated noise variance is

    sigma^2 = 2 * sensitivity^2 * ln(1.25 / (delta / gamma)) / (epsilon / (2 gamma))^2

where gamma is the per-round subsample ratio, and the amplified per-round
budget under sampling without replacement is

    eps' = ln(1 + (1 - (1 - b/n_k)^E) * (e^eps - 1)).

No cross-round composition accounting is performed; eps' is a per-round figure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedsim.errors import ConfigurationError


@dataclass(frozen=True)
class PrivacyConfig:
    """User-facing privacy knobs; the noise variance is calibrated per round.

    sensitivity_mode is either the string "derived" (sensitivity computed from
    the round's step size) or a fixed numeric sensitivity.  When gamma is set,
    the mini-batch size is derived from it; otherwise gamma follows from the
    configured batch size and per-device sample counts.
    """

    epsilon: float
    delta: float
    clip_c: float
    gamma: float | None = None
    sensitivity_mode: str | float = "derived"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta <= 1:
            raise ConfigurationError(f"delta must lie in (0, 1], got {self.delta}")
        if self.clip_c <= 0:
            raise ConfigurationError(f"clip bound must be positive, got {self.clip_c}")
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if isinstance(self.sensitivity_mode, str) and self.sensitivity_mode != "derived":
            raise ConfigurationError(
                f"sensitivity_mode must be 'derived' or a number, got {self.sensitivity_mode!r}"
            )


@dataclass(frozen=True)
class PrivacySpec:
    """A materialized per-round privacy record; sigma_sq must match the calibration."""

    epsilon: float
    delta: float
    clip_c: float
    gamma: float
    sensitivity: float
    sigma_sq: float

    def __post_init__(self):
        expected = calibrate_sigma_sq(self.sensitivity, self.epsilon, self.delta, self.gamma)
        tol = 1e-12 * max(abs(expected), 1e-300)
        if abs(self.sigma_sq - expected) > tol:
            raise ConfigurationError(
                f"sigma_sq {self.sigma_sq!r} does not match calibration {expected!r}"
            )

    @classmethod
    def calibrate(cls, epsilon, delta, clip_c, gamma, sensitivity) -> "PrivacySpec":
        return cls(
            epsilon=epsilon,
            delta=delta,
            clip_c=clip_c,
            gamma=gamma,
            sensitivity=sensitivity,
            sigma_sq=calibrate_sigma_sq(sensitivity, epsilon, delta, gamma),
        )


def clip(g: np.ndarray, c: float) -> np.ndarray:
    """Rescale g onto the L2 ball of radius c: g * min(1, c/||g||)."""
    if c <= 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= c:
        return g.copy()
    return g * (c / norm)


def sensitivity(
    eta_k: float,
    local_steps: int,
    clip_c: float,
    batch_size: int,
    mode: str | float = "derived",
) -> float:
    """L2 sensitivity of one round's local update.

    Derived mode uses 2 * eta * E * C / b (replace-one adjacency: each of the E
    averaged mini-batch steps moves by at most 2*eta*C/b).  A numeric mode is
    returned as-is.
    """
    if isinstance(mode, (int, float)):
        return float(mode)
    if mode != "derived":
        raise ValueError(f"unknown sensitivity mode {mode!r}")
    if eta_k <= 0 or local_steps < 1 or clip_c <= 0 or batch_size < 1:
        raise ValueError("sensitivity parameters must be positive")
    return 2.0 * eta_k * local_steps * clip_c / batch_size


def calibrate_sigma_sq(delta_f: float, epsilon: float, delta: float, gamma: float) -> float:
    """Gaussian-mechanism variance with subsampling amplification folded in."""
    if delta_f < 0:
        raise ValueError(f"sensitivity must be nonnegative, got {delta_f}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    ratio = delta / gamma
    if ratio >= 1.25:
        raise ValueError(
            f"delta/gamma = {ratio} >= 1.25 puts the noise log term out of domain"
        )
    return 2.0 * delta_f**2 * math.log(1.25 / ratio) / (epsilon / (2.0 * gamma)) ** 2


def amplified_epsilon(epsilon: float, batch_size: float, n_k: float, local_steps: int) -> float:
    """Per-round epsilon after subsampling E mini-batches of size b without replacement."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if batch_size > n_k:
        raise ConfigurationError(f"batch size {batch_size} exceeds device samples {n_k}")
    if batch_size <= 0 or n_k <= 0 or local_steps < 1:
        raise ValueError("batch size, sample count and local steps must be positive")
    frac = 1.0 - (1.0 - batch_size / n_k) ** local_steps
    # min() absorbs float noise at full sampling, where eps' = eps exactly.
    return min(epsilon, math.log1p(frac * math.expm1(epsilon)))


def gaussian_perturb(x: np.ndarray, sigma_sq: float, rng) -> np.ndarray:
    """x plus i.i.d. N(0, sigma_sq) per coordinate; the identity when sigma_sq is 0."""
    if sigma_sq < 0:
        raise ValueError(f"noise variance must be nonnegative, got {sigma_sq}")
    x = np.asarray(x, dtype=np.float64)
    if sigma_sq == 0.0:
        return x.copy()
    return x + rng.normal(0.0, math.sqrt(sigma_sq), size=x.shape)
