"""Differential-privacy accounting for gradients perturbed by inherent quantum noise.

Per-parameter gradient noise is bounded by [sigma_min, sigma_max] with
sigma^2 = gamma_sq * h / 2, where h is the shot variance of a depolarized
+-1 measurement. The mechanism is accounted as a Gaussian mechanism with
the worst-case scale sigma_min, then composed over training steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .measurement import h_bounds


class PrivacyError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseBounds:
    sigma_min: float
    sigma_max: float
    pt: float
    shots: int
    gamma_sq: float

    def __post_init__(self):
        if not 0.0 <= self.sigma_min <= self.sigma_max + 1e-15:
            raise PrivacyError(f"invalid noise bounds [{self.sigma_min}, {self.sigma_max}]")


def noise_bounds(pt: float, shots: int, gamma_sq: float) -> NoiseBounds:
    """Standard-deviation bounds of one parameter-shift gradient component.

    The gradient is half the difference of two independent mitigated
    estimates, so Var = gamma_sq * (h(+) + h(-)) / 4, which lies in
    [gamma_sq * h_min / 2, gamma_sq * h_max / 2].
    """
    if not 0.0 <= pt <= 1.0:
        raise PrivacyError(f"pt={pt} outside [0, 1]")
    if gamma_sq <= 0:
        raise PrivacyError("gamma_sq must be positive")
    h_min, h_max = h_bounds(pt, shots)
    return NoiseBounds(
        math.sqrt(gamma_sq * h_min / 2), math.sqrt(gamma_sq * h_max / 2), pt, shots, gamma_sq
    )


def equivalent_sigma(bounds: Sequence[NoiseBounds]) -> float:
    """Isotropic noise scale that is no stronger than any per-parameter scale."""
    if not bounds:
        raise PrivacyError("need at least one parameter's noise bounds")
    return min(b.sigma_min for b in bounds)


def harmonic_sigma_bound(sigmas, sensitivities) -> float:
    """(sum s_i^2) / (sum s_i^2 / sigma_i^2): the largest admissible equivalent variance."""
    s2 = np.square(np.asarray(sensitivities, dtype=float))
    sig2 = np.square(np.asarray(sigmas, dtype=float))
    if np.any(sig2 <= 0):
        return 0.0
    return float(s2.sum() / (s2 / sig2).sum())


@dataclass(frozen=True)
class SensitivitySpec:
    """l2 sensitivity of the batch-averaged clipped gradient under substitution adjacency."""

    clip: float
    batch_size: int
    adjacency: str = "substitution"

    def __post_init__(self):
        if self.clip <= 0 or self.batch_size < 1:
            raise PrivacyError("clip must be positive and batch_size >= 1")
        if self.adjacency != "substitution":
            raise PrivacyError(f"unsupported adjacency {self.adjacency!r}")

    @property
    def delta2_f(self) -> float:
        return 2.0 * self.clip / self.batch_size


def gaussian_epsilon(
    sigma: float, sens: SensitivitySpec | float, delta: float, batch_size: int | None = None
) -> float:
    """Classical Gaussian-mechanism epsilon for per-example noise scale ``sigma``.

    Averaging ``m`` independently noised per-example gradients leaves noise of
    scale sigma / sqrt(m) on the released mean. ``sens`` may be a bare
    sensitivity, in which case ``batch_size`` defaults to 1. Returns ``inf``
    when there is no noise. Values above 1 are outside the regime where the
    bound is proven; see :func:`epsilon_is_loose`.
    """
    if not 0.0 < delta < 1.0:
        raise PrivacyError(f"delta={delta} outside (0, 1)")
    if isinstance(sens, SensitivitySpec):
        d2f, m = sens.delta2_f, sens.batch_size
    else:
        d2f, m = float(sens), batch_size or 1
    if sigma < 0:
        raise PrivacyError("sigma must be non-negative")
    if sigma == 0:
        return math.inf
    return d2f / (sigma / math.sqrt(m)) * math.sqrt(2.0 * math.log(1.25 / delta))


def epsilon_is_loose(epsilon: float) -> bool:
    return epsilon > 1.0


COMPOSITIONS = ("naive", "advanced")


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    steps: int
    composition: str = "naive"
    sigma_bounds: tuple[float, float] | None = field(default=None)

    @property
    def loose(self) -> bool:
        return epsilon_is_loose(self.epsilon)


def compose(
    per_step: tuple[float, float], steps: int, method: str = "naive", delta_prime: float = 1e-5
) -> PrivacyBudget:
    """Compose ``steps`` identical (epsilon, delta) releases."""
    eps, delta = per_step
    if steps < 0:
        raise PrivacyError("steps must be >= 0")
    if method not in COMPOSITIONS:
        raise PrivacyError(f"unknown composition {method!r}")
    if steps == 0:
        return PrivacyBudget(0.0, 0.0, 0, method)
    if method == "naive":
        return PrivacyBudget(steps * eps, steps * delta, steps, method)
    return compose_heterogeneous([eps] * steps, [delta] * steps, method, delta_prime)


def compose_heterogeneous(
    epsilons: Sequence[float], deltas: Sequence[float], method: str = "naive", delta_prime: float = 1e-5
) -> PrivacyBudget:
    """Compose a sequence of possibly different per-step guarantees.

    Advanced composition uses sqrt(2 ln(1/delta') sum eps_i^2) + sum eps_i (e^eps_i - 1),
    which reduces to the usual formula for identical steps.
    """
    eps = np.asarray(epsilons, dtype=float)
    dls = np.asarray(deltas, dtype=float)
    steps = eps.size
    if steps == 0:
        return PrivacyBudget(0.0, 0.0, 0, method)
    if method == "naive":
        return PrivacyBudget(float(eps.sum()), float(dls.sum()), steps, method)
    if method != "advanced":
        raise PrivacyError(f"unknown composition {method!r}")
    if not 0.0 < delta_prime < 1.0:
        raise PrivacyError("delta_prime outside (0, 1)")
    if np.any(np.isinf(eps)):
        return PrivacyBudget(math.inf, float(dls.sum()) + delta_prime, steps, method)
    with np.errstate(over="ignore"):
        total = math.sqrt(2.0 * math.log(1.0 / delta_prime) * float(np.square(eps).sum()))
        total += float(np.sum(eps * np.expm1(eps)))
    return PrivacyBudget(total, float(dls.sum()) + delta_prime, steps, method)


@dataclass(frozen=True)
class AccountingRecord:
    step: int
    epsilon_step: float
    epsilon_total: float
    delta_total: float


def account(
    sigmas: Iterable[float],
    clip: float,
    batch_size: int,
    delta: float = 0.01,
    method: str = "naive",
    delta_prime: float = 1e-5,
) -> list[AccountingRecord]:
    """Running privacy budget for a sequence of per-step equivalent noise scales."""
    sens = SensitivitySpec(clip, batch_size)
    eps_steps: list[float] = []
    out = []
    for t, sigma in enumerate(sigmas, start=1):
        eps_steps.append(gaussian_epsilon(sigma, sens, delta))
        b = compose_heterogeneous(eps_steps, [delta] * t, method, delta_prime)
        out.append(AccountingRecord(t, eps_steps[-1], b.epsilon, b.delta))
    return out


def privacy_loss_exceedance(
    sigma: float, sensitivity: float, epsilon: float, n_samples: int, seed=None, two_sided: bool = False
) -> tuple[float, float]:
    """Empirical P[privacy loss > epsilon] for a scalar Gaussian mechanism.

    Draws outputs of f(D) + N(0, sigma^2) with f(D) - f(D') = ``sensitivity``
    and evaluates ln(p_D(o) / p_D'(o)) from the two densities. Returns the
    frequency of that loss exceeding ``epsilon`` (its magnitude, with
    ``two_sided``) and its Bernoulli standard error.
    """
    rng = np.random.default_rng(seed)
    f_d, f_dp = 0.0, -float(sensitivity)
    out = f_d + sigma * rng.standard_normal(n_samples)
    log_ratio = ((out - f_dp) ** 2 - (out - f_d) ** 2) / (2.0 * sigma**2)
    if two_sided:
        log_ratio = np.abs(log_ratio)
    freq = float(np.mean(log_ratio > epsilon))
    return freq, math.sqrt(freq * (1.0 - freq) / n_samples)
