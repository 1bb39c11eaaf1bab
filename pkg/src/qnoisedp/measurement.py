"""Observables, exact and shot-sampled expectations, and the depolarized shot-variance model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .qsim import DensityMatrix, SimulationError


@dataclass(frozen=True, eq=False)
class Observable:
    """Computational-basis diagonal observable with eigenvalues in {+1, -1}."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        ev = np.array(self.eigenvalues, dtype=float).ravel()
        n = ev.size
        if n == 0 or n & (n - 1):
            raise SimulationError(f"observable needs 2^q eigenvalues, got {n}")
        if not np.all(np.isfinite(ev)):
            raise SimulationError("observable eigenvalues must be finite")
        if not np.all(np.abs(ev) == 1.0):
            raise SimulationError("only +-1-valued diagonal observables are supported")
        ev.setflags(write=False)
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def qubits(self) -> int:
        return int(round(math.log2(self.eigenvalues.size)))

    @classmethod
    def from_label(cls, label: str) -> "Observable":
        """Tensor product of I and Z, e.g. ``"IZ"`` for Z on qubit 1 of two."""
        ev = np.ones(1)
        for ch in label:
            if ch == "I":
                ev = np.kron(ev, [1.0, 1.0])
            elif ch == "Z":
                ev = np.kron(ev, [1.0, -1.0])
            else:
                raise SimulationError(f"label {label!r} may only contain I and Z")
        return cls(ev)

    def matrix(self) -> np.ndarray:
        return np.diag(self.eigenvalues).astype(complex)


@dataclass(frozen=True)
class ExpectationEstimate:
    mean: float
    shots: int
    variance: float
    """Unbiased estimate of the variance of ``mean`` (sample variance / shots)."""
    outcomes: tuple | None = None


def _check_dims(rho: DensityMatrix, obs: Observable):
    if rho.dim != obs.eigenvalues.size:
        raise SimulationError(f"observable on {obs.qubits} qubits, state on {rho.qubits}")


def exact_expectation(rho: DensityMatrix, obs: Observable) -> float:
    """Tr(A rho) for a diagonal observable."""
    _check_dims(rho, obs)
    return float(np.dot(obs.eigenvalues, np.real(np.diag(rho.matrix))))


def outcome_probabilities(rho: DensityMatrix) -> np.ndarray:
    p = np.real(np.diag(rho.matrix)).copy()
    if abs(p.sum() - 1.0) > 1e-9 or p.min() < -1e-9:
        raise SimulationError(f"diagonal of state is not a probability vector (sum={p.sum():.12g})")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def sample_shots(
    rho: DensityMatrix,
    obs: Observable,
    shots: int,
    seed=None,
    keep_outcomes: bool = False,
) -> ExpectationEstimate:
    """Measure ``obs`` on ``shots`` independent copies of ``rho``."""
    if shots < 1:
        raise SimulationError("shots must be >= 1")
    _check_dims(rho, obs)
    probs = outcome_probabilities(rho)
    rng = np.random.default_rng(seed)
    ev = obs.eigenvalues
    if keep_outcomes:
        draws = ev[rng.choice(ev.size, size=shots, p=probs)]
        mean = float(draws.mean())
        var = float(draws.var(ddof=1) / shots) if shots > 1 else math.nan
        return ExpectationEstimate(mean, shots, var, tuple(draws.tolist()))
    # +-1 spectrum: the number of +1 outcomes is binomial
    k = rng.binomial(shots, min(float(probs[ev > 0].sum()), 1.0))
    mean = 2.0 * k / shots - 1.0
    if shots == 1:
        return ExpectationEstimate(mean, 1, math.nan)
    return ExpectationEstimate(mean, shots, (1.0 - mean**2) / (shots - 1))


def sample_pm1_means(mu, shots: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Shot means of a +-1 observable with exact expectation ``mu``.

    Vectorised over ``mu``; ``size`` prepends replicate axes.
    """
    mu = np.asarray(mu, dtype=float)
    p_plus = np.clip((1.0 + mu) / 2.0, 0.0, 1.0)
    shape = mu.shape if size is None else tuple(np.atleast_1d(size)) + mu.shape
    k = rng.binomial(shots, np.broadcast_to(p_plus, shape))
    return 2.0 * k / shots - 1.0


# ---------------------------------------------------------------------------
# Global depolarizing fit and the variance function h
# ---------------------------------------------------------------------------


def depolarized_purity(pt: float, qubits: int) -> float:
    """Purity of a pure state after global depolarizing at rate ``pt``."""
    d = 2**qubits
    return (1 - pt) ** 2 + pt * (1 - pt) / 2 ** (qubits - 1) + pt**2 / d


def fit_pt(purity: float, qubits: int, atol: float = 1e-9) -> float:
    """Invert :func:`depolarized_purity` on the branch continuous with p=0 at purity 1.

    The quadratic reduces to c p^2 - 2 c p + (1 - purity) = 0 with
    c = 1 - 2^-q, whose smaller root is 1 - sqrt((purity - 2^-q) / c).
    """
    floor = 2.0**-qubits
    if not (floor - atol <= purity <= 1 + atol):
        raise SimulationError(f"purity {purity} outside physical range [{floor}, 1]")
    c = 1.0 - floor
    disc = min(max((purity - floor) / c, 0.0), 1.0)
    return float(min(max(1.0 - math.sqrt(disc), 0.0), 1.0))


@dataclass(frozen=True)
class VarianceModel:
    pt: float
    mu: float
    """Noiseless expectation Tr(A rho)."""
    shots: int

    def __post_init__(self):
        if not 0.0 <= self.pt <= 1.0:
            raise SimulationError(f"pt={self.pt} outside [0, 1]")
        if abs(self.mu) > 1.0 + 1e-12:
            raise SimulationError(f"|mu|={abs(self.mu)} exceeds the spectral bound 1")
        if self.shots < 1:
            raise SimulationError("shots must be >= 1")


def variance_h(vm: VarianceModel) -> float:
    """Variance of the n-shot mean of a traceless +-1 observable after global depolarizing.

    A single shot has E[o] = (1 - pt) mu (the I/2^q part contributes Tr(A)/2^q = 0)
    and E[o^2] = 1, so Var[o] = 1 - (1 - pt)^2 mu^2.
    """
    mu = min(max(vm.mu, -1.0), 1.0)
    return (1.0 - (1.0 - vm.pt) ** 2 * mu**2) / vm.shots


def h_bounds(pt: float, shots: int) -> tuple[float, float]:
    """Extremes of :func:`variance_h` over all states: |mu| = 1 and mu = 0."""
    if shots < 1:
        raise SimulationError("shots must be >= 1")
    return (1.0 - (1.0 - pt) ** 2) / shots, 1.0 / shots


def shape_statistics(samples) -> tuple[float, float]:
    """Sample skewness and excess kurtosis (bias-corrected)."""
    samples = np.asarray(samples, dtype=float)
    return (
        float(stats.skew(samples, bias=False)),
        float(stats.kurtosis(samples, fisher=True, bias=False)),
    )


def looks_gaussian(samples, max_skew: float = 0.1, max_excess_kurtosis: float = 0.2) -> bool:
    s, k = shape_statistics(samples)
    return abs(s) <= max_skew and abs(k) <= max_excess_kurtosis
