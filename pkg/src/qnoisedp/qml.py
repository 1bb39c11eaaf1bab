"""Two-qubit variational classifier trained by parameter-shift gradient descent."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import privacy
from .measurement import Observable, fit_pt
from .pec import DEFAULT_MAX_TERMS, TermEvaluator, combine_exact, sample_exact_sum
from .qsim import Circuit, Feature, GateOp, NoiseModel, Param

log = logging.getLogger(__name__)

GATE_NOISE = NoiseModel(p1=0.05, p2=0.10)


@dataclass(frozen=True)
class Ansatz:
    """Angle encoding RY(pi x_j) on qubit j, then ``layers`` of RY/RZ on each qubit + CNOT(0, 1).

    The output is <I (x) Z>, i.e. Z on the CNOT target.
    """

    layers: int = 2
    qubits: int = 2

    @property
    def n_params(self) -> int:
        return 2 * self.qubits * self.layers

    @functools.cached_property
    def circuit(self) -> Circuit:
        ops = [GateOp("RY", (j,), Feature(j, math.pi)) for j in range(self.qubits)]
        k = 0
        for _ in range(self.layers):
            for j in range(self.qubits):
                ops.append(GateOp("RY", (j,), Param(k)))
                ops.append(GateOp("RZ", (j,), Param(k + 1)))
                k += 2
            for j in range(self.qubits - 1):
                ops.append(GateOp("CNOT", (j, j + 1)))
        return Circuit(self.qubits, tuple(ops), self.n_params, self.qubits)

    @property
    def observable(self) -> Observable:
        return Observable.from_label("I" * (self.qubits - 1) + "Z")


@dataclass(frozen=True)
class Estimator:
    """How a circuit output is obtained: noise model, shots per term (None = exact), PEC on/off."""

    noise: NoiseModel = field(default_factory=NoiseModel.noiseless)
    shots: int | None = None
    pec: bool = False
    basis: str = "depolarize"
    max_terms: int = DEFAULT_MAX_TERMS

    def __post_init__(self):
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be >= 1 or None")


@functools.lru_cache(maxsize=32)
def evaluator(ansatz: Ansatz, est: Estimator) -> TermEvaluator:
    return TermEvaluator(
        ansatz.circuit, est.noise, ansatz.observable, est.pec, est.basis, est.max_terms
    )


def evaluate(ansatz: Ansatz, thetas, xs, est: Estimator, rng=None) -> np.ndarray:
    """Circuit outputs for every (x, theta) pair, shape (len(xs), len(thetas))."""
    ev = evaluator(ansatz, est)
    means = ev.term_means(thetas, xs)
    if est.shots is None:
        return combine_exact(means, ev.etas)
    return sample_exact_sum(means, ev.etas, est.shots, np.random.default_rng(rng))


def classify(x, theta, est: Estimator | None = None, rng=None, ansatz: Ansatz | None = None) -> float:
    """Classifier output g(x; theta) in [-1, 1]; the predicted label is its sign."""
    ansatz = ansatz or Ansatz(len(theta) // 4)
    return float(evaluate(ansatz, [theta], [x], est or Estimator(), rng)[0, 0])


def predict(ansatz: Ansatz, theta, X, est: Estimator, rng=None) -> np.ndarray:
    g = evaluate(ansatz, [theta], X, est, rng)[:, 0]
    return np.where(g >= 0, 1, -1)


def hinge_loss(g, y):
    """Modified hinge loss 1 - y g."""
    return 1 - y * g


def shifted_thetas(theta) -> np.ndarray:
    """Rows theta + pi/2 e_k for every k, followed by theta - pi/2 e_k."""
    theta = np.asarray(theta, dtype=float)
    eye = np.eye(theta.size) * (math.pi / 2)
    return np.vstack([theta + eye, theta - eye])


def param_shift_grad(ansatz: Ansatz, theta, x, y, k: int, est: Estimator, rng=None) -> float:
    """d(1 - y g)/d theta_k = -y (g(theta_k + pi/2) - g(theta_k - pi/2)) / 2."""
    if not 0 <= k < ansatz.n_params:
        raise IndexError(f"parameter index {k} out of range")
    theta = np.asarray(theta, dtype=float)
    shift = np.zeros_like(theta)
    shift[k] = math.pi / 2
    g = evaluate(ansatz, [theta + shift, theta - shift], [x], est, rng)[0]
    return float(-y * 0.5 * (g[0] - g[1]))


def per_example_gradients(ansatz: Ansatz, theta, X, y, est: Estimator, rng=None) -> np.ndarray:
    """Hinge-loss gradients for every example, shape (m, n_params).

    Every example and shift direction gets its own independent shots.
    """
    p = ansatz.n_params
    g = evaluate(ansatz, shifted_thetas(theta), X, est, rng)
    return -np.asarray(y)[:, None] * 0.5 * (g[:, :p] - g[:, p:])


def gradient_replicates(ansatz: Ansatz, theta, x, y, est: Estimator, replicates: int, rng=None) -> np.ndarray:
    """Independent shot-noise replicates of the full gradient at one example, shape (R, n_params)."""
    if est.shots is None:
        raise ValueError("replicates need a finite shot count")
    ev = evaluator(ansatz, est)
    means = ev.term_means(shifted_thetas(theta), [x])[0]
    g = sample_exact_sum(means, ev.etas, est.shots, np.random.default_rng(rng), replicates)
    p = ansatz.n_params
    return -y * 0.5 * (g[:, :p] - g[:, p:])


def gradient_variance(ansatz: Ansatz, theta, x, est: Estimator) -> np.ndarray:
    """Exact shot-noise variance of each gradient component: (V(+) + V(-)) / 4."""
    if est.shots is None:
        return np.zeros(ansatz.n_params)
    ev = evaluator(ansatz, est)
    means = ev.term_means(shifted_thetas(theta), [x])[0]
    v = (1.0 - means**2) @ ev.etas**2 / est.shots
    p = ansatz.n_params
    return (v[:p] + v[p:]) / 4.0


def clip_gradient(grad, clip: float) -> np.ndarray:
    """grad / max(1, ||grad||_2 / clip)."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    grad = np.asarray(grad, dtype=float)
    return grad / max(1.0, float(np.linalg.norm(grad)) / clip)


def clip_rows(grads: np.ndarray, clip: float) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    return grads / np.maximum(1.0, norms / clip)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    iterations: int = 200
    shots: int | None = 1000
    clip: float = 0.7
    noise: NoiseModel = GATE_NOISE
    pec: bool = True
    seed: int = 0
    layers: int = 2
    basis: str = "depolarize"
    delta: float = 0.01
    composition: str = "naive"
    delta_prime: float = 1e-5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be >= 1")

    @property
    def estimator(self) -> Estimator:
        return Estimator(self.noise, self.shots, self.pec, self.basis)


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    loss: float
    train_acc: float
    test_acc: float
    pt: float
    gamma_sq: float
    sigma_min: float
    sigma_max: float
    epsilon_step: float
    epsilon_total: float
    delta_total: float
    max_clipped_norm: float


@dataclass
class TrainResult:
    thetas: list[np.ndarray]
    history: list[TrainRecord]
    config: TrainConfig

    @property
    def theta(self) -> np.ndarray:
        return self.thetas[-1]


class TrainingDiverged(RuntimeError):
    pass


def noise_statistics(ansatz: Ansatz, theta, X, est: Estimator) -> privacy.NoiseBounds:
    """Gradient noise bounds for the current step from the purity-fitted global error rate.

    The smallest fitted rate over the batch is used, so the bound is the
    most conservative across examples.
    """
    ev = evaluator(ansatz, est)
    if est.shots is None:
        return privacy.NoiseBounds(0.0, 0.0, 0.0, 0, ev.gamma_sq)
    if est.noise.is_noiseless:
        pt = 0.0
    else:
        pt = min(fit_pt(float(p), ansatz.qubits) for p in ev.purities(theta, X))
    return privacy.noise_bounds(pt, est.shots, ev.gamma_sq)


def train(data, cfg: TrainConfig, theta0=None) -> TrainResult:
    """Full-batch gradient descent with per-example clipping.

    Each iteration: per-example parameter-shift gradients, clip each to
    ``cfg.clip``, average, step. Metrics are measured after the step with
    the same estimator; the privacy columns account the step just taken.
    """
    ansatz = Ansatz(cfg.layers)
    est = cfg.estimator
    X, y = data.X_train, data.y_train
    if len(y) == 0:
        raise ValueError("empty training split")
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, grad_ss, eval_ss = ss.spawn(3)
    if theta0 is None:
        theta = np.random.default_rng(init_ss).uniform(-math.pi, math.pi, ansatz.n_params)
    else:
        theta = np.array(theta0, dtype=float)
    grad_rng = np.random.default_rng(grad_ss)
    eval_rng = np.random.default_rng(eval_ss)
    sens = privacy.SensitivitySpec(cfg.clip, len(y))

    thetas = [theta.copy()]
    history: list[TrainRecord] = []
    eps_steps: list[float] = []
    for t in range(1, cfg.iterations + 1):
        bounds = noise_statistics(ansatz, theta, X, est)
        sigma_star = privacy.equivalent_sigma([bounds] * ansatz.n_params)
        grads = clip_rows(per_example_gradients(ansatz, theta, X, y, est, grad_rng), cfg.clip)
        with np.errstate(invalid="ignore", over="ignore"):
            theta = theta - cfg.learning_rate * grads.mean(axis=0)
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(f"non-finite parameters after step {t}: {theta}")
        thetas.append(theta.copy())

        g_all = evaluate(ansatz, [theta], data.X, est, eval_rng)[:, 0]
        g_train = g_all[data.train_idx]
        loss = float(np.mean(hinge_loss(g_train, y)))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {t}: loss={loss}")
        pred = np.where(g_all >= 0, 1, -1)
        train_acc = float(np.mean(pred[data.train_idx] == y))
        test_acc = float(np.mean(pred[data.test_idx] == data.y_test)) if len(data.test_idx) else math.nan

        eps_steps.append(privacy.gaussian_epsilon(sigma_star, sens, cfg.delta))
        budget = privacy.compose_heterogeneous(
            eps_steps, [cfg.delta] * t, cfg.composition, cfg.delta_prime
        )
        history.append(
            TrainRecord(
                t, loss, train_acc, test_acc, bounds.pt, bounds.gamma_sq,
                bounds.sigma_min, bounds.sigma_max, eps_steps[-1],
                budget.epsilon, budget.delta, float(np.linalg.norm(grads, axis=1).max()),
            )
        )
        if t % 25 == 0:
            log.info("iter %d loss=%.4f train=%.3f test=%.3f", t, loss, train_acc, test_acc)
    return TrainResult(thetas, history, cfg)
