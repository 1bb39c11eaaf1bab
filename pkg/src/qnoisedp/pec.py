"""Probabilistic error cancellation for depolarizing gate noise.

Each noisy gate N o U is inverted by a signed combination of implementable
operations built from the noisy gate itself plus noise-free corrections
applied afterwards:

* ``"depolarize"`` basis: {N o U, R o N o U} where R replaces the gate's
  qubits with the maximally mixed state. Works for any arity.
* ``"pauli"`` basis (single-qubit gates only): {N o U, P o N o U for P in X, Y, Z}.

Circuit-level decompositions are the product over gates; term index order is
row-major in gate order (first gate slowest).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measurement import Observable, exact_expectation, sample_pm1_means, sample_shots
from .qsim import (
    Channel,
    Circuit,
    DensityMatrix,
    Feature,
    GateOp,
    NoiseModel,
    Param,
    SimulationError,
    apply_channel,
    apply_gate,
    embed_operator,
    full_depolarize,
    global_depolarizing,
    pauli_channel,
    run_circuit,
)

BASES = ("depolarize", "pauli")
DEFAULT_MAX_TERMS = 10_000


class TermCapExceeded(SimulationError):
    """Exact enumeration would exceed the configured term cap; use sampled mode."""


@dataclass(frozen=True, eq=False)
class ChannelOp:
    """A noise-free implementable channel step (Pauli correction, full depolarize, global noise)."""

    channel: Channel
    targets: tuple[int, ...] | None = None

    @property
    def label(self) -> str:
        return self.channel.label


def correction(kind: str, targets: Sequence[int]) -> ChannelOp:
    targets = tuple(targets)
    if kind == "depolarize":
        return ChannelOp(full_depolarize(len(targets)), targets)
    if kind in ("X", "Y", "Z") and len(targets) == 1:
        return ChannelOp(pauli_channel(kind), targets)
    raise SimulationError(f"unsupported correction {kind!r} on {targets}")


@dataclass(frozen=True, eq=False)
class QuasiProbRep:
    """Signed decomposition sum_i eta_i * (operation sequence)_i with sum_i eta_i = 1."""

    terms: tuple

    def __post_init__(self):
        terms = tuple((float(eta), tuple(ops)) for eta, ops in self.terms)
        if not terms:
            raise SimulationError("empty quasi-probability decomposition")
        total = math.fsum(eta for eta, _ in terms)
        if abs(total - 1.0) > 1e-12:
            raise SimulationError(f"quasi-probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "terms", terms)

    @property
    def etas(self) -> np.ndarray:
        return np.array([eta for eta, _ in self.terms])

    @property
    def gamma(self) -> float:
        return float(np.abs(self.etas).sum())

    @property
    def gamma_sq(self) -> float:
        """Sum of squared quasi-probabilities (the exact-sum variance factor)."""
        return float(np.square(self.etas).sum())

    def __len__(self) -> int:
        return len(self.terms)


def _fidelity_factor(p: float, arity: int) -> float:
    """Scale factor of non-identity Pauli components under local depolarizing."""
    n = 4**arity
    return 1.0 - n * p / (n - 1)


def inverse_coefficients(f: float, arity: int, basis: str = "depolarize") -> list[float]:
    """Quasi-probabilities inverting a depolarizing map with Pauli scale factor ``f``.

    ``depolarize``: a id + b R, with a + b = 1 on the identity and a = 1/f on Paulis.
    ``pauli``: a id + b (X.X + Y.Y + Z.Z), with a + 3b = 1 and a - b = 1/f.
    """
    if f <= 0:
        raise SimulationError("depolarizing rate too high: no finite quasi-probability inverse")
    if basis == "depolarize":
        a = 1.0 / f
        return [a, 1.0 - a]
    if basis == "pauli":
        if arity != 1:
            raise SimulationError("pauli basis is implemented for single-qubit noise only")
        b = (1.0 - 1.0 / f) / 4.0
        return [1.0 - 3.0 * b, b, b, b]
    raise SimulationError(f"unknown basis {basis!r}")


def decompose_gate(gate: GateOp, noise: NoiseModel, basis: str = "depolarize") -> QuasiProbRep:
    """Express the ideal ``gate`` through noisy implementable operations."""
    if noise.mode != "local":
        raise SimulationError("gate decomposition requires a per-gate local noise model")
    p = noise.gate_rate(gate)
    if p == 0:
        return QuasiProbRep(((1.0, (gate,)),))
    f = _fidelity_factor(p, gate.arity)
    if f <= 0:
        limit = 1.0 - 1.0 / 4**gate.arity
        raise SimulationError(f"depolarizing rate {p} >= {limit:g} has no finite inverse")
    eta = inverse_coefficients(f, gate.arity, basis if gate.arity == 1 else "depolarize")
    if len(eta) == 2:
        return QuasiProbRep(((eta[0], (gate,)), (eta[1], (gate, correction("depolarize", gate.targets)))))
    terms = [(eta[0], (gate,))]
    terms += [(e, (gate, correction(P, gate.targets))) for e, P in zip(eta[1:], "XYZ")]
    return QuasiProbRep(tuple(terms))


def decompose_global(pt: float, qubits: int) -> QuasiProbRep:
    """Inverse of the global depolarizing channel: {D, R o D} with R the full depolarizer."""
    noise = ChannelOp(global_depolarizing(pt, qubits))
    if pt == 0:
        return QuasiProbRep(((1.0, (noise,)),))
    a, b = inverse_coefficients(1.0 - pt, qubits, "depolarize")
    return QuasiProbRep(((a, (noise,)), (b, (noise, ChannelOp(full_depolarize(qubits))))))


def quasiprob_levels(
    circuit: Circuit, noise: NoiseModel, basis: str = "depolarize", mitigate: bool = True
) -> list[QuasiProbRep]:
    """Per-step decompositions whose product is the circuit decomposition.

    With ``mitigate=False`` every level holds only its bare noisy operation.
    Variant 0 of every level is always the bare noisy operation.
    """
    if basis not in BASES:
        raise SimulationError(f"unknown basis {basis!r}")
    levels = []
    for op in circuit.ops:
        if mitigate and noise.mode == "local":
            levels.append(decompose_gate(op, noise, basis))
        else:
            levels.append(QuasiProbRep(((1.0, (op,)),)))
    if noise.mode == "global" and noise.pt > 0:
        rep = decompose_global(noise.pt, circuit.qubits)
        levels.append(rep if mitigate else QuasiProbRep(((1.0, rep.terms[0][1]),)))
    return levels


def circuit_stats(levels: Sequence[QuasiProbRep]) -> tuple[float, float, int]:
    """(gamma, gamma_sq, term count) of the product decomposition without enumerating it."""
    gamma = math.prod(r.gamma for r in levels)
    gamma_sq = math.prod(r.gamma_sq for r in levels)
    count = math.prod(len(r) for r in levels)
    return gamma, gamma_sq, count


def circuit_quasiprob(
    circuit: Circuit,
    noise: NoiseModel,
    basis: str = "depolarize",
    max_terms: int = DEFAULT_MAX_TERMS,
) -> QuasiProbRep:
    """Product decomposition over all gates, with eta of a term the product of its gate etas."""
    levels = quasiprob_levels(circuit, noise, basis)
    _, _, count = circuit_stats(levels)
    if count > max_terms:
        raise TermCapExceeded(f"{count} terms exceeds cap {max_terms}; use sampled mode")
    terms = []
    for combo in itertools.product(*(r.terms for r in levels)):
        eta = math.prod(e for e, _ in combo)
        ops = tuple(op for _, seq in combo for op in seq)
        terms.append((eta, ops))
    return QuasiProbRep(tuple(terms))


def run_ops(ops, qubits: int, theta=None, x=None, noise: NoiseModel | None = None) -> DensityMatrix:
    """Run an implementable operation sequence from |0...0>.

    Gates pick up their local noise from ``noise``; :class:`ChannelOp` steps are noise-free.
    """
    noise = noise or NoiseModel.noiseless()
    rho = DensityMatrix.zero(qubits)
    for op in ops:
        if isinstance(op, GateOp):
            rho = apply_gate(rho, op, theta, x)
            ch = noise.gate_noise(op)
            if ch is not None:
                rho = apply_channel(rho, ch, op.targets)
        else:
            rho = apply_channel(rho, op.channel, op.targets)
    return rho


# ---------------------------------------------------------------------------
# Vectorised term evaluation in the Liouville representation
# ---------------------------------------------------------------------------


def _unitary_superop(u: np.ndarray) -> np.ndarray:
    return np.kron(u, u.conj())


def _as_rows(values, width: int) -> np.ndarray:
    if values is None:
        return np.zeros((1, width))
    if width == 0:
        return np.zeros((max(1, len(values)), 0))
    return np.atleast_2d(np.asarray(values, dtype=float)).reshape(-1, width)


class TermEvaluator:
    """Noisy expectation values of every term of a circuit decomposition.

    Uses row-major Liouville vectors: vec(E(rho)) = S vec(rho), and
    Tr(A rho) = vec(A^T) . vec(rho). Leading steps that depend only on
    features are propagated forward (and cached per feature vector); the
    remaining steps are propagated backward from the observable per
    parameter vector, so a batch costs one contraction.
    """

    def __init__(
        self,
        circuit: Circuit,
        noise: NoiseModel,
        observable: Observable,
        mitigate: bool = True,
        basis: str = "depolarize",
        max_terms: int = DEFAULT_MAX_TERMS,
    ):
        if observable.qubits != circuit.qubits:
            raise SimulationError("observable and circuit qubit counts differ")
        self.circuit = circuit
        self.noise = noise
        self.observable = observable
        self.levels = quasiprob_levels(circuit, noise, basis, mitigate)
        self.gamma, self.gamma_sq, self.n_terms = circuit_stats(self.levels)
        if self.n_terms > max_terms:
            raise TermCapExceeded(f"{self.n_terms} terms exceeds cap {max_terms}; use sampled mode")
        etas = np.ones(1)
        for r in self.levels:
            etas = np.multiply.outer(etas, r.etas).ravel()
        self.etas = etas
        n = circuit.qubits
        self._n = n
        self._dim2 = 4**n
        self._effect = observable.matrix().T.reshape(-1)
        self._const_cache: dict[tuple[int, int], np.ndarray] = {}
        self._noise_cache: dict[int, np.ndarray] = {}
        self._prefix_cache: dict[bytes, np.ndarray] = {}

        deps = [self._level_deps(r) for r in self.levels]
        split = 0
        while split < len(deps) and not deps[split][0]:
            split += 1
        self.split = split
        self._separable = not any(d[1] for d in deps[split:])

    @staticmethod
    def _level_deps(rep: QuasiProbRep) -> tuple[bool, bool]:
        uses_p = uses_x = False
        for _, ops in rep.terms:
            for op in ops:
                if isinstance(op, GateOp):
                    uses_p |= isinstance(op.angle, Param)
                    uses_x |= isinstance(op.angle, Feature)
        return uses_p, uses_x

    def _op_superop(self, op, theta, x) -> np.ndarray:
        if isinstance(op, GateOp):
            key = id(op)
            u = embed_operator(op.unitary(theta, x), op.targets, self._n)
            s = _unitary_superop(u)
            if key not in self._noise_cache:
                ch = self.noise.gate_noise(op)
                self._noise_cache[key] = None if ch is None else ch.superoperator(op.targets, self._n)
            ns = self._noise_cache[key]
            return s if ns is None else ns @ s
        key = id(op)
        if key not in self._noise_cache:
            self._noise_cache[key] = op.channel.superoperator(op.targets, self._n)
        return self._noise_cache[key]

    def _level_superops(self, i: int, theta, x) -> np.ndarray:
        rep = self.levels[i]
        out = np.empty((len(rep), self._dim2, self._dim2), dtype=complex)
        for k, (_, ops) in enumerate(rep.terms):
            s = np.eye(self._dim2, dtype=complex)
            for op in ops:
                s = self._op_superop(op, theta, x) @ s
            out[k] = s
        return out

    def _initial(self) -> np.ndarray:
        r0 = np.zeros((1, self._dim2), dtype=complex)
        r0[0, 0] = 1.0
        return r0

    @staticmethod
    def _forward(states: np.ndarray, sops: np.ndarray) -> np.ndarray:
        return np.einsum("kab,tb->tka", sops, states).reshape(-1, states.shape[1])

    @staticmethod
    def _backward(effects: np.ndarray, sops: np.ndarray) -> np.ndarray:
        return np.einsum("kba,tb->kta", sops, effects).reshape(-1, effects.shape[1])

    def _prefix_states(self, x) -> np.ndarray:
        key = np.asarray(x, dtype=float).tobytes()
        hit = self._prefix_cache.get(key)
        if hit is None:
            states = self._initial()
            for i in range(self.split):
                states = self._forward(states, self._level_superops(i, None, x))
            if len(self._prefix_cache) > 50_000:
                self._prefix_cache.clear()
            self._prefix_cache[key] = hit = states
        return hit

    def _suffix_effects(self, theta) -> np.ndarray:
        effects = self._effect[None, :]
        for i in reversed(range(self.split, len(self.levels))):
            effects = self._backward(effects, self._level_superops(i, theta, None))
        return effects

    def term_means(self, thetas, xs) -> np.ndarray:
        """Exact noisy expectations, shape (len(xs), len(thetas), n_terms)."""
        c = self.circuit
        thetas = _as_rows(thetas, c.n_params)
        xs = _as_rows(xs, c.n_features)
        for t in thetas:
            c._check_bound(t, xs[0] if len(xs) else None)
        for x in xs:
            c._check_bound(thetas[0] if len(thetas) else None, x)
        if self._separable:
            pre = np.stack([self._prefix_states(x) for x in xs])
            suf = np.stack([self._suffix_effects(t) for t in thetas])
            out = np.einsum("xpa,tsa->xtps", pre, suf).real
            return out.reshape(len(xs), len(thetas), self.n_terms)
        out = np.empty((len(xs), len(thetas), self.n_terms))
        for i, x in enumerate(xs):
            for j, t in enumerate(thetas):
                states = self._initial()
                for lvl in range(len(self.levels)):
                    states = self._forward(states, self._level_superops(lvl, t, x))
                out[i, j] = (states @ self._effect).real
        return out

    def noisy_states(self, theta, xs) -> np.ndarray:
        """Row-major vectorised output states of the bare noisy circuit, shape (len(xs), 4^q)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self._separable:
            pre = np.stack([self._prefix_states(x)[0] for x in xs])
            chain = np.eye(self._dim2, dtype=complex)
            for lvl in range(self.split, len(self.levels)):
                chain = self._level_superops(lvl, theta, None)[0] @ chain
            return pre @ chain.T
        out = np.empty((len(xs), self._dim2), dtype=complex)
        for i, x in enumerate(xs):
            s = self._initial()[0]
            for lvl in range(len(self.levels)):
                s = self._level_superops(lvl, theta, x)[0] @ s
            out[i] = s
        return out

    def purities(self, theta, xs) -> np.ndarray:
        v = self.noisy_states(theta, xs)
        return np.real(np.einsum("ia,ia->i", v.conj(), v))


def combine_exact(term_means: np.ndarray, etas: np.ndarray) -> np.ndarray:
    return term_means @ etas


ZERO_MEAN_TOL = 1e-12


def sample_exact_sum(
    term_means: np.ndarray,
    etas: np.ndarray,
    shots: int,
    rng: np.random.Generator,
    replicates: int | None = None,
    chunk_elems: int = 2_000_000,
) -> np.ndarray:
    """Mitigated estimates sum_t eta_t * (shots-mean of term t), independent shots per term.

    ``term_means`` has trailing axis of length n_terms; ``replicates`` prepends
    a replicate axis. Terms whose expectation is zero and that share the same
    eta are drawn as one binomial over their pooled shots, which has the same
    distribution as drawing them separately. Draw order is fixed, so results
    depend on the generator state only.
    """
    if shots < 1:
        raise SimulationError("shots must be >= 1")
    term_means = np.asarray(term_means, dtype=float)
    etas = np.asarray(etas, dtype=float)
    lead = term_means.shape[:-1]
    flat = term_means.reshape(-1, term_means.shape[-1])
    n_rows = flat.shape[0]
    reps = 1 if replicates is None else replicates

    eta_keys, eta_group = np.unique(etas, return_inverse=True)
    zero = np.abs(flat) <= ZERO_MEAN_TOL
    onehot = np.zeros((etas.size, eta_keys.size))
    onehot[np.arange(etas.size), eta_group] = 1.0
    pooled_trials = shots * np.rint(zero @ onehot).astype(np.int64)  # (rows, groups)
    nz_rows, nz_cols = np.nonzero(~zero)
    nz_p = np.clip((1.0 + flat[nz_rows, nz_cols]) / 2.0, 0.0, 1.0)
    nz_eta = etas[nz_cols]

    out = np.empty((reps, n_rows))
    width = pooled_trials.size + nz_p.size
    step = max(1, chunk_elems // max(width, 1))
    for start in range(0, reps, step):
        r = min(reps, start + step) - start
        k = rng.binomial(pooled_trials, 0.5, size=(r,) + pooled_trials.shape)
        block = ((2.0 * k - pooled_trials) / shots) @ eta_keys
        if nz_p.size:
            kn = rng.binomial(shots, nz_p, size=(r, nz_p.size))
            contrib = (2.0 * kn / shots - 1.0) * nz_eta
            for i in range(r):
                block[i] += np.bincount(nz_rows, weights=contrib[i], minlength=n_rows)
        out[start : start + r] = block
    out = out.reshape((reps,) + lead)
    return out[0] if replicates is None else out


@dataclass(frozen=True)
class MitigatedEstimate:
    mean: float
    gamma: float
    gamma_sq: float
    shots_per_term: int | None
    mode: str
    n_terms: int = field(default=1)


def pec_estimate(
    circuit: Circuit,
    theta,
    x,
    observable: Observable,
    noise: NoiseModel,
    shots: int | None,
    mode: str = "exact-sum",
    seed=None,
    basis: str = "depolarize",
    max_terms: int = DEFAULT_MAX_TERMS,
) -> MitigatedEstimate:
    """Error-mitigated estimate of Tr(A rho_ideal).

    ``exact-sum`` measures every term with ``shots`` shots (``shots=None`` uses
    exact term expectations) and returns sum_t eta_t <A>_t. ``sampled`` draws
    ``shots`` single-shot circuits from |eta|/gamma, one gate at a time, and
    averages gamma * sign(eta) * outcome.
    """
    if shots is not None and shots < 1:
        raise SimulationError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    if mode == "exact-sum":
        ev = TermEvaluator(circuit, noise, observable, True, basis, max_terms)
        means = ev.term_means(theta, x)[0, 0]
        if shots is None:
            value = float(combine_exact(means, ev.etas))
        elif ev.n_terms == 1:
            # nothing to cancel: identical to plain measurement of the circuit
            value = sample_shots(run_circuit(circuit, theta, x, noise), observable, shots, rng).mean
        else:
            value = float(sample_exact_sum(means, ev.etas, shots, rng))
        return MitigatedEstimate(value, ev.gamma, ev.gamma_sq, shots, mode, ev.n_terms)
    if mode == "sampled":
        if shots is None:
            raise SimulationError("sampled mode needs a finite shot count")
        return _sampled_estimate(circuit, theta, x, observable, noise, shots, rng, basis)
    raise SimulationError(f"unknown PEC mode {mode!r}")


def _sampled_estimate(circuit, theta, x, observable, noise, shots, rng, basis) -> MitigatedEstimate:
    levels = quasiprob_levels(circuit, noise, basis)
    gamma, gamma_sq, count = circuit_stats(levels)
    picks = np.stack(
        [rng.choice(len(r), size=shots, p=np.abs(r.etas) / r.gamma) for r in levels], axis=1
    )
    signs = np.prod([np.sign(r.etas)[picks[:, i]] for i, r in enumerate(levels)], axis=0)
    uniq, inverse = np.unique(picks, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    total = 0.0
    for u_idx, alpha in enumerate(uniq):
        ops = tuple(op for r, a in zip(levels, alpha) for op in r.terms[a][1])
        mu = exact_expectation(run_ops(ops, circuit.qubits, theta, x, noise), observable)
        sel = inverse == u_idx
        n_plus = int((signs[sel] > 0).sum())
        n_minus = int(sel.sum()) - n_plus
        for n_s, sgn in ((n_plus, 1.0), (n_minus, -1.0)):
            if n_s:
                k = rng.binomial(n_s, min(max((1 + mu) / 2, 0.0), 1.0))
                total += sgn * (2.0 * k - n_s)
    return MitigatedEstimate(gamma * total / shots, gamma, gamma_sq, shots, "sampled", count)
