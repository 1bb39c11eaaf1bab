"""Dense density-matrix simulation: states, gates, Kraus channels and noise models.

Qubit 0 is the leftmost tensor factor, so for two qubits the computational
basis is ordered |q0 q1> = |00>, |01>, |10>, |11>.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ATOL = 1e-10

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}

CNOT = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)

ROTATIONS = frozenset({"RY", "RZ"})
FIXED_GATES = {"X": X, "Y": Y, "Z": Z, "I": I2, "CNOT": CNOT}
GATE_ARITY = {"RY": 1, "RZ": 1, "X": 1, "Y": 1, "Z": 1, "I": 1, "CNOT": 2}


class SimulationError(ValueError):
    """Raised for malformed states, gates, channels or circuits."""


def pauli_string(label: str) -> np.ndarray:
    """Tensor product of single-qubit Paulis, e.g. ``pauli_string("IZ")``."""
    out = np.ones((1, 1), dtype=complex)
    for ch in label:
        out = np.kron(out, PAULIS[ch])
    return out


def _pauli_labels(n_qubits: int) -> list[str]:
    labels = [""]
    for _ in range(n_qubits):
        labels = [a + b for a in labels for b in "IXYZ"]
    return labels


def embed_operator(op: np.ndarray, targets: Sequence[int], n_qubits: int) -> np.ndarray:
    """Lift ``op`` acting on ``targets`` (in that order) to the full register."""
    k = len(targets)
    if op.shape != (2**k, 2**k):
        raise SimulationError(f"operator shape {op.shape} does not match {k} targets")
    if len(set(targets)) != k:
        raise SimulationError(f"repeated target in {tuple(targets)}")
    for t in targets:
        if not 0 <= t < n_qubits:
            raise SimulationError(f"qubit index {t} out of range for {n_qubits} qubits")
    if k == n_qubits and tuple(targets) == tuple(range(n_qubits)):
        return op.astype(complex, copy=True)
    dim = 2**n_qubits
    op_t = op.reshape([2] * (2 * k))
    eye = np.eye(dim, dtype=complex).reshape([2] * (2 * n_qubits))
    full = np.tensordot(op_t, eye, axes=(list(range(k, 2 * k)), list(targets)))
    full = np.moveaxis(full, list(range(k)), list(targets))
    return full.reshape(dim, dim)


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """A Hermitian, positive semidefinite, unit-trace operator on ``qubits`` qubits."""

    matrix: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SimulationError(f"density matrix must be square, got shape {m.shape}")
        q = int(round(math.log2(m.shape[0]))) if m.shape[0] > 0 else -1
        if q < 0 or 2**q != m.shape[0]:
            raise SimulationError(f"dimension {m.shape[0]} is not a power of two")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.check:
            self.validate()

    @property
    def qubits(self) -> int:
        return int(round(math.log2(self.matrix.shape[0])))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def validate(self, atol: float = ATOL) -> None:
        m = self.matrix
        if not np.all(np.isfinite(m)):
            raise SimulationError("density matrix has non-finite entries")
        if np.max(np.abs(m - m.conj().T)) > atol:
            raise SimulationError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1.0) > atol:
            raise SimulationError(f"density matrix trace {np.trace(m).real:.3g} != 1")
        if np.linalg.eigvalsh((m + m.conj().T) / 2).min() < -atol:
            raise SimulationError("density matrix is not positive semidefinite")

    def allclose(self, other: "DensityMatrix", atol: float = ATOL) -> bool:
        return self.matrix.shape == other.matrix.shape and bool(
            np.allclose(self.matrix, other.matrix, atol=atol, rtol=0)
        )

    @classmethod
    def zero(cls, qubits: int) -> "DensityMatrix":
        m = np.zeros((2**qubits, 2**qubits), dtype=complex)
        m[0, 0] = 1.0
        return cls(m)

    @classmethod
    def basis(cls, bits: str) -> "DensityMatrix":
        """Computational basis state from a bit string such as ``"01"``."""
        idx = int(bits, 2)
        m = np.zeros((2 ** len(bits), 2 ** len(bits)), dtype=complex)
        m[idx, idx] = 1.0
        return cls(m)

    @classmethod
    def maximally_mixed(cls, qubits: int) -> "DensityMatrix":
        d = 2**qubits
        return cls(np.eye(d, dtype=complex) / d)

    @classmethod
    def from_statevector(cls, psi) -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def random(cls, qubits: int, rng: np.random.Generator, rank: int | None = None) -> "DensityMatrix":
        """Random mixed state from a Ginibre ensemble of the given rank."""
        d = 2**qubits
        rank = d if rank is None else rank
        g = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
        m = g @ g.conj().T
        m = (m + m.conj().T) / 2
        return cls(m / np.trace(m).real)


def purity(rho: DensityMatrix) -> float:
    """Tr[rho^2]."""
    m = rho.matrix
    return float(np.real(np.vdot(m, m)))


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Channel:
    """A CPTP map given by Kraus operators on ``arity`` qubits."""

    kraus_ops: tuple
    label: str = "channel"
    arity: int = field(default=0)

    def __post_init__(self):
        ops = tuple(np.array(k, dtype=complex) for k in self.kraus_ops)
        if not ops:
            raise SimulationError("channel needs at least one Kraus operator")
        d = ops[0].shape[0]
        arity = int(round(math.log2(d)))
        if 2**arity != d or any(k.shape != (d, d) for k in ops):
            raise SimulationError("Kraus operators must be square with power-of-two dimension")
        if self.arity and self.arity != arity:
            raise SimulationError(f"arity {self.arity} does not match Kraus dimension {d}")
        tp = sum(k.conj().T @ k for k in ops)
        if np.max(np.abs(tp - np.eye(d))) > ATOL:
            raise SimulationError(f"Kraus set for {self.label!r} is not trace preserving")
        for k in ops:
            k.setflags(write=False)
        object.__setattr__(self, "kraus_ops", ops)
        object.__setattr__(self, "arity", arity)

    def superoperator(self, targets: Sequence[int] | None = None, n_qubits: int | None = None) -> np.ndarray:
        """Row-major Liouville matrix S with vec(E(rho)) = S @ vec(rho)."""
        if targets is None:
            ops = self.kraus_ops
        else:
            ops = [embed_operator(k, targets, n_qubits) for k in self.kraus_ops]
        return sum(np.kron(k, k.conj()) for k in ops)


def depolarizing(p: float, arity: int = 1) -> Channel:
    """Local depolarizing channel (1-p) rho + p/(4^k - 1) sum_P P rho P over non-identity Paulis."""
    if not 0.0 <= p <= 1.0:
        raise SimulationError(f"depolarizing probability {p} outside [0, 1]")
    labels = _pauli_labels(arity)
    w = p / (len(labels) - 1)
    ops = [math.sqrt(1.0 - p) * pauli_string(labels[0])]
    ops += [math.sqrt(w) * pauli_string(lab) for lab in labels[1:]]
    return Channel(tuple(ops), label=f"depol{arity}({p:g})")


def global_depolarizing(p: float, qubits: int) -> Channel:
    """(1 - p) rho + p I / 2^q, written over the full Pauli group."""
    if not 0.0 <= p <= 1.0:
        raise SimulationError(f"depolarizing probability {p} outside [0, 1]")
    labels = _pauli_labels(qubits)
    d2 = len(labels)
    ops = [math.sqrt(1.0 - p + p / d2) * pauli_string(labels[0])]
    ops += [math.sqrt(p / d2) * pauli_string(lab) for lab in labels[1:]]
    return Channel(tuple(ops), label=f"global_depol({p:g})")


def full_depolarize(arity: int) -> Channel:
    """Replace the targeted qubits with the maximally mixed state."""
    return global_depolarizing(1.0, arity)


def pauli_channel(label: str) -> Channel:
    return Channel((pauli_string(label),), label=label)


def apply_channel(rho: DensityMatrix, channel: Channel, targets: Sequence[int] | None = None) -> DensityMatrix:
    """Return sum_i K_i rho K_i^dagger, with the channel acting on ``targets``."""
    q = rho.qubits
    if targets is None:
        if channel.arity != q:
            raise SimulationError(f"channel arity {channel.arity} != register size {q}")
        ops = channel.kraus_ops
    else:
        if len(targets) != channel.arity:
            raise SimulationError(f"channel arity {channel.arity} != {len(targets)} targets")
        ops = [embed_operator(k, targets, q) for k in channel.kraus_ops]
    m = rho.matrix
    out = sum(k @ m @ k.conj().T for k in ops)
    return DensityMatrix(out, check=False)


# ---------------------------------------------------------------------------
# Gates and circuits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    """Angle slot bound to the trainable parameter vector."""

    index: int


@dataclass(frozen=True)
class Feature:
    """Angle slot bound to ``scale * x[index]``."""

    index: int
    scale: float = 1.0


Angle = float | Param | Feature | None


def rotation_matrix(kind: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    if kind == "RY":
        return np.array([[c, -s], [s, c]], dtype=complex)
    if kind == "RZ":
        return np.array([[c - 1j * s, 0], [0, c + 1j * s]], dtype=complex)
    raise SimulationError(f"unknown rotation {kind!r}")


@dataclass(frozen=True)
class GateOp:
    kind: str
    targets: tuple[int, ...]
    angle: Angle = None

    def __post_init__(self):
        if self.kind not in GATE_ARITY:
            raise SimulationError(f"unknown gate kind {self.kind!r}")
        targets = tuple(int(t) for t in self.targets)
        object.__setattr__(self, "targets", targets)
        if len(targets) != GATE_ARITY[self.kind]:
            raise SimulationError(f"{self.kind} acts on {GATE_ARITY[self.kind]} qubit(s), got {targets}")
        if len(set(targets)) != len(targets):
            raise SimulationError(f"repeated target in {targets}")
        if self.kind in ROTATIONS:
            if self.angle is None:
                raise SimulationError(f"{self.kind} requires an angle")
            if isinstance(self.angle, (int, float)) and not math.isfinite(self.angle):
                raise SimulationError(f"non-finite angle {self.angle}")
        elif self.angle is not None:
            raise SimulationError(f"{self.kind} takes no angle")

    @property
    def arity(self) -> int:
        return len(self.targets)

    def resolve_angle(self, theta=None, x=None) -> float | None:
        a = self.angle
        if isinstance(a, Param):
            if theta is None or a.index >= len(theta):
                raise SimulationError(f"unbound parameter slot {a.index}")
            a = float(theta[a.index])
        elif isinstance(a, Feature):
            if x is None or a.index >= len(x):
                raise SimulationError(f"unbound feature slot {a.index}")
            a = a.scale * float(x[a.index])
        if a is not None and not math.isfinite(a):
            raise SimulationError(f"non-finite angle {a}")
        return a

    def unitary(self, theta=None, x=None) -> np.ndarray:
        """Local (2^arity square) unitary of the gate with its slots bound."""
        if self.kind in ROTATIONS:
            return rotation_matrix(self.kind, self.resolve_angle(theta, x))
        return FIXED_GATES[self.kind]


def apply_gate(rho: DensityMatrix, gate: GateOp, theta=None, x=None) -> DensityMatrix:
    """Return U rho U^dagger with U the gate embedded in the full register."""
    if gate.kind == "I":
        for t in gate.targets:
            if not 0 <= t < rho.qubits:
                raise SimulationError(f"qubit index {t} out of range for {rho.qubits} qubits")
        return rho
    u = embed_operator(gate.unitary(theta, x), gate.targets, rho.qubits)
    return DensityMatrix(u @ rho.matrix @ u.conj().T, check=False)


@dataclass(frozen=True)
class Circuit:
    qubits: int
    ops: tuple[GateOp, ...]
    n_params: int = 0
    n_features: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        for op in self.ops:
            for t in op.targets:
                if not 0 <= t < self.qubits:
                    raise SimulationError(f"{op.kind} targets qubit {t} outside {self.qubits}-qubit register")
            if isinstance(op.angle, Param) and op.angle.index >= self.n_params:
                raise SimulationError(f"parameter slot {op.angle.index} does not exist")
            if isinstance(op.angle, Feature) and op.angle.index >= self.n_features:
                raise SimulationError(f"feature slot {op.angle.index} does not exist")

    def _check_bound(self, theta, x):
        theta = np.zeros(0) if theta is None else np.asarray(theta, dtype=float)
        x = np.zeros(0) if x is None else np.asarray(x, dtype=float)
        if theta.shape != (self.n_params,):
            raise SimulationError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        if x.shape != (self.n_features,):
            raise SimulationError(f"expected {self.n_features} features, got shape {x.shape}")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(x))):
            raise SimulationError("non-finite parameter or feature value")
        return theta, x


NOISE_MODES = ("local", "global", "noiseless")


@dataclass(frozen=True)
class NoiseModel:
    """Depolarizing noise attached to a circuit.

    ``local`` applies a depolarizing channel after every gate (rate ``p1`` for
    single-qubit gates, ``p2`` for two-qubit gates on both qubits jointly).
    ``global`` runs the circuit noiselessly and then applies one global
    depolarizing channel of rate ``pt``.
    """

    p1: float = 0.0
    p2: float = 0.0
    mode: str = "local"
    pt: float = 0.0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise SimulationError(f"unknown noise mode {self.mode!r}")
        for name in ("p1", "p2", "pt"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimulationError(f"{name}={v} outside [0, 1]")

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(mode="noiseless")

    @classmethod
    def global_(cls, pt: float) -> "NoiseModel":
        return cls(mode="global", pt=pt)

    def gate_rate(self, gate: GateOp) -> float:
        if self.mode != "local":
            return 0.0
        return self.p1 if gate.arity == 1 else self.p2

    def gate_noise(self, gate: GateOp) -> Channel | None:
        p = self.gate_rate(gate)
        return depolarizing(p, gate.arity) if p > 0 else None

    @property
    def is_noiseless(self) -> bool:
        if self.mode == "noiseless":
            return True
        if self.mode == "global":
            return self.pt == 0.0
        return self.p1 == 0.0 and self.p2 == 0.0


def run_circuit(circuit: Circuit, theta=None, x=None, noise: NoiseModel | None = None) -> DensityMatrix:
    """Simulate ``circuit`` from |0...0> under ``noise``."""
    noise = noise or NoiseModel.noiseless()
    theta, x = circuit._check_bound(theta, x)
    rho = DensityMatrix.zero(circuit.qubits)
    for op in circuit.ops:
        rho = apply_gate(rho, op, theta, x)
        ch = noise.gate_noise(op)
        if ch is not None:
            rho = apply_channel(rho, ch, op.targets)
    if noise.mode == "global" and noise.pt > 0:
        rho = apply_channel(rho, global_depolarizing(noise.pt, circuit.qubits))
    return rho
