import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from qnoisedp.measurement import Observable, exact_expectation
from qnoisedp.qsim import (
    CNOT,
    X,
    Y,
    Z,
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
    depolarizing,
    embed_operator,
    full_depolarize,
    global_depolarizing,
    purity,
    run_circuit,
)

ALL_GATES = [
    GateOp("RY", (0,), 0.37),
    GateOp("RZ", (1,), -1.2),
    GateOp("X", (0,)),
    GateOp("Y", (1,)),
    GateOp("Z", (0,)),
    GateOp("I", (1,)),
    GateOp("CNOT", (0, 1)),
    GateOp("CNOT", (1, 0)),
]


def assert_valid(rho: DensityMatrix, atol=1e-10):
    m = rho.matrix
    assert np.max(np.abs(m - m.conj().T)) <= atol
    assert abs(np.trace(m) - 1) <= atol
    assert np.linalg.eigvalsh((m + m.conj().T) / 2).min() >= -atol


class TestDensityMatrix:
    def test_zero_state(self):
        rho = DensityMatrix.zero(2)
        assert rho.qubits == 2
        assert rho.matrix[0, 0] == 1
        assert purity(rho) == pytest.approx(1.0)

    def test_rejects_non_hermitian(self):
        with pytest.raises(SimulationError):
            DensityMatrix(np.array([[1, 1], [0, 0]]))

    def test_rejects_bad_trace(self):
        with pytest.raises(SimulationError):
            DensityMatrix(np.eye(2))

    def test_rejects_negative(self):
        with pytest.raises(SimulationError):
            DensityMatrix(np.diag([1.5, -0.5]))

    def test_rejects_non_power_of_two(self):
        with pytest.raises(SimulationError):
            DensityMatrix(np.eye(3) / 3)

    def test_matrix_is_read_only(self):
        rho = DensityMatrix.zero(1)
        with pytest.raises(ValueError):
            rho.matrix[0, 0] = 0

    def test_maximally_mixed_purity(self):
        assert purity(DensityMatrix.maximally_mixed(2)) == pytest.approx(0.25)

    def test_allclose(self):
        assert DensityMatrix.zero(1).allclose(DensityMatrix.basis("0"))
        assert not DensityMatrix.zero(1).allclose(DensityMatrix.basis("1"))


class TestGates:
    @pytest.mark.parametrize("gate", ALL_GATES, ids=lambda g: f"{g.kind}{g.targets}")
    def test_unitary(self, gate):
        u = gate.unitary()
        assert np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=1e-10)

    def test_x_flips_zero(self):
        out = apply_gate(DensityMatrix.zero(1), GateOp("X", (0,)))
        assert out.allclose(DensityMatrix.basis("1"))

    def test_identity_is_exact(self):
        rho = DensityMatrix.random(2, np.random.default_rng(3))
        out = apply_gate(rho, GateOp("I", (0,)))
        assert np.array_equal(out.matrix, rho.matrix)

    @pytest.mark.parametrize("kind,gen", [("RY", Y), ("RZ", Z)])
    @pytest.mark.parametrize("angle", [0.0, 0.3, math.pi / 2, -2.1, math.pi])
    def test_rotation_matches_matrix_exponential(self, kind, gen, angle):
        expected = expm(-1j * angle / 2 * gen)
        assert np.allclose(GateOp(kind, (0,), angle).unitary(), expected, atol=1e-12)

    def test_ry_half_pi_zero_z_expectation(self):
        rho = apply_gate(DensityMatrix.zero(1), GateOp("RY", (0,), math.pi / 2))
        ev = exact_expectation(rho, Observable.from_label("Z"))
        assert ev == pytest.approx(0.0, abs=1e-12)

    def test_qubit_order_leftmost_is_zero(self):
        rho = apply_gate(DensityMatrix.zero(2), GateOp("X", (1,)))
        assert rho.allclose(DensityMatrix.basis("01"))

    def test_cnot_embedding(self):
        assert np.allclose(embed_operator(CNOT, (0, 1), 2), CNOT)
        # control on qubit 1, target on qubit 0
        rho = apply_gate(DensityMatrix.basis("01"), GateOp("CNOT", (1, 0)))
        assert rho.allclose(DensityMatrix.basis("11"))

    def test_embed_matches_kron(self):
        assert np.allclose(embed_operator(X, (1,), 3), np.kron(np.kron(np.eye(2), X), np.eye(2)))

    def test_index_out_of_range(self):
        with pytest.raises(SimulationError):
            apply_gate(DensityMatrix.zero(1), GateOp("X", (1,)))

    def test_non_finite_angle(self):
        with pytest.raises(SimulationError):
            GateOp("RY", (0,), float("nan"))

    def test_bad_arity(self):
        with pytest.raises(SimulationError):
            GateOp("CNOT", (0,))
        with pytest.raises(SimulationError):
            GateOp("CNOT", (1, 1))


class TestChannels:
    @pytest.mark.parametrize(
        "channel",
        [depolarizing(0.05, 1), depolarizing(0.1, 2), global_depolarizing(0.3, 2), full_depolarize(1)],
        ids=lambda c: c.label,
    )
    def test_trace_preserving(self, channel):
        d = channel.kraus_ops[0].shape[0]
        total = sum(k.conj().T @ k for k in channel.kraus_ops)
        assert np.allclose(total, np.eye(d), atol=1e-10)

    def test_rejects_non_trace_preserving(self):
        with pytest.raises(SimulationError):
            Channel((0.5 * np.eye(2),))

    def test_global_zero_is_identity(self):
        rho = DensityMatrix.random(2, np.random.default_rng(0))
        assert apply_channel(rho, global_depolarizing(0.0, 2)).allclose(rho, atol=1e-14)

    def test_global_one_is_maximally_mixed(self):
        rho = DensityMatrix.random(2, np.random.default_rng(1))
        out = apply_channel(rho, global_depolarizing(1.0, 2))
        assert np.allclose(out.matrix, np.eye(4) / 4, atol=1e-12)

    def test_global_purity_on_pure_state(self):
        rho = DensityMatrix.from_statevector([1, 1j, 0, 1])
        out = apply_channel(rho, global_depolarizing(0.2, 2))
        # (1-p)^2 + p(1-p)/2 + p^2/4 at p = 0.2
        assert purity(out) == pytest.approx(0.73, abs=1e-12)

    def test_global_is_linear_interpolation(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            rho = DensityMatrix.random(2, rng)
            p = rng.uniform()
            out = apply_channel(rho, global_depolarizing(p, 2))
            expected = (1 - p) * rho.matrix + p * np.eye(4) / 4
            assert np.max(np.abs(out.matrix - expected)) <= 1e-12

    def test_local_depolarizing_pauli_form(self):
        rho = DensityMatrix.random(1, np.random.default_rng(2))
        p = 0.3
        m = rho.matrix
        expected = (1 - p) * m + p / 3 * (X @ m @ X + Y @ m @ Y + Z @ m @ Z)
        assert np.allclose(apply_channel(rho, depolarizing(p, 1)).matrix, expected, atol=1e-12)

    def test_arity_mismatch(self):
        with pytest.raises(SimulationError):
            apply_channel(DensityMatrix.zero(2), depolarizing(0.1, 1))
        with pytest.raises(SimulationError):
            apply_channel(DensityMatrix.zero(2), depolarizing(0.1, 1), (0, 1))

    def test_superoperator_matches_kraus(self):
        rng = np.random.default_rng(4)
        rho = DensityMatrix.random(2, rng)
        ch = depolarizing(0.2, 1)
        s = ch.superoperator((1,), 2)
        direct = apply_channel(rho, ch, (1,)).matrix
        assert np.allclose((s @ rho.matrix.reshape(-1)).reshape(4, 4), direct, atol=1e-12)


class TestRunCircuit:
    def test_empty_circuit(self):
        c = Circuit(2, ())
        for nm in (NoiseModel.noiseless(), NoiseModel(0.05, 0.1), NoiseModel.global_(0.0)):
            assert run_circuit(c, noise=nm).allclose(DensityMatrix.zero(2))

    def test_ry_zero_angle(self):
        c = Circuit(1, (GateOp("RY", (0,), Param(0)),), n_params=1)
        assert run_circuit(c, [0.0]).allclose(DensityMatrix.zero(1))

    def test_local_noise_matches_hand_composition(self):
        c = Circuit(1, (GateOp("RY", (0,), math.pi / 3),))
        out = run_circuit(c, noise=NoiseModel(p1=0.05))
        u = GateOp("RY", (0,), math.pi / 3).unitary()
        m = u @ np.diag([1, 0]) @ u.conj().T
        p = 0.05
        expected = (1 - p) * m + p / 3 * (X @ m @ X + Y @ m @ Y + Z @ m @ Z)
        assert np.allclose(out.matrix, expected, atol=1e-12)
        z = Observable.from_label("Z")
        noisy, ideal = exact_expectation(out, z), math.cos(math.pi / 3)
        assert noisy == pytest.approx((1 - 4 * p / 3) * ideal, abs=1e-12)
        assert abs(noisy) < abs(ideal)

    def test_global_mode(self):
        c = Circuit(2, (GateOp("RY", (0,), 0.4), GateOp("CNOT", (0, 1))))
        ideal = run_circuit(c)
        out = run_circuit(c, noise=NoiseModel.global_(0.3))
        assert np.allclose(out.matrix, 0.7 * ideal.matrix + 0.3 * np.eye(4) / 4, atol=1e-12)

    def test_two_qubit_noise_on_both_qubits(self):
        c = Circuit(2, (GateOp("CNOT", (0, 1)),))
        out = run_circuit(c, noise=NoiseModel(p1=0.0, p2=0.1))
        expected = apply_channel(DensityMatrix.zero(2), depolarizing(0.1, 2))
        assert out.allclose(expected, atol=1e-12)

    def test_unbound_slot(self):
        c = Circuit(1, (GateOp("RY", (0,), Param(0)),), n_params=1)
        with pytest.raises(SimulationError):
            run_circuit(c)

    def test_slot_must_exist(self):
        with pytest.raises(SimulationError):
            Circuit(1, (GateOp("RY", (0,), Param(2)),), n_params=1)
        with pytest.raises(SimulationError):
            Circuit(1, (GateOp("RY", (0,), Feature(0)),), n_features=0)

    def test_feature_binding(self):
        c = Circuit(1, (GateOp("RY", (0,), Feature(0, math.pi)),), n_features=1)
        rho = run_circuit(c, x=[0.5])
        assert exact_expectation(rho, Observable.from_label("Z")) == pytest.approx(0.0, abs=1e-12)

    def test_noise_model_validation(self):
        with pytest.raises(SimulationError):
            NoiseModel(p1=1.5)
        with pytest.raises(SimulationError):
            NoiseModel(mode="weird")


gate_strategy = st.one_of(
    st.builds(lambda k, q, a: GateOp(k, (q,), a), st.sampled_from(["RY", "RZ"]),
              st.integers(0, 2), st.floats(-10, 10, allow_nan=False)),
    st.builds(lambda k, q: GateOp(k, (q,)), st.sampled_from(["X", "Y", "Z", "I"]), st.integers(0, 2)),
    st.sampled_from([GateOp("CNOT", (0, 1)), GateOp("CNOT", (1, 2)), GateOp("CNOT", (2, 0))]),
)
step_strategy = st.one_of(
    gate_strategy.map(lambda g: ("gate", g)),
    st.tuples(st.floats(0, 1), st.sampled_from([(0,), (1,), (2,)])).map(lambda t: ("d1", t)),
    st.tuples(st.floats(0, 1), st.sampled_from([(0, 1), (2, 1)])).map(lambda t: ("d2", t)),
)


class TestProperties:
    @settings(max_examples=1000, deadline=None)
    @given(st.lists(step_strategy, max_size=8), st.integers(0, 2**32 - 1))
    def test_random_sequences_stay_valid(self, steps, seed):
        rho = DensityMatrix.random(3, np.random.default_rng(seed))
        for kind, payload in steps:
            if kind == "gate":
                before = purity(rho)
                rho = apply_gate(rho, payload)
                assert purity(rho) == pytest.approx(before, abs=1e-10)
            elif kind == "d1":
                rho = apply_channel(rho, depolarizing(payload[0], 1), payload[1])
            else:
                rho = apply_channel(rho, depolarizing(payload[0], 2), payload[1])
            assert_valid(rho)
