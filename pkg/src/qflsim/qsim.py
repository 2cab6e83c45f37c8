"""Exact simulation of a small noisy quantum register.

States are kept as real Pauli-coefficient tensors rather than complex
matrices: a density matrix over n qubits is stored as the (4,)*n tensor
c[P] = tr(rho * P) with P ranging over tensor products of {I, X, Y, Z}.
This makes depolarizing noise an exact coefficient contraction and keeps
the trace (the all-I coefficient) bit-exactly equal to 1 through any gate
or channel sequence. The dense complex matrix is available through
``DensityMatrix.matrix`` whenever it is needed.

Conventions, fixed so independent implementations cannot diverge silently:
  * qubit 0 is the most significant bit of a basis index (first tensor
    factor), so |1000> for n=4 is basis index 8;
  * rotation gates are exp(-i * angle * G / 2) with G in {X, Y, Z};
  * CRX applies RX(angle) on the target when the control is |1>;
  * depolarizing with probability p replaces the touched qubit(s) with the
    maximally mixed state: rho -> (1-p) rho + p * (I/2^k (x) tr_k rho).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

MAX_QUBITS = 8

_PAULIS = np.stack(
    [
        np.eye(2, dtype=complex),
        np.array([[0, 1], [1, 0]], dtype=complex),
        np.array([[0, -1j], [1j, 0]], dtype=complex),
        np.array([[1, 0], [0, -1]], dtype=complex),
    ]
)

GATE_KINDS = ("rx", "ry", "rz", "crx")


@dataclass(frozen=True)
class NoiseConfig:
    """Depolarizing-plus-readout noise model.

    p_depol_1q / p_depol_2q apply after every single-/two-qubit gate;
    p_meas_flip is the per-qubit readout bit-flip probability, which
    contracts every <Z> by (1 - 2p).
    """

    p_depol_1q: float = 0.001
    p_depol_2q: float = 0.01
    p_meas_flip: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        for name in ("p_depol_1q", "p_depol_2q", "p_meas_flip"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {p}")

    @property
    def readout_factor(self) -> float:
        return 1.0 - 2.0 * self.p_meas_flip if self.enabled else 1.0


NOISE_OFF = NoiseConfig(0.0, 0.0, 0.0, enabled=False)


@dataclass(frozen=True)
class GateOp:
    """One gate of a circuit program.

    The angle comes from exactly one source: a trainable parameter
    (param_index), a per-sample encoding slot (enc_index), or a fixed
    literal (angle).
    """

    kind: str
    target: int
    control: int | None = None
    param_index: int | None = None
    enc_index: int | None = None
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate kind {self.kind!r}")
        if (self.kind == "crx") != (self.control is not None):
            raise ConfigError("control qubit required for crx and only for crx")
        if self.control is not None and self.control == self.target:
            raise ConfigError("control and target must be distinct")
        sources = sum(
            x is not None for x in (self.param_index, self.enc_index, self.angle)
        )
        if sources != 1:
            raise ConfigError("gate needs exactly one angle source")

    def resolve_angle(self, params, encoding_angles) -> float:
        if self.param_index is not None:
            return float(params[self.param_index])
        if self.enc_index is not None:
            return float(encoding_angles[self.enc_index])
        return float(self.angle)


@dataclass(frozen=True)
class CircuitProgram:
    """A compiled gate sequence with its parameter/encoding slot counts."""

    n_qubits: int
    gates: tuple[GateOp, ...]
    n_params: int
    n_enc: int

    def __post_init__(self):
        for g in self.gates:
            if not (0 <= g.target < self.n_qubits):
                raise ConfigError(f"gate target {g.target} out of range")
            if g.control is not None and not (0 <= g.control < self.n_qubits):
                raise ConfigError(f"gate control {g.control} out of range")
            if g.param_index is not None and g.param_index >= self.n_params:
                raise ConfigError("param_index beyond declared parameter count")
            if g.enc_index is not None and g.enc_index >= self.n_enc:
                raise ConfigError("enc_index beyond declared encoding count")


class DensityMatrix:
    """Immutable noisy quantum state in the Pauli-coefficient representation."""

    __slots__ = ("n_qubits", "coeffs")

    def __init__(self, n_qubits: int, coeffs: np.ndarray):
        self.n_qubits = n_qubits
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (4,) * n_qubits:
            raise ConfigError(
                f"coefficient tensor must have shape {(4,) * n_qubits}"
            )
        coeffs.flags.writeable = False
        self.coeffs = coeffs

    @property
    def trace(self) -> float:
        return float(self.coeffs[(0,) * self.n_qubits])

    @property
    def purity(self) -> float:
        return float((self.coeffs ** 2).sum() / (1 << self.n_qubits))

    @property
    def matrix(self) -> np.ndarray:
        """Dense 2^n x 2^n complex matrix: rho = sum_P c_P P / 2^n."""
        out = self.coeffs.astype(complex)
        # contract each qubit axis with the Pauli basis, front to back
        for _ in range(self.n_qubits):
            out = np.tensordot(out, _PAULIS, axes=([0], [0]))
        # axes are now (row0, col0, row1, col1, ...); interleave to rows|cols
        n = self.n_qubits
        perm = list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2))
        out = out.transpose(perm).reshape(1 << n, 1 << n)
        return out / (1 << n)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "DensityMatrix":
        mat = np.asarray(mat, dtype=complex)
        dim = mat.shape[0]
        n = dim.bit_length() - 1
        if mat.shape != (dim, dim) or (1 << n) != dim:
            raise ConfigError("matrix must be square with power-of-two size")
        t = mat.reshape((2,) * (2 * n))
        # rows|cols -> interleaved (row0, col0, ...)
        perm = [None] * (2 * n)
        for q in range(n):
            perm[2 * q] = q
            perm[2 * q + 1] = n + q
        t = t.transpose(perm)
        for _ in range(n):
            # c_a = tr(sigma_a . block) over the leading (row, col) axis pair
            t = np.tensordot(_PAULIS, t, axes=([1, 2], [1, 0]))
            t = np.moveaxis(t, 0, -1)
        coeffs = t.real.copy()
        return cls(n, coeffs)


def init_state(n_qubits: int) -> DensityMatrix:
    """Ground state |0...0><0...0|."""
    if not (1 <= n_qubits <= MAX_QUBITS):
        raise ConfigError(
            f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}"
        )
    qubit = np.array([1.0, 0.0, 0.0, 1.0])  # I + Z
    coeffs = qubit
    for _ in range(n_qubits - 1):
        coeffs = np.multiply.outer(coeffs, qubit)
    return DensityMatrix(n_qubits, coeffs)


# ---------------------------------------------------------------------------
# Gate transfer matrices in the Pauli basis
# ---------------------------------------------------------------------------
# A single-qubit unitary acts on (I, X, Y, Z) coefficients as identity on I
# plus an SO(3) rotation of the (X, Y, Z) block.

def so3_rx(theta):
    c, s = np.cos(theta), np.sin(theta)
    m = np.eye(4)
    m[2, 2] = c
    m[2, 3] = -s
    m[3, 2] = s
    m[3, 3] = c
    return m


def so3_ry(theta):
    c, s = np.cos(theta), np.sin(theta)
    m = np.eye(4)
    m[1, 1] = c
    m[1, 3] = s
    m[3, 1] = -s
    m[3, 3] = c
    return m


def so3_rz(theta):
    c, s = np.cos(theta), np.sin(theta)
    m = np.eye(4)
    m[1, 1] = c
    m[1, 2] = -s
    m[2, 1] = s
    m[2, 2] = c
    return m


_SO3_BUILDERS = {"rx": so3_rx, "ry": so3_ry, "rz": so3_rz}

# Cross-product generators: d/dtheta R_a(theta) = K_a R_a(theta), acting on
# the (X, Y, Z) block. K_a v = a x v.
K_AXIS = {
    "rx": np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    "ry": np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
    "rz": np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
}


def ptm_crx(thetas, control_first: bool = True):
    """Pauli transfer matrices for CRX, vectorized over a theta array.

    Index order is (control, target) pairs (a*4+b) when control_first, else
    (target, control). Returns shape thetas.shape + (16, 16).
    """
    thetas = np.asarray(thetas, dtype=float)
    c2 = np.cos(thetas / 2)
    s2 = np.sin(thetas / 2)
    c = np.cos(thetas)
    s = np.sin(thetas)
    one = np.ones_like(thetas)

    delta = np.zeros(thetas.shape + (4, 4))
    for i in range(4):
        delta[..., i, i] = one
    r = np.zeros(thetas.shape + (4, 4))  # RX transfer matrix
    r[..., 0, 0] = one
    r[..., 1, 1] = one
    r[..., 2, 2] = c
    r[..., 2, 3] = -s
    r[..., 3, 2] = s
    r[..., 3, 3] = c

    # blocks on the control index: (I,I)=(Z,Z)=(d+r)/2, (I,Z)=(Z,I)=(d-r)/2,
    # (X,X)=(Y,Y)=C, (X,Y)=S, (Y,X)=-S, rest zero
    blk_c = np.zeros(thetas.shape + (4, 4))
    blk_c[..., 0, 0] = c2
    blk_c[..., 1, 1] = c2
    blk_c[..., 2, 2] = c2
    blk_c[..., 3, 3] = c2
    blk_c[..., 3, 2] = s2
    blk_c[..., 2, 3] = -s2
    blk_s = np.zeros(thetas.shape + (4, 4))
    blk_s[..., 1, 0] = s2
    blk_s[..., 0, 1] = s2

    m = np.zeros(thetas.shape + (4, 4, 4, 4))  # [a_ctrl, b_tgt, c_ctrl, d_tgt]
    half_sum = 0.5 * (delta + r)
    half_diff = 0.5 * (delta - r)
    m[..., 0, :, 0, :] = half_sum
    m[..., 0, :, 3, :] = half_diff
    m[..., 3, :, 0, :] = half_diff
    m[..., 3, :, 3, :] = half_sum
    m[..., 1, :, 1, :] = blk_c
    m[..., 2, :, 2, :] = blk_c
    m[..., 1, :, 2, :] = blk_s
    m[..., 2, :, 1, :] = -blk_s
    if not control_first:
        m = m.transpose(tuple(range(thetas.ndim)) + tuple(
            thetas.ndim + k for k in (1, 0, 3, 2)
        ))
    return m.reshape(thetas.shape + (16, 16))


def ptm_crx_deriv(thetas, control_first: bool = True):
    """d/dtheta of ptm_crx, same shape conventions."""
    thetas = np.asarray(thetas, dtype=float)
    c2 = np.cos(thetas / 2)
    s2 = np.sin(thetas / 2)
    c = np.cos(thetas)
    s = np.sin(thetas)
    zero = np.zeros_like(thetas)

    dr = np.zeros(thetas.shape + (4, 4))
    dr[..., 2, 2] = -s
    dr[..., 2, 3] = -c
    dr[..., 3, 2] = c
    dr[..., 3, 3] = -s

    dblk_c = np.zeros(thetas.shape + (4, 4))
    dblk_c[..., 0, 0] = -s2 / 2
    dblk_c[..., 1, 1] = -s2 / 2
    dblk_c[..., 2, 2] = -s2 / 2
    dblk_c[..., 3, 3] = -s2 / 2
    dblk_c[..., 3, 2] = c2 / 2
    dblk_c[..., 2, 3] = -c2 / 2
    dblk_s = np.zeros(thetas.shape + (4, 4))
    dblk_s[..., 1, 0] = c2 / 2
    dblk_s[..., 0, 1] = c2 / 2

    m = np.zeros(thetas.shape + (4, 4, 4, 4))
    m[..., 0, :, 0, :] = 0.5 * dr
    m[..., 0, :, 3, :] = -0.5 * dr
    m[..., 3, :, 0, :] = -0.5 * dr
    m[..., 3, :, 3, :] = 0.5 * dr
    m[..., 1, :, 1, :] = dblk_c
    m[..., 2, :, 2, :] = dblk_c
    m[..., 1, :, 2, :] = dblk_s
    m[..., 2, :, 1, :] = -dblk_s
    del zero
    if not control_first:
        m = m.transpose(tuple(range(thetas.ndim)) + tuple(
            thetas.ndim + k for k in (1, 0, 3, 2)
        ))
    return m.reshape(thetas.shape + (16, 16))


# ---------------------------------------------------------------------------
# Single-state operations (reference path; used by tests and small circuits)
# ---------------------------------------------------------------------------

def _contract_axis(coeffs, mat, axis):
    """Apply a 4x4 transfer matrix to one qubit axis of the tensor."""
    moved = np.moveaxis(coeffs, axis, -1)
    out = moved @ mat.T
    return np.moveaxis(out, -1, axis)


def _contract_pair(coeffs, mat16, axis_a, axis_b):
    """Apply a 16x16 transfer matrix to an ordered pair of qubit axes."""
    n = coeffs.ndim
    rest = [k for k in range(n) if k not in (axis_a, axis_b)]
    perm = rest + [axis_a, axis_b]
    moved = coeffs.transpose(perm).reshape(-1, 16)
    out = (moved @ mat16.T).reshape([4] * (n - 2) + [4, 4])
    inv = np.argsort(perm)
    return out.transpose(inv)


def depolarize_1q(state: DensityMatrix, qubit: int, p: float) -> DensityMatrix:
    """Single-qubit depolarizing channel with probability p."""
    if not (0 <= qubit < state.n_qubits):
        raise ConfigError(f"qubit {qubit} out of range")
    if p == 0.0:
        return DensityMatrix(state.n_qubits, state.coeffs.copy())
    coeffs = state.coeffs.copy()
    idx = [slice(None)] * state.n_qubits
    idx[qubit] = slice(1, None)
    coeffs[tuple(idx)] *= 1.0 - p
    return DensityMatrix(state.n_qubits, coeffs)


def depolarize_2q(state: DensityMatrix, qubit_a: int, qubit_b: int, p: float) -> DensityMatrix:
    """Two-qubit depolarizing channel: every component not I(x)I contracts."""
    for q in (qubit_a, qubit_b):
        if not (0 <= q < state.n_qubits):
            raise ConfigError(f"qubit {q} out of range")
    if qubit_a == qubit_b:
        raise ConfigError("two-qubit channel needs distinct qubits")
    if p == 0.0:
        return DensityMatrix(state.n_qubits, state.coeffs.copy())
    coeffs = state.coeffs * (1.0 - p)
    idx = [slice(None)] * state.n_qubits
    idx[qubit_a] = 0
    idx[qubit_b] = 0
    coeffs[tuple(idx)] = state.coeffs[tuple(idx)]
    return DensityMatrix(state.n_qubits, coeffs)


def apply_gate(
    state: DensityMatrix, gate: GateOp, angle: float, noise: NoiseConfig
) -> DensityMatrix:
    """U rho U^dagger, then the matching depolarizing channel if noise is on."""
    if not math.isfinite(angle):
        raise NumericError(f"gate angle must be finite, got {angle}")
    if not (0 <= gate.target < state.n_qubits):
        raise ConfigError(f"gate target {gate.target} out of range")
    if gate.kind == "crx":
        if not (0 <= gate.control < state.n_qubits):
            raise ConfigError(f"gate control {gate.control} out of range")
        m16 = ptm_crx(np.asarray(angle))
        coeffs = _contract_pair(state.coeffs, m16, gate.control, gate.target)
        out = DensityMatrix(state.n_qubits, coeffs)
        if noise.enabled:
            out = depolarize_2q(out, gate.control, gate.target, noise.p_depol_2q)
        return out
    m4 = _SO3_BUILDERS[gate.kind](angle)
    coeffs = _contract_axis(state.coeffs, m4, gate.target)
    out = DensityMatrix(state.n_qubits, coeffs)
    if noise.enabled:
        out = depolarize_1q(out, gate.target, noise.p_depol_1q)
    return out


def expectation_z(state: DensityMatrix, qubit: int, noise: NoiseConfig) -> float:
    """tr(rho Z_qubit), contracted by the readout bit-flip channel."""
    if not (0 <= qubit < state.n_qubits):
        raise ConfigError(f"qubit {qubit} out of range")
    idx = [0] * state.n_qubits
    idx[qubit] = 3
    return noise.readout_factor * float(state.coeffs[tuple(idx)])


def run_circuit(
    params, encoding_angles, circuit: CircuitProgram, noise: NoiseConfig
) -> np.ndarray:
    """<Z> per qubit after the full program. Gate-by-gate reference path."""
    params = np.asarray(params, dtype=float)
    encoding_angles = np.asarray(encoding_angles, dtype=float)
    if params.shape != (circuit.n_params,):
        raise ConfigError(
            f"expected {circuit.n_params} parameters, got {params.shape}"
        )
    if encoding_angles.shape != (circuit.n_enc,):
        raise ConfigError(
            f"expected {circuit.n_enc} encoding angles, got {encoding_angles.shape}"
        )
    if not np.isfinite(params).all() or not np.isfinite(encoding_angles).all():
        raise NumericError("parameters and encoding angles must be finite")
    state = init_state(circuit.n_qubits)
    for gate in circuit.gates:
        angle = gate.resolve_angle(params, encoding_angles)
        state = apply_gate(state, gate, angle, noise)
    return np.array(
        [expectation_z(state, q, noise) for q in range(circuit.n_qubits)]
    )


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def gradient(params, encoding_angles, circuit, noise, loss_tail):
    """d(loss)/d(params) by adjoint back-propagation through the program.

    loss_tail maps the <Z> vector to (loss, dloss/d<Z>). The channels here
    are self-adjoint coefficient contractions, so the observable is pulled
    back through the same transfer matrices transposed; each rotation
    contributes through its cross-product generator and each CRX through
    the analytic derivative of its transfer matrix.
    """
    params = np.asarray(params, dtype=float)
    encoding_angles = np.asarray(encoding_angles, dtype=float)
    n = circuit.n_qubits

    # forward pass, storing the state entering every gate
    state = init_state(n).coeffs
    entering = []
    for gate in circuit.gates:
        entering.append(state)
        angle = gate.resolve_angle(params, encoding_angles)
        if not math.isfinite(angle):
            raise NumericError(f"gate angle must be finite, got {angle}")
        if gate.kind == "crx":
            m16 = _fold_noise_2q(ptm_crx(np.asarray(angle)), noise)
            state = _contract_pair(state, m16, gate.control, gate.target)
        else:
            m4 = _fold_noise_1q(_SO3_BUILDERS[gate.kind](angle), noise)
            state = _contract_axis(state, m4, gate.target)

    kappa = noise.readout_factor
    z = np.empty(n)
    for q in range(n):
        idx = [0] * n
        idx[q] = 3
        z[q] = kappa * state[tuple(idx)]
    loss, dz = loss_tail(z)
    if not math.isfinite(float(loss)) or not np.isfinite(dz).all():
        raise NumericError("loss tail produced non-finite values")

    # observable seed: sum_q dL/dz_q * kappa * (Z_q component)
    obs = np.zeros((4,) * n)
    for q in range(n):
        idx = [0] * n
        idx[q] = 3
        obs[tuple(idx)] = kappa * float(dz[q])

    grad = np.zeros(circuit.n_params)
    for gate, s_in in zip(reversed(circuit.gates), reversed(entering)):
        angle = gate.resolve_angle(params, encoding_angles)
        if gate.kind == "crx":
            m16 = _fold_noise_2q(ptm_crx(np.asarray(angle)), noise)
            if gate.param_index is not None:
                dm16 = _fold_noise_2q(ptm_crx_deriv(np.asarray(angle)), noise)
                ds = _contract_pair(s_in, dm16, gate.control, gate.target)
                grad[gate.param_index] += float((obs * ds).sum())
            obs = _contract_pair(obs, m16.T, gate.control, gate.target)
        else:
            m4 = _fold_noise_1q(_SO3_BUILDERS[gate.kind](angle), noise)
            if gate.param_index is not None:
                s_out = _contract_axis(s_in, m4, gate.target)
                k4 = np.zeros((4, 4))
                k4[1:, 1:] = K_AXIS[gate.kind]
                ks = _contract_axis(s_out, k4, gate.target)
                grad[gate.param_index] += float((obs * ks).sum())
            obs = _contract_axis(obs, m4.T, gate.target)
    return grad


def _fold_noise_1q(m4, noise: NoiseConfig):
    if not noise.enabled or noise.p_depol_1q == 0.0:
        return m4
    out = m4.copy()
    out[1:, :] *= 1.0 - noise.p_depol_1q
    return out


def _fold_noise_2q(m16, noise: NoiseConfig):
    if not noise.enabled or noise.p_depol_2q == 0.0:
        return m16
    out = m16.copy()
    out[1:, :] *= 1.0 - noise.p_depol_2q
    return out


# Four-term shift rule coefficients for gates with frequencies {1/2, 1}.
_CRX_SHIFT_C1 = (math.sqrt(2) + 1) / (4 * math.sqrt(2))
_CRX_SHIFT_C2 = (math.sqrt(2) - 1) / (4 * math.sqrt(2))


def gradient_shift(params, encoding_angles, circuit, noise, loss_tail):
    """d(loss)/d(params) by parameter-shift circuit re-evaluation.

    Two-term rule for rotations, four-term rule for CRX. Exact for this
    gate set, noise on or off; far slower than the adjoint path, kept as an
    independent cross-check.
    """
    params = np.asarray(params, dtype=float)
    z0 = run_circuit(params, encoding_angles, circuit, noise)
    loss, dz = loss_tail(z0)

    def z_at(k, shift):
        shifted = params.copy()
        shifted[k] += shift
        return run_circuit(shifted, encoding_angles, circuit, noise)

    dz_dtheta = np.zeros((circuit.n_params, circuit.n_qubits))
    for gate in circuit.gates:
        k = gate.param_index
        if k is None:
            continue
        if gate.kind == "crx":
            dz_dtheta[k] += _CRX_SHIFT_C1 * (
                z_at(k, math.pi / 2) - z_at(k, -math.pi / 2)
            ) - _CRX_SHIFT_C2 * (
                z_at(k, 3 * math.pi / 2) - z_at(k, -3 * math.pi / 2)
            )
        else:
            dz_dtheta[k] += 0.5 * (
                z_at(k, math.pi / 2) - z_at(k, -math.pi / 2)
            )
    return dz_dtheta @ dz
