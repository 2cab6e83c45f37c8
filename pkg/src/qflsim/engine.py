"""Batched fast path for the 4-qubit ring circuit family.

Evaluates and differentiates many (parameter set, sample) pairs in lockstep:
states are real Pauli-coefficient tensors of shape (G, B, 16, 16), where G
indexes parameter sets (clients trained side by side), B indexes samples,
and the two 16-axes are the qubit pairs (q0 q1) and (q2 q3) in base-4 Pauli
digits. Consecutive single-qubit gates fold into one transfer matrix per
qubit, with the per-gate depolarizing factors folded in (the depolarizing
channel commutes with rotations on the same qubit); each CRX is one 16x16
transfer matrix on its qubit pair.

Every array operation here is blockwise along G (plain matmuls and
elementwise ops), so training one client alone or many in lockstep yields
bit-identical results per client; tests pin that property.

Gradients come from adjoint back-propagation: the observable tensor is
pulled back through transposed transfer matrices; rotation parameters
contribute u . sum(s x o) with u the gate axis rotated by the gates applied
after it within its stage, CRX parameters contribute <o, dM s>.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .qsim import CircuitProgram, NoiseConfig, ptm_crx, ptm_crx_deriv

_AXIS_UNIT = {
    "rx": np.array([1.0, 0.0, 0.0]),
    "ry": np.array([0.0, 1.0, 0.0]),
    "rz": np.array([0.0, 0.0, 1.0]),
}

# pair layouts: how a CRX qubit pair maps onto the (G, B, 16, 16) state
_HEAD, _TAIL, _MID, _WRAP = "head", "tail", "mid", "wrap"
_PAIR_LAYOUT = {
    frozenset({0, 1}): _HEAD,
    frozenset({2, 3}): _TAIL,
    frozenset({1, 2}): _MID,
    frozenset({3, 0}): _WRAP,
}
# transpose taking atomic (G,B,a0,a1,a2,a3) into the layout's pair-last order
_PERM = {_MID: (0, 1, 2, 5, 3, 4), _WRAP: (0, 1, 3, 4, 5, 2)}
_PERM_INV = {_MID: (0, 1, 2, 4, 5, 3), _WRAP: (0, 1, 5, 2, 3, 4)}
# first qubit of the pair in the layout's index order
_PAIR_FIRST = {_HEAD: 0, _TAIL: 2, _MID: 1, _WRAP: 3}


@dataclass(frozen=True)
class _RotGate:
    kind: str
    param_index: int | None
    angle: float | None


@dataclass(frozen=True)
class _RotStage:
    per_qubit: tuple[tuple[_RotGate, ...], ...]  # length 4


@dataclass(frozen=True)
class _EncStage:
    per_qubit: tuple[tuple[tuple[str, int], ...], ...]  # (kind, enc_index)


@dataclass(frozen=True)
class _CrxStage:
    control: int
    target: int
    param_index: int | None
    angle: float | None
    layout: str
    control_first: bool


@dataclass(frozen=True)
class EnginePlan:
    n_params: int
    n_enc: int
    stages: tuple


class EngineUnsupported(ConfigError):
    """The program does not fit the fast-path circuit family."""


def compile_plan(circuit: CircuitProgram) -> EnginePlan:
    """Group a gate program into fused stages, or raise EngineUnsupported."""
    if circuit.n_qubits != 4:
        raise EngineUnsupported("fast path requires exactly 4 qubits")
    stages = []
    rot_acc: list[list[_RotGate]] | None = None
    enc_acc: list[list[tuple[str, int]]] | None = None

    def flush():
        nonlocal rot_acc, enc_acc
        if rot_acc is not None:
            stages.append(_RotStage(tuple(tuple(g) for g in rot_acc)))
            rot_acc = None
        if enc_acc is not None:
            stages.append(_EncStage(tuple(tuple(g) for g in enc_acc)))
            enc_acc = None

    for gate in circuit.gates:
        if gate.kind == "crx":
            flush()
            pair = frozenset({gate.control, gate.target})
            layout = _PAIR_LAYOUT.get(pair)
            if layout is None:
                raise EngineUnsupported(f"unsupported CRX pair {sorted(pair)}")
            stages.append(
                _CrxStage(
                    gate.control,
                    gate.target,
                    gate.param_index,
                    gate.angle,
                    layout,
                    control_first=(gate.control == _PAIR_FIRST[layout]),
                )
            )
        elif gate.enc_index is not None:
            if enc_acc is None:
                flush()
                enc_acc = [[] for _ in range(4)]
            enc_acc[gate.target].append((gate.kind, gate.enc_index))
        else:
            if rot_acc is None:
                flush()
                rot_acc = [[] for _ in range(4)]
            rot_acc[gate.target].append(
                _RotGate(gate.kind, gate.param_index, gate.angle)
            )
    flush()
    return EnginePlan(circuit.n_params, circuit.n_enc, tuple(stages))


# ---------------------------------------------------------------------------
# vectorized transfer-matrix builders
# ---------------------------------------------------------------------------

def _rot3(kind, theta):
    """SO(3) Pauli-block rotation, vectorized over theta's shape."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    m = np.zeros(theta.shape + (3, 3))
    if kind == "rx":
        m[..., 0, 0] = 1.0
        m[..., 1, 1] = c
        m[..., 1, 2] = -s
        m[..., 2, 1] = s
        m[..., 2, 2] = c
    elif kind == "ry":
        m[..., 1, 1] = 1.0
        m[..., 0, 0] = c
        m[..., 0, 2] = s
        m[..., 2, 0] = -s
        m[..., 2, 2] = c
    elif kind == "rz":
        m[..., 2, 2] = 1.0
        m[..., 0, 0] = c
        m[..., 0, 1] = -s
        m[..., 1, 0] = s
        m[..., 1, 1] = c
    else:
        raise ConfigError(f"not a rotation kind: {kind!r}")
    return m


def _embed4(block3, factor):
    """diag(1, factor * block3) as a (..., 4, 4) transfer matrix."""
    m = np.zeros(block3.shape[:-2] + (4, 4))
    m[..., 0, 0] = 1.0
    m[..., 1:, 1:] = factor * block3
    return m


def _kron44(a, b):
    """Kronecker product over the last two axes: (...,4,4) x2 -> (...,16,16)."""
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    return out.reshape(a.shape[:-2] + (16, 16))


def _rot_stage_mats(stage: _RotStage, params, noise: NoiseConfig):
    """Per-qubit combined 4x4s (G,4,4) and the composing R3 chain per gate."""
    g_count = params.shape[0]
    keep = 1.0 - noise.p_depol_1q if noise.enabled else 1.0
    mats = []
    for q in range(4):
        r = None
        for gate in stage.per_qubit[q]:
            theta = (
                params[:, gate.param_index]
                if gate.param_index is not None
                else np.full(g_count, gate.angle)
            )
            r3 = _rot3(gate.kind, theta)
            r = r3 if r is None else r3 @ r
        if r is None:
            r = np.broadcast_to(np.eye(3), (g_count, 3, 3)).copy()
        factor = keep ** len(stage.per_qubit[q])
        mats.append(_embed4(r, factor))
    return mats


def _enc_stage_mats(stage: _EncStage, enc, noise: NoiseConfig):
    """Per-qubit per-sample 4x4s (G,B,4,4)."""
    g_count, b_count = enc.shape[:2]
    keep = 1.0 - noise.p_depol_1q if noise.enabled else 1.0
    mats = []
    for q in range(4):
        r = None
        for kind, idx in stage.per_qubit[q]:
            r3 = _rot3(kind, enc[:, :, idx])
            r = r3 if r is None else r3 @ r
        if r is None:
            r = np.broadcast_to(np.eye(3), (g_count, b_count, 3, 3)).copy()
        factor = keep ** len(stage.per_qubit[q])
        mats.append(_embed4(r, factor))
    return mats


def _crx_mat(stage: _CrxStage, params, noise: NoiseConfig, deriv=False):
    theta = (
        params[:, stage.param_index]
        if stage.param_index is not None
        else np.full(params.shape[0], stage.angle)
    )
    build = ptm_crx_deriv if deriv else ptm_crx
    m = build(theta, control_first=stage.control_first)
    if noise.enabled and noise.p_depol_2q:
        m = m.copy()
        m[:, 1:, :] *= 1.0 - noise.p_depol_2q
    return m


def _all_crx_mats(plan: EnginePlan, params, noise: NoiseConfig, deriv=False):
    """One vectorized transfer-matrix build for every CRX stage.

    All ring CRX gates share the control-first orientation, so the whole
    (n_stages, G) angle array goes through one ptm build; per-stage slices
    are returned keyed by stage identity.
    """
    stages = [s for s in plan.stages if isinstance(s, _CrxStage)]
    if not stages:
        return {}
    if not all(s.control_first == stages[0].control_first for s in stages):
        return {
            id(s): _crx_mat(s, params, noise, deriv=deriv) for s in stages
        }
    g_count = params.shape[0]
    thetas = np.empty((len(stages), g_count))
    for k, s in enumerate(stages):
        if s.param_index is not None:
            thetas[k] = params[:, s.param_index]
        else:
            thetas[k] = s.angle
    build = ptm_crx_deriv if deriv else ptm_crx
    mats = build(thetas, control_first=stages[0].control_first)
    if noise.enabled and noise.p_depol_2q:
        mats[:, :, 1:, :] *= 1.0 - noise.p_depol_2q
    return {id(s): mats[k] for k, s in enumerate(stages)}


# ---------------------------------------------------------------------------
# stage application on (G, B, 16, 16) states
# ---------------------------------------------------------------------------

def _apply_rot(state, mats, transpose=False):
    k01 = _kron44(mats[0], mats[1])
    k23 = _kron44(mats[2], mats[3])
    if transpose:
        k01 = np.swapaxes(k01, -1, -2)
        k23 = np.swapaxes(k23, -1, -2)
    g, b = state.shape[:2]
    out = k01[:, None] @ state
    out = (out.reshape(g, b * 16, 16) @ np.swapaxes(k23, -1, -2)).reshape(
        g, b, 16, 16
    )
    return out


def _apply_enc(state, mats, transpose=False):
    k01 = _kron44(mats[0], mats[1])
    k23 = _kron44(mats[2], mats[3])
    if transpose:
        k01 = np.swapaxes(k01, -1, -2)
        k23 = np.swapaxes(k23, -1, -2)
    out = k01 @ state
    out = out @ np.swapaxes(k23, -1, -2)
    return out


def _to_layout(state, layout):
    """Canonical (G,B,16,16) -> (G, B*16, 16) with the pair as last axis."""
    g, b = state.shape[:2]
    atomic = state.reshape(g, b, 4, 4, 4, 4)
    return atomic.transpose(_PERM[layout]).reshape(g, b * 16, 16)


def _from_layout(flat, layout, g, b):
    atomic = flat.reshape(g, b, 4, 4, 4, 4).transpose(_PERM_INV[layout])
    return atomic.reshape(g, b, 16, 16)


def _apply_crx(state, stage: _CrxStage, m, transpose=False):
    """Returns (output_state, stage_layout_input) for gradient reuse."""
    if transpose:
        m = np.swapaxes(m, -1, -2)
    g, b = state.shape[:2]
    if stage.layout == _HEAD:
        return m[:, None] @ state, state
    if stage.layout == _TAIL:
        flat = state.reshape(g, b * 16, 16)
        return (flat @ np.swapaxes(m, -1, -2)).reshape(g, b, 16, 16), state
    flat = _to_layout(state, stage.layout)
    out = flat @ np.swapaxes(m, -1, -2)
    return _from_layout(out, stage.layout, g, b), flat


# ---------------------------------------------------------------------------
# forward / value-and-grad
# ---------------------------------------------------------------------------

def _initial_state(g, b):
    qubit = np.array([1.0, 0.0, 0.0, 1.0])
    pair = np.outer(qubit, qubit).reshape(16)
    state = np.outer(pair, pair).reshape(16, 16)
    return np.broadcast_to(state, (g, b, 16, 16)).copy()


def _extract_logits(state, kappa):
    atomic = state.reshape(state.shape[:2] + (4, 4, 4, 4))
    return kappa * np.stack(
        [
            atomic[:, :, 3, 0, 0, 0],
            atomic[:, :, 0, 3, 0, 0],
            atomic[:, :, 0, 0, 3, 0],
            atomic[:, :, 0, 0, 0, 3],
        ],
        axis=-1,
    )


def forward_logits(plan: EnginePlan, params, enc, noise: NoiseConfig):
    """Logits (G, B, 4) for parameter sets (G, P) and encodings (G, B, E)."""
    params = np.asarray(params, dtype=float)
    enc = np.asarray(enc, dtype=float)
    _check_shapes(plan, params, enc)
    crx_mats = _all_crx_mats(plan, params, noise)
    state = _initial_state(params.shape[0], enc.shape[1])
    for stage in plan.stages:
        if isinstance(stage, _RotStage):
            state = _apply_rot(state, _rot_stage_mats(stage, params, noise))
        elif isinstance(stage, _EncStage):
            state = _apply_enc(state, _enc_stage_mats(stage, enc, noise))
        else:
            state, _ = _apply_crx(state, stage, crx_mats[id(stage)])
    return _extract_logits(state, noise.readout_factor)


def _check_shapes(plan, params, enc):
    if params.ndim != 2 or params.shape[1] != plan.n_params:
        raise ConfigError(
            f"params must be (G, {plan.n_params}), got {params.shape}"
        )
    if enc.ndim != 3 or enc.shape[0] != params.shape[0] or enc.shape[2] != plan.n_enc:
        raise ConfigError(
            f"encodings must be (G, B, {plan.n_enc}), got {enc.shape}"
        )
    if not np.isfinite(params).all():
        raise NumericError("parameters must be finite")


def log_softmax(logits):
    """Stable log-softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def value_and_grad(plan, params, enc, labels, noise, n_classes=4):
    """Mean cross-entropy loss, correct count, and parameter gradient per group.

    Returns (loss (G,), correct (G,), grad (G, P)) for the batch, where the
    loss is the mean over B of -log softmax(logits[:n_classes])[label] and
    correct counts argmax hits.
    """
    params = np.asarray(params, dtype=float)
    enc = np.asarray(enc, dtype=float)
    labels = np.asarray(labels)
    _check_shapes(plan, params, enc)
    g_count, b_count = enc.shape[:2]
    kappa = noise.readout_factor

    # forward, keeping each stage's input (and transfer matrices for reuse)
    crx_mats = _all_crx_mats(plan, params, noise)
    state = _initial_state(g_count, b_count)
    records = []
    for stage in plan.stages:
        if isinstance(stage, _RotStage):
            mats = _rot_stage_mats(stage, params, noise)
            records.append((stage, mats, state))
            state = _apply_rot(state, mats)
        elif isinstance(stage, _EncStage):
            mats = _enc_stage_mats(stage, enc, noise)
            records.append((stage, mats, state))
            state = _apply_enc(state, mats)
        else:
            m = crx_mats[id(stage)]
            state, layout_in = _apply_crx(state, stage, m)
            records.append((stage, m, layout_in))

    logits = _extract_logits(state, kappa)
    lp = log_softmax(logits[:, :, :n_classes])
    idx_g, idx_b = np.ogrid[:g_count, :b_count]
    loss = -lp[idx_g, idx_b, labels].mean(axis=1)
    correct = (lp.argmax(axis=2) == labels).sum(axis=1).astype(float)

    dlogit = np.exp(lp)
    dlogit[idx_g, idx_b, labels] -= 1.0
    dlogit /= b_count

    # observable seed at the Z component of each class qubit
    obs = np.zeros((g_count, b_count, 4, 4, 4, 4))
    obs[:, :, 3, 0, 0, 0] = kappa * dlogit[:, :, 0]
    if n_classes > 1:
        obs[:, :, 0, 3, 0, 0] = kappa * dlogit[:, :, 1]
    if n_classes > 2:
        obs[:, :, 0, 0, 3, 0] = kappa * dlogit[:, :, 2]
    if n_classes > 3:
        obs[:, :, 0, 0, 0, 3] = kappa * dlogit[:, :, 3]
    obs = obs.reshape(g_count, b_count, 16, 16)

    grad = np.zeros((g_count, plan.n_params))
    crx_derivs = _all_crx_mats(plan, params, noise, deriv=True)
    next_input = state  # stage output = input of the (virtual) next stage
    for stage, aux, s_in in reversed(records):
        if isinstance(stage, _CrxStage):
            obs = _crx_backward(
                stage, obs, aux, s_in, crx_derivs[id(stage)], grad
            )
            next_input = s_in if stage.layout in (_HEAD, _TAIL) else None
        elif isinstance(stage, _RotStage):
            s_out = next_input
            if s_out is None:
                s_out = _apply_rot(s_in, aux)
            _rot_grads(stage, params, s_out, obs, grad)
            obs = _apply_rot(obs, aux, transpose=True)
            next_input = s_in
        else:  # encoding stage: no trainable parameters
            obs = _apply_enc(obs, aux, transpose=True)
            next_input = s_in
    return loss, correct, grad


def _crx_backward(stage, obs, m, layout_in, dm, grad):
    """Accumulate the CRX parameter gradient and pull obs back through M^T."""
    g, b = obs.shape[:2]
    has_param = stage.param_index is not None
    if stage.layout == _HEAD:
        if has_param:
            ds = dm[:, None] @ layout_in
            grad[:, stage.param_index] += np.einsum("gbij,gbij->g", obs, ds)
        return np.swapaxes(m, -1, -2)[:, None] @ obs
    if stage.layout == _TAIL:
        obs_flat = obs.reshape(g, b * 16, 16)
        if has_param:
            ds = layout_in.reshape(g, b * 16, 16) @ np.swapaxes(dm, -1, -2)
            grad[:, stage.param_index] += np.einsum("gki,gki->g", obs_flat, ds)
        return (obs_flat @ m).reshape(g, b, 16, 16)
    obs_flat = _to_layout(obs, stage.layout)
    if has_param:
        ds = layout_in @ np.swapaxes(dm, -1, -2)
        grad[:, stage.param_index] += np.einsum("gki,gki->g", obs_flat, ds)
    return _from_layout(obs_flat @ m, stage.layout, g, b)


def _rot_grads(stage, params, s_out, obs, grad):
    """u . sum(s x o) per rotation parameter, per qubit."""
    g, b = obs.shape[:2]
    s6 = s_out.reshape(g, b, 4, 4, 4, 4)
    o6 = obs.reshape(g, b, 4, 4, 4, 4)
    for q in range(4):
        gates = stage.per_qubit[q]
        if not any(gt.param_index is not None for gt in gates):
            continue
        axis = 2 + q
        pre = (slice(None),) * axis
        sl = [s6[pre + (k,)] for k in (1, 2, 3)]
        ol = [o6[pre + (k,)] for k in (1, 2, 3)]
        dot = lambda a, b: np.einsum("gbijk,gbijk->g", a, b)  # noqa: E731
        w = np.stack(
            [
                dot(sl[1], ol[2]) - dot(sl[2], ol[1]),
                dot(sl[2], ol[0]) - dot(sl[0], ol[2]),
                dot(sl[0], ol[1]) - dot(sl[1], ol[0]),
            ],
            axis=1,
        )  # (G, 3): sum over batch/rest of s x o
        r_after = np.broadcast_to(np.eye(3), (g, 3, 3)).copy()
        for gate in reversed(gates):
            theta = (
                params[:, gate.param_index]
                if gate.param_index is not None
                else np.full(g, gate.angle)
            )
            if gate.param_index is not None:
                u = r_after @ _AXIS_UNIT[gate.kind]
                grad[:, gate.param_index] += np.einsum("gi,gi->g", u, w)
            r_after = r_after @ _rot3(gate.kind, theta)


__all__ = [
    "EnginePlan",
    "EngineUnsupported",
    "compile_plan",
    "forward_logits",
    "log_softmax",
    "value_and_grad",
]
