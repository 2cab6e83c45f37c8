"""Trainable quantum classifier: encoding, circuit layout, loss, Adam.

The circuit family is the layered ring ansatz: per layer, RX/RY/RZ on every
qubit followed by a CRX ring (control i -> target (i+1) mod n). Features in
[0, 1] enter through fixed rotation-encoding gates ahead of the first layer;
the per-qubit <Z> expectations are the class logits.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import engine, qsim
from .errors import ConfigError, DataError, NumericError


@dataclass(frozen=True)
class EncodingLayout:
    """Feature-to-rotation map: feature j -> qubit j mod n, RX then RY."""

    n_qubits: int = 4
    features_per_sample: int = 8
    scale: float = math.pi

    def __post_init__(self):
        if self.features_per_sample > 2 * self.n_qubits:
            raise ConfigError(
                "at most two encoding rotations per qubit are supported"
            )

    def gates(self):
        out = []
        for j in range(self.features_per_sample):
            kind = "rx" if j < self.n_qubits else "ry"
            out.append(
                qsim.GateOp(kind, target=j % self.n_qubits, enc_index=j)
            )
        return out


@dataclass(frozen=True)
class CircuitSpec:
    """Layered ring ansatz dimensions; n_params = n_layers * 4 * n_qubits."""

    n_qubits: int = 4
    n_layers: int = 6

    def __post_init__(self):
        if self.n_qubits < 2:
            raise ConfigError("ring ansatz needs at least 2 qubits")
        if self.n_layers < 1:
            raise ConfigError("need at least one layer")

    @property
    def n_params(self) -> int:
        return self.n_layers * 4 * self.n_qubits


DEFAULT_CIRCUIT = CircuitSpec()
DEFAULT_LAYOUT = EncodingLayout()


@functools.lru_cache(maxsize=16)
def build_program(circuit: CircuitSpec, layout: EncodingLayout) -> qsim.CircuitProgram:
    """Compile encoding gates plus the layered ring into a gate program."""
    if layout.n_qubits != circuit.n_qubits:
        raise ConfigError("encoding layout and circuit disagree on qubit count")
    n = circuit.n_qubits
    gates = list(layout.gates())
    for layer in range(circuit.n_layers):
        base = layer * 4 * n
        for q in range(n):
            for k, kind in enumerate(("rx", "ry", "rz")):
                gates.append(
                    qsim.GateOp(kind, target=q, param_index=base + 3 * q + k)
                )
        for i in range(n):
            gates.append(
                qsim.GateOp(
                    "crx",
                    target=(i + 1) % n,
                    control=i,
                    param_index=base + 3 * n + i,
                )
            )
    return qsim.CircuitProgram(
        n_qubits=n,
        gates=tuple(gates),
        n_params=circuit.n_params,
        n_enc=layout.features_per_sample,
    )


@functools.lru_cache(maxsize=16)
def _plan_for(circuit: CircuitSpec, layout: EncodingLayout):
    try:
        return engine.compile_plan(build_program(circuit, layout))
    except engine.EngineUnsupported:
        return None


def encode(features, layout: EncodingLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Angles (radians) for one feature vector in [0, 1]."""
    features = np.asarray(features, dtype=float)
    if features.shape != (layout.features_per_sample,):
        raise DataError(
            f"expected {layout.features_per_sample} features, got {features.shape}"
        )
    if not np.isfinite(features).all() or features.min() < 0 or features.max() > 1:
        raise DataError("features must be finite and within [0, 1]")
    return layout.scale * features


def log_softmax(logits) -> np.ndarray:
    return engine.log_softmax(np.asarray(logits, dtype=float))


def loss(log_probs, label: int) -> float:
    log_probs = np.asarray(log_probs, dtype=float)
    if not (0 <= label < log_probs.shape[-1]):
        raise DataError(f"label {label} out of range")
    return float(-log_probs[..., label])


def init_params(circuit: CircuitSpec = DEFAULT_CIRCUIT, seed=0) -> np.ndarray:
    """Uniform angles in [-pi/10, pi/10] from the experiment seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(-math.pi / 10, math.pi / 10, size=circuit.n_params)


def forward(
    params,
    features,
    circuit: CircuitSpec = DEFAULT_CIRCUIT,
    layout: EncodingLayout = DEFAULT_LAYOUT,
    noise: qsim.NoiseConfig = qsim.NOISE_OFF,
    n_classes: int = 4,
):
    """Logits (one <Z> per qubit) and class log-probabilities for one sample."""
    logits = predict_logits(params, [features], circuit, layout, noise)[0]
    return logits, log_softmax(logits[:n_classes])


def predict_logits(
    params,
    features_batch,
    circuit: CircuitSpec = DEFAULT_CIRCUIT,
    layout: EncodingLayout = DEFAULT_LAYOUT,
    noise: qsim.NoiseConfig = qsim.NOISE_OFF,
) -> np.ndarray:
    """Logits (B, n_qubits) for a batch of feature vectors."""
    features_batch = np.asarray(features_batch, dtype=float)
    enc = layout.scale * features_batch
    plan = _plan_for(circuit, layout)
    params = np.asarray(params, dtype=float)
    if plan is not None:
        return engine.forward_logits(plan, params[None], enc[None], noise)[0]
    program = build_program(circuit, layout)
    return np.stack(
        [qsim.run_circuit(params, e, program, noise) for e in enc]
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(shape, lr: float = 0.01) -> AdamState:
    return AdamState(m=np.zeros(shape), v=np.zeros(shape), lr=lr)


def adam_step(state: AdamState, params, grad):
    """One Adam update with bias correction. Pure; returns (state, params)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ConfigError("params, grad and Adam state shapes must match")
    if not np.isfinite(grad).all():
        raise NumericError("gradient has non-finite entries")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        m=m, v=v, step_count=t,
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon,
    )
    return new_state, new_params


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    n_classes: int = 4


@dataclass(frozen=True)
class TrainStats:
    loss: float
    accuracy: float
    n_samples: int


def local_train(
    params,
    shard,
    config: TrainConfig = TrainConfig(),
    noise: qsim.NoiseConfig = qsim.NOISE_OFF,
    seed: int = 0,
    circuit: CircuitSpec = DEFAULT_CIRCUIT,
    layout: EncodingLayout = DEFAULT_LAYOUT,
):
    """Seeded mini-batch Adam over one client shard.

    Runs epochs x ceil(n / batch) Adam steps over per-epoch shuffles and
    returns the updated parameters plus final-epoch mean loss/accuracy.
    Deterministic in (params, shard, seed).
    """
    stacks, stats = train_clients(
        np.asarray(params, dtype=float)[None],
        [shard],
        config,
        noise,
        [seed],
        circuit,
        layout,
    )
    return stacks[0], stats[0]


def train_clients(
    params_stack,
    shards,
    config: TrainConfig,
    noise: qsim.NoiseConfig,
    seeds,
    circuit: CircuitSpec = DEFAULT_CIRCUIT,
    layout: EncodingLayout = DEFAULT_LAYOUT,
):
    """Train several clients in lockstep (same shard size required).

    Lockstep evaluation is blockwise along the client axis, so results are
    bit-identical to training each client alone; callers group clients by
    shard size and fall back to singleton groups otherwise.
    """
    params_stack = np.asarray(params_stack, dtype=float)
    g_count = params_stack.shape[0]
    if len(shards) != g_count or len(seeds) != g_count:
        raise ConfigError("one shard and one seed per parameter row required")
    sizes = {len(shard[1]) for shard in shards}
    if len(sizes) != 1:
        raise ConfigError("lockstep training requires equal shard sizes")
    n = sizes.pop()
    if n == 0:
        raise DataError("empty training shard")

    plan = _plan_for(circuit, layout)
    enc_all = np.stack(
        [layout.scale * np.asarray(feat, dtype=float) for feat, _ in shards]
    )  # (G, N, E)
    labels_all = np.stack([np.asarray(lab) for _, lab in shards])
    if labels_all.min() < 0 or labels_all.max() >= config.n_classes:
        raise DataError("labels out of range for configured class count")

    rngs = [np.random.default_rng(s) for s in seeds]
    adam = init_adam(params_stack.shape, lr=config.lr)
    params = params_stack.copy()
    batch_count = max(1, -(-n // config.batch_size))
    final_loss = np.zeros(g_count)
    final_correct = np.zeros(g_count)

    for epoch in range(config.epochs):
        perms = np.stack([rng.permutation(n) for rng in rngs])
        last = epoch == config.epochs - 1
        for b in range(batch_count):
            sel = perms[:, b * config.batch_size : (b + 1) * config.batch_size]
            if sel.shape[1] == 0:
                continue
            take_g = np.arange(g_count)[:, None]
            enc = enc_all[take_g, sel]
            labels = labels_all[take_g, sel]
            if plan is not None:
                batch_loss, correct, grad = engine.value_and_grad(
                    plan, params, enc, labels, noise, config.n_classes
                )
            else:
                batch_loss, correct, grad = _generic_value_and_grad(
                    params, enc, labels, noise, circuit, layout, config.n_classes
                )
            if last:
                final_loss += batch_loss * sel.shape[1]
                final_correct += correct
            adam, params = adam_step(adam, params, grad)

    stats = [
        TrainStats(
            loss=float(final_loss[g] / n),
            accuracy=float(final_correct[g] / n),
            n_samples=n,
        )
        for g in range(g_count)
    ]
    return params, stats


def _generic_value_and_grad(params, enc, labels, noise, circuit, layout, n_classes):
    """Slow per-sample fallback for circuit shapes the fast path rejects."""
    program = build_program(circuit, layout)
    g_count, b_count = enc.shape[:2]
    losses = np.zeros(g_count)
    correct = np.zeros(g_count)
    grads = np.zeros((g_count, program.n_params))
    for g in range(g_count):
        for b in range(b_count):
            label = int(labels[g, b])

            def tail(z):
                lp = log_softmax(z[:n_classes])
                dz = np.zeros_like(z)
                soft = np.exp(lp)
                soft[label] -= 1.0
                dz[:n_classes] = soft
                return -lp[label], dz

            grads[g] += qsim.gradient(params[g], enc[g, b], program, noise, tail)
            z = qsim.run_circuit(params[g], enc[g, b], program, noise)
            lp = log_softmax(z[:n_classes])
            losses[g] += -lp[label]
            correct[g] += 1.0 if int(np.argmax(lp)) == label else 0.0
    return losses / b_count, correct, grads / b_count
