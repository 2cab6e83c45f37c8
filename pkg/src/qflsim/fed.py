"""Federation orchestration: clusters, consensus topologies, rounds, baselines.

Clients train locally per round; each server aggregates its cluster into an
intermediate model (LOCAL_UPDATE and INTERMEDIATE blocks on the cluster's
chain); servers reach consensus under the round's topology; the agreed
global model is quorum-committed to the shard chain and redistributed.

Summation order is part of the contract: aggregates and consensus sums
accumulate in id order, so star and ring leave every server with the same
bits and replays are exact. The random topology deliberately stops after K
gossip steps without equalizing; clusters then continue from their own
server's value, which is the mechanism that makes it mix (and score) worse.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import ledger, qnn, qsim
from .engine import log_softmax
from .errors import ConfigError, DataError, RoundAborted

TOPOLOGIES = ("star", "ring", "random")
METHODS = ("dense_central", "dense_fl", "qnn_central", "qfl_central", "dqfl")

_TOPOLOGY_SALT = 0x701
_INIT_SALT = 0x117


@dataclass(frozen=True)
class FederationConfig:
    n_servers: int = 3
    clients_per_server: int = 5
    global_rounds: int = 100
    topology: str = "ring"
    gossip_steps: int = 5
    random_edge_prob: float = 0.5
    seed: int = 0
    fault_round: int | None = None  # inject a dissenting vote at this round
    fault_server: int = 0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.n_servers < 1 or self.clients_per_server < 1:
            raise ConfigError("need at least one server and one client")
        if self.n_servers == 1 and self.topology in ("ring", "random"):
            raise ConfigError(
                f"{self.topology} topology needs at least 2 servers; "
                "use star for a single-server run"
            )
        if self.gossip_steps < 1:
            raise ConfigError("gossip_steps must be >= 1")
        if not (0.0 < self.random_edge_prob <= 1.0):
            raise ConfigError("random_edge_prob must be in (0, 1]")

    @property
    def total_clients(self) -> int:
        return self.n_servers * self.clients_per_server


@dataclass(frozen=True)
class ClusterTopology:
    round_index: int
    kind: str
    edges: tuple[tuple[int, int], ...]
    hub: int | None = None


def client_seed(master_seed: int, round_index: int, client_id: int) -> int:
    """Per-(round, client) RNG seed; independent of execution order."""
    seq = np.random.SeedSequence([master_seed, round_index, client_id])
    return int(seq.generate_state(1)[0])


def initial_params_seed(master_seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, _INIT_SALT])


def sample_topology(cfg: FederationConfig, round_index: int) -> ClusterTopology:
    """The round's server communication graph; RANDOM resamples until connected."""
    s = cfg.n_servers
    if cfg.topology == "star":
        hub = round_index % s
        edges = tuple(
            (min(hub, j), max(hub, j)) for j in range(s) if j != hub
        )
        return ClusterTopology(round_index, "star", edges, hub=hub)
    if cfg.topology == "ring":
        edges = tuple(
            (min(i, (i + 1) % s), max(i, (i + 1) % s)) for i in range(s)
        ) if s > 2 else (((0, 1),) if s == 2 else ())
        return ClusterTopology(round_index, "ring", tuple(sorted(set(edges))))
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, round_index, _TOPOLOGY_SALT])
    )
    pairs = [(i, j) for i in range(s) for j in range(i + 1, s)]
    for _ in range(10000):
        mask = rng.random(len(pairs)) < cfg.random_edge_prob
        edges = tuple(p for p, keep in zip(pairs, mask) if keep)
        if _connected(edges, s):
            return ClusterTopology(round_index, "random", edges)
    raise ConfigError("could not sample a connected random graph")


def _connected(edges, s) -> bool:
    if s == 1:
        return True
    seen = {0}
    frontier = [0]
    adj = {i: [] for i in range(s)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    while frontier:
        node = frontier.pop()
        for nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return len(seen) == s


def metropolis_weights(topology: ClusterTopology, s: int) -> np.ndarray:
    """Symmetric doubly-stochastic gossip matrix: W_ij = 1/(1+max(deg))."""
    w = np.zeros((s, s))
    deg = np.zeros(s, dtype=int)
    for a, b in topology.edges:
        deg[a] += 1
        deg[b] += 1
    for a, b in topology.edges:
        w[a, b] = w[b, a] = 1.0 / (1.0 + max(deg[a], deg[b]))
    for i in range(s):
        w[i, i] = 1.0 - w[i].sum()
    return w


def ordered_mean(vectors) -> np.ndarray:
    """Sum in id order then divide; the contractual aggregation arithmetic."""
    vectors = list(vectors)
    if not vectors:
        raise ConfigError("cannot average zero vectors")
    acc = np.array(vectors[0], dtype=float, copy=True)
    for vec in vectors[1:]:
        acc += vec
    return acc / len(vectors)


def intra_cluster_aggregate(client_params, weights=None) -> np.ndarray:
    """Sample-count-weighted mean per coordinate; plain mean when equal."""
    client_params = [np.asarray(p, dtype=float) for p in client_params]
    if not client_params:
        raise ConfigError("cannot aggregate an empty client list")
    length = client_params[0].shape
    if any(p.shape != length for p in client_params):
        raise ConfigError("client parameter vectors differ in length")
    if weights is None:
        return ordered_mean(client_params)
    weights = [float(w) for w in weights]
    if len(weights) != len(client_params):
        raise ConfigError("one weight per client required")
    if len(set(weights)) == 1:
        return ordered_mean(client_params)
    acc = weights[0] * client_params[0]
    for w, p in zip(weights[1:], client_params[1:]):
        acc += w * p
    return acc / sum(weights)


@dataclass(frozen=True)
class ConsensusResult:
    models: np.ndarray  # (S, P) per-server post-consensus parameters
    candidate: np.ndarray  # (P,) the model of record for the round
    messages: int


def inter_server_consensus(
    models, topology: ClusterTopology, gossip_steps: int = 5
) -> ConsensusResult:
    """Consensus across server intermediates under the round's topology.

    star: hub collects, averages in id order, broadcasts; 2(S-1) messages.
    ring: all-reduce of id-ordered partial sums; S(S-1) messages; every
        server lands on identical bits.
    random: K synchronous Metropolis gossip steps; 2*K*|E| messages;
        servers may end unequal, and the candidate is their id-ordered mean.
    """
    models = np.asarray(models, dtype=float)
    s = models.shape[0]
    if s == 1:
        return ConsensusResult(models.copy(), models[0].copy(), 0)
    if topology.kind in ("star", "ring"):
        mean = ordered_mean(models)
        out = np.tile(mean, (s, 1))
        messages = 2 * (s - 1) if topology.kind == "star" else s * (s - 1)
        return ConsensusResult(out, mean, messages)
    w = metropolis_weights(topology, s)
    out = models.copy()
    for _ in range(gossip_steps):
        out = w @ out
    candidate = ordered_mean(out)
    messages = 2 * gossip_steps * len(topology.edges)
    return ConsensusResult(out, candidate, messages)


# ---------------------------------------------------------------------------
# federation state and rounds
# ---------------------------------------------------------------------------

@dataclass
class LedgerSet:
    store: ledger.ParamStore
    lmucs: list[ledger.Chain]
    shard: ledger.Chain
    global_chain: ledger.Chain

    def all_chains(self):
        return [self.global_chain, self.shard, *self.lmucs]


@dataclass
class FederationState:
    round_index: int
    cluster_models: np.ndarray  # (S, P)


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    global_accuracy: float
    global_loss: float
    per_server: tuple[tuple[float, float], ...]  # (accuracy, loss) per server
    messages: int
    bytes_modeled: int


@dataclass(frozen=True)
class RunContext:
    fed: FederationConfig
    train: qnn.TrainConfig = qnn.TrainConfig()
    circuit: qnn.CircuitSpec = qnn.CircuitSpec()
    layout: qnn.EncodingLayout = qnn.EncodingLayout()
    noise: qsim.NoiseConfig = qsim.NoiseConfig()
    workers: int = 1  # cap on parallel client-training tasks

    @property
    def payload_bytes(self) -> int:
        return 8 + 8 * self.circuit.n_params


def init_ledgers(ctx: RunContext, init_params: np.ndarray) -> LedgerSet:
    """Fresh chains: a TASK_PUBLISH record plus the round-0 model commit."""
    store = ledger.ParamStore()
    global_chain = ledger.Chain(tier=ledger.TIER_GLOBAL, owner="global")
    ledger.append_block(
        global_chain, store, ledger.KIND_TASK_PUBLISH, "publisher",
        init_params, (0.0, 0.0), 0,
    )
    shard = ledger.Chain(tier=ledger.TIER_SHARD, owner="task-0")
    candidate_digest = ledger.digest(ledger.canonical_serialize(init_params))
    votes = {f"server-{s}": candidate_digest for s in range(ctx.fed.n_servers)}
    result = ledger.quorum_commit(
        candidate_digest, votes, [f"server-{s}" for s in range(ctx.fed.n_servers)]
    )
    if not result.committed:
        raise RoundAborted(0, result.dissenters)
    ledger.append_block(
        shard, store, ledger.KIND_GLOBAL, "server-0", init_params, (0.0, 0.0), 0
    )
    lmucs = [
        ledger.Chain(tier=ledger.TIER_LMUC, owner=f"server-{s}")
        for s in range(ctx.fed.n_servers)
    ]
    return LedgerSet(store=store, lmucs=lmucs, shard=shard, global_chain=global_chain)


def evaluate(params, test_set, ctx: RunContext):
    """(accuracy, mean loss) on the held-out set, batched."""
    features, labels = test_set
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty test set")
    logits = qnn.predict_logits(
        params, features, ctx.circuit, ctx.layout, ctx.noise
    )
    lp = qnn.log_softmax(logits[:, : ctx.train.n_classes])
    accuracy = float((lp.argmax(axis=1) == labels).mean())
    mean_loss = float(-lp[np.arange(len(labels)), labels].mean())
    return accuracy, mean_loss


def _train_all_clients(ctx: RunContext, state, shards, round_index):
    """Every client trains from its cluster model; lockstep-grouped by size.

    Returns (params (n_clients, P), stats list) ordered by global client id.
    Neither grouping nor the worker pool can change results: the trainer is
    blockwise-deterministic along the client axis and outputs are placed by
    client id, so workers=1 and workers=N produce identical bits.
    """
    cfg = ctx.fed
    n = cfg.total_clients
    jobs = []
    for cid in range(n):
        server = cid // cfg.clients_per_server
        jobs.append(
            (cid, state.cluster_models[server], shards[cid],
             client_seed(cfg.seed, round_index, cid))
        )
    by_size: dict[int, list] = {}
    for job in jobs:
        by_size.setdefault(len(job[2][1]), []).append(job)
    tasks = []
    workers = max(1, ctx.workers)
    for size in sorted(by_size):
        group = by_size[size]
        chunk = max(1, -(-len(group) // workers))
        for k in range(0, len(group), chunk):
            tasks.append(group[k : k + chunk])

    def run_task(group):
        stack = np.stack([job[1] for job in group])
        return qnn.train_clients(
            stack,
            [job[2] for job in group],
            ctx.train,
            ctx.noise,
            [job[3] for job in group],
            ctx.circuit,
            ctx.layout,
        )

    out_params = [None] * n
    out_stats = [None] * n
    if workers == 1 or len(tasks) == 1:
        results = [run_task(task) for task in tasks]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_task, tasks))
    for group, (trained, stats) in zip(tasks, results):
        for k, job in enumerate(group):
            out_params[job[0]] = trained[k]
            out_stats[job[0]] = stats[k]
    return np.stack(out_params), out_stats


def run_round(
    state: FederationState,
    ctx: RunContext,
    ledgers: LedgerSet,
    shards,
    test_set,
) -> tuple[FederationState, RoundMetrics]:
    """One full federated round; commits blocks and returns fresh state.

    On quorum failure the round aborts: cluster models roll back to the
    last committed global model and RoundAborted is raised. Blocks already
    appended for the failed attempt stay on the chains for audit.
    """
    cfg = ctx.fed
    r = state.round_index + 1
    client_params, client_stats = _train_all_clients(ctx, state, shards, r)

    intermediates = []
    for s in range(cfg.n_servers):
        lmuc = ledgers.lmucs[s]
        lo = s * cfg.clients_per_server
        hi = lo + cfg.clients_per_server
        for cid in range(lo, hi):
            stats = client_stats[cid]
            ledger.append_block(
                lmuc, ledgers.store, ledger.KIND_LOCAL_UPDATE, f"client-{cid}",
                client_params[cid], (stats.loss, stats.accuracy), r,
            )
        weights = [client_stats[cid].n_samples for cid in range(lo, hi)]
        intermediate = intra_cluster_aggregate(
            [client_params[cid] for cid in range(lo, hi)], weights
        )
        cluster_loss = float(np.mean([client_stats[c].loss for c in range(lo, hi)]))
        cluster_acc = float(np.mean([client_stats[c].accuracy for c in range(lo, hi)]))
        ledger.append_block(
            lmuc, ledgers.store, ledger.KIND_INTERMEDIATE, f"server-{s}",
            intermediate, (cluster_loss, cluster_acc), r,
        )
        intermediates.append(intermediate)

    for s in range(cfg.n_servers):
        ledger.cross_chain_commit(
            ledgers.lmucs[s], ledgers.store, ledgers.shard, f"server-{s}", r
        )

    topology = sample_topology(cfg, r)
    consensus = inter_server_consensus(
        np.stack(intermediates), topology, cfg.gossip_steps
    )

    candidate_digest = ledger.digest(
        ledger.canonical_serialize(consensus.candidate)
    )
    votes = {}
    for s in range(cfg.n_servers):
        if cfg.fault_round == r and cfg.fault_server == s:
            votes[f"server-{s}"] = ledger.digest(b"fault-injected" + bytes([s]))
        else:
            votes[f"server-{s}"] = candidate_digest
    quorum = ledger.quorum_commit(
        candidate_digest, votes, [f"server-{s}" for s in range(cfg.n_servers)]
    )
    if not quorum.committed:
        previous = ledger.rollback(ledgers.shard, ledgers.store, state.round_index)
        state.cluster_models = np.tile(previous, (cfg.n_servers, 1))
        raise RoundAborted(r, quorum.dissenters)

    global_acc, global_loss = evaluate(consensus.candidate, test_set, ctx)
    ledger.append_block(
        ledgers.shard, ledgers.store, ledger.KIND_GLOBAL,
        f"server-{r % cfg.n_servers}", consensus.candidate,
        (global_loss, global_acc), r,
    )

    per_server = []
    for s in range(cfg.n_servers):
        if np.array_equal(consensus.models[s], consensus.candidate):
            per_server.append((global_acc, global_loss))
        else:
            acc, lo_ = evaluate(consensus.models[s], test_set, ctx)
            per_server.append((acc, lo_))

    if topology.kind == "random" and cfg.n_servers > 1:
        new_models = consensus.models.copy()
    else:
        new_models = np.tile(consensus.candidate, (cfg.n_servers, 1))

    messages = (
        2 * cfg.total_clients + consensus.messages + cfg.n_servers
    )
    metrics = RoundMetrics(
        round_index=r,
        global_accuracy=global_acc,
        global_loss=global_loss,
        per_server=tuple(per_server),
        messages=messages,
        bytes_modeled=messages * ctx.payload_bytes,
    )
    return FederationState(round_index=r, cluster_models=new_models), metrics


def run_federation(ctx: RunContext, shards, test_set, rounds=None, init_params=None):
    """A full multi-round run; returns (state, ledgers, [RoundMetrics]).

    The metrics list starts with a round-0 row evaluating the initial model.
    """
    cfg = ctx.fed
    if len(shards) != cfg.total_clients:
        raise ConfigError(
            f"expected {cfg.total_clients} client shards, got {len(shards)}"
        )
    if rounds is None:
        rounds = cfg.global_rounds
    if init_params is None:
        init_params = qnn.init_params(
            ctx.circuit, np.random.default_rng(initial_params_seed(cfg.seed))
        )
    ledgers = init_ledgers(ctx, init_params)
    state = FederationState(
        round_index=0,
        cluster_models=np.tile(init_params, (cfg.n_servers, 1)),
    )
    acc0, loss0 = evaluate(init_params, test_set, ctx)
    metrics = [
        RoundMetrics(0, acc0, loss0, ((acc0, loss0),) * cfg.n_servers, 0, 0)
    ]
    for _ in range(rounds):
        state, row = run_round(state, ctx, ledgers, shards, test_set)
        metrics.append(row)
    return state, ledgers, metrics


def resume_federation(ctx, shards, test_set, ledgers, start_round, rounds, params):
    """Continue a run from a rolled-back model, appending to existing chains."""
    cfg = ctx.fed
    ledgers.shard.replay_from(start_round)
    state = FederationState(
        round_index=start_round,
        cluster_models=np.tile(params, (cfg.n_servers, 1)),
    )
    metrics = []
    for _ in range(rounds):
        state, row = run_round(state, ctx, ledgers, shards, test_set)
        metrics.append(row)
    return state, metrics


# ---------------------------------------------------------------------------
# dense classical baseline (8 -> 16 -> 4, tanh hidden)
# ---------------------------------------------------------------------------

DENSE_HIDDEN = 16


def dense_param_count(n_features=8, hidden=DENSE_HIDDEN, n_out=4) -> int:
    return n_features * hidden + hidden + hidden * n_out + n_out


def dense_init(seed, n_features=8, hidden=DENSE_HIDDEN, n_out=4) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w1 = rng.uniform(-1, 1, (hidden, n_features)) / np.sqrt(n_features)
    b1 = np.zeros(hidden)
    w2 = rng.uniform(-1, 1, (n_out, hidden)) / np.sqrt(hidden)
    b2 = np.zeros(n_out)
    return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])


def _dense_unpack(params, n_features=8, hidden=DENSE_HIDDEN, n_out=4):
    k1 = n_features * hidden
    w1 = params[..., :k1].reshape(params.shape[:-1] + (hidden, n_features))
    b1 = params[..., k1 : k1 + hidden]
    k2 = k1 + hidden
    w2 = params[..., k2 : k2 + hidden * n_out].reshape(
        params.shape[:-1] + (n_out, hidden)
    )
    b2 = params[..., k2 + hidden * n_out :]
    return w1, b1, w2, b2


def dense_logits(params, features) -> np.ndarray:
    """Forward pass; params (..., P), features (..., B, F) -> (..., B, 4)."""
    w1, b1, w2, b2 = _dense_unpack(np.asarray(params, dtype=float))
    x = np.asarray(features, dtype=float)
    hidden = np.tanh(x @ np.swapaxes(w1, -1, -2) + b1[..., None, :])
    return hidden @ np.swapaxes(w2, -1, -2) + b2[..., None, :]


def dense_value_and_grad(params, features, labels, n_classes=4):
    """Mean CE loss, correct count, gradient; lockstep along a leading axis."""
    params = np.asarray(params, dtype=float)
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    w1, b1, w2, b2 = _dense_unpack(params)
    z1 = x @ np.swapaxes(w1, -1, -2) + b1[..., None, :]
    h = np.tanh(z1)
    logits = h @ np.swapaxes(w2, -1, -2) + b2[..., None, :]
    lp = log_softmax(logits[..., :n_classes])
    g_count, b_count = lp.shape[0], lp.shape[1]
    idx_g, idx_b = np.ogrid[:g_count, :b_count]
    loss = -lp[idx_g, idx_b, labels].mean(axis=-1)
    correct = (lp.argmax(axis=-1) == labels).sum(axis=-1).astype(float)

    dlogit_small = np.exp(lp)
    dlogit_small[idx_g, idx_b, labels] -= 1.0
    dlogit_small /= b_count
    dlogit = np.zeros(logits.shape)
    dlogit[..., :n_classes] = dlogit_small
    dw2 = np.swapaxes(dlogit, -1, -2) @ h
    db2 = dlogit.sum(axis=-2)
    dh = dlogit @ w2
    dz1 = dh * (1.0 - h ** 2)
    dw1 = np.swapaxes(dz1, -1, -2) @ x
    db1 = dz1.sum(axis=-2)
    grad = np.concatenate(
        [dw1.reshape(g_count, -1), db1, dw2.reshape(g_count, -1), db2], axis=-1
    )
    return loss, correct, grad


def dense_train_clients(params_stack, shards, config: qnn.TrainConfig, seeds):
    """Dense-network analogue of qnn.train_clients (same loop structure)."""
    params = np.asarray(params_stack, dtype=float).copy()
    g_count = params.shape[0]
    sizes = {len(s[1]) for s in shards}
    if len(sizes) != 1:
        raise ConfigError("lockstep training requires equal shard sizes")
    n = sizes.pop()
    if n == 0:
        raise DataError("empty training shard")
    feats = np.stack([np.asarray(f, dtype=float) for f, _ in shards])
    labels = np.stack([np.asarray(lab) for _, lab in shards])
    rngs = [np.random.default_rng(s) for s in seeds]
    adam = qnn.init_adam(params.shape, lr=config.lr)
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
            loss, correct, grad = dense_value_and_grad(
                params, feats[take_g, sel], labels[take_g, sel], config.n_classes
            )
            if last:
                final_loss += loss * sel.shape[1]
                final_correct += correct
            adam, params = qnn.adam_step(adam, params, grad)
    stats = [
        qnn.TrainStats(float(final_loss[g] / n), float(final_correct[g] / n), n)
        for g in range(g_count)
    ]
    return params, stats


def dense_evaluate(params, test_set, n_classes=4):
    features, labels = test_set
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty test set")
    lp = log_softmax(dense_logits(params[None], features[None])[0][:, :n_classes])
    accuracy = float((lp.argmax(axis=1) == labels).mean())
    mean_loss = float(-lp[np.arange(len(labels)), labels].mean())
    return accuracy, mean_loss


# ---------------------------------------------------------------------------
# baseline zoo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodRow:
    round_index: int
    method: str
    accuracy: float
    loss: float
    messages: int


def run_baseline(
    method: str,
    ctx: RunContext,
    shards,
    test_set,
    rounds=None,
    central_data: str = "pooled",
):
    """Per-round metrics for one method on shared shards/test data.

    central methods train one model: on the pooled shards or on client 0's
    shard alone (central_data = "pooled" | "client0"). Federated methods
    reuse the shard partition; qfl_central runs the full pipeline with a
    single server over every client.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if central_data not in ("pooled", "client0"):
        raise ConfigError("central_data must be 'pooled' or 'client0'")
    cfg = ctx.fed
    if rounds is None:
        rounds = cfg.global_rounds

    if method == "dqfl":
        _, _, metrics = run_federation(ctx, shards, test_set, rounds=rounds)
        return [
            MethodRow(m.round_index, method, m.global_accuracy, m.global_loss, m.messages)
            for m in metrics
        ]

    if method == "qfl_central":
        flat_cfg = dataclasses.replace(
            ctx.fed, n_servers=1, clients_per_server=cfg.total_clients,
            topology="star",
        )
        flat_ctx = dataclasses.replace(ctx, fed=flat_cfg)
        _, _, metrics = run_federation(flat_ctx, shards, test_set, rounds=rounds)
        return [
            MethodRow(m.round_index, method, m.global_accuracy, m.global_loss, m.messages)
            for m in metrics
        ]

    if central_data == "pooled":
        feats = np.concatenate([f for f, _ in shards])
        labels = np.concatenate([lab for _, lab in shards])
    else:
        feats, labels = shards[0]
    central_shard = (feats, labels)

    rows = []
    if method == "qnn_central":
        params = qnn.init_params(
            ctx.circuit, np.random.default_rng(initial_params_seed(cfg.seed))
        )
        acc, loss = evaluate(params, test_set, ctx)
        rows.append(MethodRow(0, method, acc, loss, 0))
        for r in range(1, rounds + 1):
            params, _ = qnn.local_train(
                params, central_shard, ctx.train, ctx.noise,
                client_seed(cfg.seed, r, 0), ctx.circuit, ctx.layout,
            )
            acc, loss = evaluate(params, test_set, ctx)
            rows.append(MethodRow(r, method, acc, loss, 0))
        return rows

    if method == "dense_central":
        params = dense_init(np.random.default_rng(initial_params_seed(cfg.seed)))
        acc, loss = dense_evaluate(params, test_set, ctx.train.n_classes)
        rows.append(MethodRow(0, method, acc, loss, 0))
        for r in range(1, rounds + 1):
            stacked, _ = dense_train_clients(
                params[None], [central_shard], ctx.train,
                [client_seed(cfg.seed, r, 0)],
            )
            params = stacked[0]
            acc, loss = dense_evaluate(params, test_set, ctx.train.n_classes)
            rows.append(MethodRow(r, method, acc, loss, 0))
        return rows

    # dense_fl: single-server FedAvg over the same client shards
    global_params = dense_init(np.random.default_rng(initial_params_seed(cfg.seed)))
    acc, loss = dense_evaluate(global_params, test_set, ctx.train.n_classes)
    rows.append(MethodRow(0, method, acc, loss, 0))
    n_clients = len(shards)
    for r in range(1, rounds + 1):
        by_size: dict[int, list] = {}
        for cid in range(n_clients):
            by_size.setdefault(len(shards[cid][1]), []).append(cid)
        outs = [None] * n_clients
        weights = [len(shards[cid][1]) for cid in range(n_clients)]
        for size in sorted(by_size):
            group = by_size[size]
            stack = np.tile(global_params, (len(group), 1))
            trained, _ = dense_train_clients(
                stack, [shards[cid] for cid in group], ctx.train,
                [client_seed(cfg.seed, r, cid) for cid in group],
            )
            for k, cid in enumerate(group):
                outs[cid] = trained[k]
        global_params = intra_cluster_aggregate(outs, weights)
        acc, loss = dense_evaluate(global_params, test_set, ctx.train.n_classes)
        rows.append(MethodRow(r, method, acc, loss, 2 * n_clients))
    return rows
