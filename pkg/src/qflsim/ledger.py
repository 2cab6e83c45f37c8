"""Append-only hash-chained ledgers with a content-addressed parameter store.

Three tiers: per-cluster local model update chains (kind LOCAL_UPDATE /
INTERMEDIATE), one task shard chain (INTERMEDIATE cross-commits plus one
GLOBAL block per round), and a global chain of TASK_PUBLISH records. Blocks
hold digests; full parameter payloads live in the store, keyed by their
own digest.

A block's hash covers its persisted text record minus the hash field
itself, so verification works from files alone. Timestamps are the logical
round counter, never wall time, keeping every run reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProtocolError

HASH_BYTES = 32
ZERO_DIGEST = b"\x00" * HASH_BYTES

TIER_GLOBAL, TIER_SHARD, TIER_LMUC = "GLOBAL", "SHARD", "LMUC"
KIND_TASK_PUBLISH = "TASK_PUBLISH"
KIND_LOCAL_UPDATE = "LOCAL_UPDATE"
KIND_INTERMEDIATE = "INTERMEDIATE"
KIND_GLOBAL = "GLOBAL"

_ALLOWED_KINDS = {
    TIER_LMUC: {KIND_LOCAL_UPDATE, KIND_INTERMEDIATE},
    TIER_SHARD: {KIND_GLOBAL, KIND_INTERMEDIATE},
    TIER_GLOBAL: {KIND_TASK_PUBLISH},
}

_FIELD_ORDER = (
    "v", "tier", "owner", "height", "round", "ts", "kind", "producer",
    "param_digest", "payload_ref", "loss", "acc", "prev", "hash",
)
_PRODUCER_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


def digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def canonical_serialize(values) -> bytes:
    """8-byte little-endian count, then IEEE-754 binary64 little-endian."""
    arr = np.asarray(values, dtype="<f8").ravel()
    if not np.isfinite(arr).all():
        raise ProtocolError("cannot serialize non-finite parameter values")
    return arr.size.to_bytes(8, "little") + arr.tobytes()


def canonical_deserialize(payload: bytes) -> np.ndarray:
    if len(payload) < 8:
        raise ProtocolError("payload shorter than its length header")
    count = int.from_bytes(payload[:8], "little")
    if len(payload) != 8 + 8 * count:
        raise ProtocolError(
            f"payload length {len(payload)} does not match count {count}"
        )
    return np.frombuffer(payload, dtype="<f8", count=count, offset=8).copy()


@dataclass(frozen=True)
class Block:
    tier: str
    owner: str
    height: int
    round: int
    timestamp: int
    kind: str
    producer: str
    param_digest: bytes
    payload_ref: bytes
    loss: float
    accuracy: float
    prev_hash: bytes
    block_hash: bytes = b""

    def record_prefix(self) -> str:
        """The persisted key-value text minus the trailing hash field."""
        parts = [
            "v=1",
            f"tier={self.tier}",
            f"owner={self.owner}",
            f"height={self.height}",
            f"round={self.round}",
            f"ts={self.timestamp}",
            f"kind={self.kind}",
            f"producer={self.producer}",
            f"param_digest={self.param_digest.hex()}",
            f"payload_ref={self.payload_ref.hex()}",
            f"loss={self.loss!r}",
            f"acc={self.accuracy!r}",
            f"prev={self.prev_hash.hex()}",
        ]
        return " ".join(parts)

    def compute_hash(self) -> bytes:
        return digest(self.record_prefix().encode("ascii"))

    def record_line(self) -> str:
        return f"{self.record_prefix()} hash={self.block_hash.hex()}"


class ParamStore:
    """Content-addressed parameter payloads: digest -> canonical bytes."""

    def __init__(self):
        self._payloads: dict[bytes, bytes] = {}

    def put(self, payload: bytes) -> bytes:
        key = digest(payload)
        self._payloads[key] = payload
        return key

    def put_params(self, values) -> bytes:
        return self.put(canonical_serialize(values))

    def get(self, key: bytes) -> bytes:
        if key not in self._payloads:
            raise ProtocolError(f"payload {key.hex()} not in store")
        return self._payloads[key]

    def get_params(self, key: bytes) -> np.ndarray:
        return canonical_deserialize(self.get(key))

    def __contains__(self, key: bytes) -> bool:
        return key in self._payloads

    def __len__(self) -> int:
        return len(self._payloads)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for key, payload in sorted(self._payloads.items()):
            (directory / key.hex()).write_bytes(payload)

    @classmethod
    def load(cls, directory) -> "ParamStore":
        store = cls()
        directory = Path(directory)
        if directory.is_dir():
            for path in sorted(directory.iterdir()):
                store._payloads[bytes.fromhex(path.name)] = path.read_bytes()
        return store


@dataclass
class Chain:
    tier: str
    owner: str
    blocks: list[Block] = field(default_factory=list)
    # rounds <= this floor are rejected for GLOBAL appends; rollback recovery
    # lowers it explicitly so a replay may re-commit rounds already on chain
    _next_global_floor: int | None = None

    @property
    def head(self) -> Block | None:
        return self.blocks[-1] if self.blocks else None

    def last_global_round(self) -> int | None:
        for block in reversed(self.blocks):
            if block.kind == KIND_GLOBAL:
                return block.round
        return None

    def global_round_floor(self) -> int | None:
        if self._next_global_floor is not None:
            return self._next_global_floor
        return self.last_global_round()

    def replay_from(self, round_index: int):
        """Open a rollback-replay segment: next GLOBAL must exceed round_index."""
        self._next_global_floor = round_index


def append_block(
    chain: Chain,
    store: ParamStore,
    kind: str,
    producer: str,
    params,
    metrics=(0.0, 0.0),
    round_index: int = 0,
) -> Block:
    """Store the payload, build, hash, link, and append one block."""
    if kind not in _ALLOWED_KINDS[chain.tier]:
        raise ProtocolError(f"kind {kind} not allowed on tier {chain.tier}")
    if not _PRODUCER_RE.match(producer):
        raise ProtocolError(f"invalid producer id {producer!r}")
    if kind == KIND_GLOBAL:
        floor = chain.global_round_floor()
        if floor is not None and round_index <= floor:
            raise ProtocolError(
                f"GLOBAL block for round {round_index} already present"
            )
    loss, accuracy = metrics
    if not (math.isfinite(loss) and math.isfinite(accuracy)):
        raise ProtocolError("block metrics must be finite")
    payload_ref = store.put_params(params)
    prev = chain.head.block_hash if chain.blocks else ZERO_DIGEST
    block = Block(
        tier=chain.tier,
        owner=chain.owner,
        height=len(chain.blocks),
        round=round_index,
        timestamp=round_index,
        kind=kind,
        producer=producer,
        param_digest=payload_ref,
        payload_ref=payload_ref,
        loss=float(loss),
        accuracy=float(accuracy),
        prev_hash=prev,
    )
    block = dataclasses.replace(block, block_hash=block.compute_hash())
    chain.blocks.append(block)
    if kind == KIND_GLOBAL:
        chain._next_global_floor = round_index
    return block


def verify_chain(chain: Chain, store: ParamStore) -> int | None:
    """Recompute every hash, linkage, and payload digest.

    Returns None when clean, otherwise the lowest failing height.
    """
    prev = ZERO_DIGEST
    for expected_height, block in enumerate(chain.blocks):
        if block.height != expected_height:
            return expected_height
        if block.prev_hash != prev:
            return expected_height
        if block.kind not in _ALLOWED_KINDS.get(block.tier, ()):
            return expected_height
        if block.compute_hash() != block.block_hash:
            return expected_height
        if block.payload_ref not in store:
            return expected_height
        if digest(store.get(block.payload_ref)) != block.param_digest:
            return expected_height
        prev = block.block_hash
    return None


# ---------------------------------------------------------------------------
# quorum commit and cross-chain commit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuorumResult:
    committed: bool
    dissenters: tuple[str, ...]
    threshold: int


def quorum_threshold(n_servers: int) -> int:
    """Matching votes required: floor(2S/3) + 1."""
    return (2 * n_servers) // 3 + 1


def quorum_commit(candidate_digest: bytes, votes, servers) -> QuorumResult:
    """One-shot digest vote. Missing or mismatched votes count as dissent."""
    servers = list(servers)
    if not servers:
        raise ConfigError("need at least one server for a quorum")
    threshold = quorum_threshold(len(servers))
    dissenters = tuple(
        s for s in servers if votes.get(s) != candidate_digest
    )
    matching = len(servers) - len(dissenters)
    return QuorumResult(
        committed=matching >= threshold,
        dissenters=dissenters,
        threshold=threshold,
    )


def cross_chain_commit(
    lmuc: Chain, store: ParamStore, shard: Chain, server_id: str, round_index: int
) -> Block:
    """Mirror a verified LMUC head onto the shard chain as an INTERMEDIATE."""
    bad = verify_chain(lmuc, store)
    if bad is not None:
        raise ProtocolError(
            f"LMUC {lmuc.owner} fails verification at height {bad}"
        )
    head = lmuc.head
    if head is None:
        raise ProtocolError(f"LMUC {lmuc.owner} is empty")
    params = store.get_params(head.payload_ref)
    return append_block(
        shard,
        store,
        KIND_INTERMEDIATE,
        server_id,
        params,
        metrics=(head.loss, head.accuracy),
        round_index=round_index,
    )


def rollback(shard: Chain, store: ParamStore, target_round: int) -> np.ndarray:
    """Parameters recorded by target_round's GLOBAL block.

    Chains are never truncated: recovery reads the audited model and
    restarts training from it, appending fresh blocks at new heights.
    """
    for block in reversed(shard.blocks):
        if block.kind == KIND_GLOBAL and block.round == target_round:
            return store.get_params(block.payload_ref)
    raise ProtocolError(f"no GLOBAL block recorded for round {target_round}")


# ---------------------------------------------------------------------------
# persistence: one text file per chain + a payload directory
# ---------------------------------------------------------------------------

CHAIN_SUFFIX = ".chain"
PARAMS_DIRNAME = "params"
CHAINS_DIRNAME = "chains"


class LedgerDir:
    """A ledger root on disk: chains/<owner>.chain plus params/<digest>."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def chains_dir(self) -> Path:
        return self.root / CHAINS_DIRNAME

    @property
    def params_dir(self) -> Path:
        return self.root / PARAMS_DIRNAME

    def save(self, chains, store: ParamStore):
        self.chains_dir.mkdir(parents=True, exist_ok=True)
        for chain in chains:
            path = self.chains_dir / f"{chain.owner}{CHAIN_SUFFIX}"
            lines = [block.record_line() for block in chain.blocks]
            path.write_text("".join(line + "\n" for line in lines))
        store.save(self.params_dir)

    def load(self):
        """(chains, store); raises ProtocolError when the layout is missing."""
        if not self.chains_dir.is_dir():
            raise ProtocolError(f"no chains directory under {self.root}")
        chains = []
        for path in sorted(self.chains_dir.glob(f"*{CHAIN_SUFFIX}")):
            chains.append(load_chain_file(path))
        if not chains:
            raise ProtocolError(f"no chain files under {self.chains_dir}")
        store = ParamStore.load(self.params_dir)
        return chains, store


class RecordError(ProtocolError):
    def __init__(self, height, message):
        super().__init__(f"record {height}: {message}")
        self.height = height


def parse_record(line: str, height: int) -> Block:
    fields = {}
    for part in line.strip().split(" "):
        if "=" not in part:
            raise RecordError(height, f"malformed field {part!r}")
        key, value = part.split("=", 1)
        if key in fields:
            raise RecordError(height, f"duplicate field {key!r}")
        fields[key] = value
    if tuple(fields) != _FIELD_ORDER:
        raise RecordError(height, "unexpected field set or order")
    if fields["v"] != "1":
        raise RecordError(height, f"unknown record version {fields['v']!r}")
    try:
        return Block(
            tier=fields["tier"],
            owner=fields["owner"],
            height=int(fields["height"]),
            round=int(fields["round"]),
            timestamp=int(fields["ts"]),
            kind=fields["kind"],
            producer=fields["producer"],
            param_digest=_hex32(fields["param_digest"]),
            payload_ref=_hex32(fields["payload_ref"]),
            loss=float(fields["loss"]),
            accuracy=float(fields["acc"]),
            prev_hash=_hex32(fields["prev"]),
            block_hash=_hex32(fields["hash"]),
        )
    except (ValueError, ProtocolError) as err:
        raise RecordError(height, str(err)) from err


_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")


def _hex32(text: str) -> bytes:
    # strict lowercase: case-flipped hex must not round-trip silently
    if not _HEX64_RE.match(text):
        raise ProtocolError(f"invalid lowercase hex digest {text!r}")
    return bytes.fromhex(text)


def load_chain_file(path) -> Chain:
    path = Path(path)
    blocks = []
    tier = owner = None
    for height, line in enumerate(path.read_text().splitlines()):
        block = parse_record(line, height)
        if tier is None:
            tier, owner = block.tier, block.owner
        blocks.append(block)
    if tier is None:
        tier, owner = TIER_LMUC, path.stem
    chain = Chain(tier=tier, owner=owner, blocks=blocks)
    return chain


def _verify_chain_file(path, store: ParamStore) -> int | None:
    """First bad height in one chain file, hashing the raw record bytes.

    The hash check covers the persisted prefix exactly as written, so any
    byte mutation fails even when field parsing would round-trip it.
    """
    prev = ZERO_DIGEST
    blocks = []
    raw_lines = Path(path).read_bytes().split(b"\n")
    if raw_lines and raw_lines[-1] == b"":
        raw_lines.pop()
    for height, raw in enumerate(raw_lines):
        head, sep, hash_bytes = raw.rpartition(b" hash=")
        try:
            hash_text = hash_bytes.decode("ascii")
            line = raw.decode("ascii")
        except UnicodeDecodeError:
            return height
        if not sep or not _HEX64_RE.match(hash_text):
            return height
        if digest(head) != bytes.fromhex(hash_text):
            return height
        try:
            block = parse_record(line, height)
        except RecordError:
            return height
        if block.height != height or block.prev_hash != prev:
            return height
        if block.kind not in _ALLOWED_KINDS.get(block.tier, ()):
            return height
        if block.payload_ref not in store:
            return height
        if digest(store.get(block.payload_ref)) != block.param_digest:
            return height
        prev = block.block_hash
        blocks.append(block)
    return None


def verify_directory(root):
    """Verify every chain file and payload under a ledger root.

    Returns a dict chain-owner -> first bad height (None when clean).
    Parse failures count as a failure at the offending record's height;
    payload files whose content no longer matches their digest name are
    reported under "params".
    """
    ledger = LedgerDir(root)
    if not ledger.chains_dir.is_dir():
        raise ProtocolError(f"no chains directory under {root}")
    chain_paths = sorted(ledger.chains_dir.glob(f"*{CHAIN_SUFFIX}"))
    if not chain_paths:
        raise ProtocolError(f"no chain files under {ledger.chains_dir}")
    store = ParamStore.load(ledger.params_dir)
    results = {}
    for path in chain_paths:
        results[path.stem] = _verify_chain_file(path, store)
    if ledger.params_dir.is_dir():
        for payload_path in sorted(ledger.params_dir.glob("*")):
            if not _HEX64_RE.match(payload_path.name) or digest(
                payload_path.read_bytes()
            ) != bytes.fromhex(payload_path.name):
                results.setdefault("params", -1)
    return results
