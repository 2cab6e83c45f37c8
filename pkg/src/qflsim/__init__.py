"""Deterministic simulator for ledger-anchored decentralized quantum
federated learning: noisy variational circuits trained on image features,
federated across server clusters with topology-based consensus, every model
update committed to hash-chained, auditable, rollback-capable ledgers."""

__version__ = "0.1.0"
