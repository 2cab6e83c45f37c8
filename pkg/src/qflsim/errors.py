"""Exception types shared across the package."""


class QflError(Exception):
    """Base class for all package errors."""


class ConfigError(QflError):
    """Invalid configuration: bad sizes, unknown keys, out-of-range knobs."""


class DataError(QflError):
    """Invalid data: bad labels, empty shards, out-of-range features."""


class IngestionError(DataError):
    """Malformed dataset file. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(QflError):
    """Non-finite values where finite ones are required."""


class ProtocolError(QflError):
    """Ledger protocol violation: kind/tier mismatch, failed verification."""


class RoundAborted(QflError):
    """A federation round failed its quorum check and was rolled back."""

    def __init__(self, round_index, dissenters):
        super().__init__(
            f"round {round_index} rejected by quorum; dissenters: {sorted(dissenters)}"
        )
        self.round_index = round_index
        self.dissenters = list(dissenters)
