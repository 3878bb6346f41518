"""Shared exception types.

Every failure mode that callers are expected to catch gets a named class;
plain ValueError/RuntimeError are reserved for programming errors.
"""


class KVLabError(Exception):
    """Base class for all lab errors."""


class DimensionError(KVLabError, ValueError):
    """Shape or size of an input is invalid for the operation."""


class ConfigError(KVLabError, ValueError):
    """A configuration object violates its invariants."""


class InvalidTokenError(KVLabError, ValueError):
    """Token id outside the model vocabulary."""


class CacheConsistencyError(KVLabError, RuntimeError):
    """Paged cache state does not match the requested operation."""


class ParseError(KVLabError, ValueError):
    """Malformed container file. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedArchitectureError(KVLabError, RuntimeError):
    """The attack mode requires a weight shape this model does not have."""


class SingularMatrixError(KVLabError, RuntimeError):
    """A matrix that must be inverted is numerically singular."""


class KeyError_(KVLabError, ValueError):
    """Cloak key material is invalid or does not match the data."""


class ObfuscationStateError(KVLabError, RuntimeError):
    """Block is in the wrong state for (de)obfuscation."""


class CorruptionError(KVLabError, RuntimeError):
    """Obfuscated block failed an integrity check during de-obfuscation."""


class OracleInconsistencyError(KVLabError, RuntimeError):
    """A chosen-plaintext oracle returned a response that breaks the attack's assumptions."""
