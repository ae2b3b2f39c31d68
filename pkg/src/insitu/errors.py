"""Error types shared across the package.

Shape and value problems raise plain ValueError; the classes here mark the
conditions that callers are expected to branch on (CLI exit codes, protocol
recovery, file parsing).
"""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (CLI exit code 2)."""


class FormatError(ValueError):
    """Malformed file content (PGM, raw binary, IDX, CSV)."""


class ProtocolError(RuntimeError):
    """Framing or message-level violation on the instrument link."""


class InstrumentError(RuntimeError):
    """Instrument unreachable or failed mid-run (CLI exit code 3)."""
