"""Exception hierarchy.

Every error carries a short ``category`` used by the command line to print
``error: <category>: <detail>``.
"""


class RdnError(Exception):
    category = "error"


class ContractError(RdnError, ValueError):
    """A precondition on shapes, ranges or arity was violated."""

    category = "contract"


class DegeneracyError(RdnError, ValueError):
    """Input geometry does not determine a unique model."""

    category = "degenerate"


class NoConsensusError(DegeneracyError):
    category = "no-consensus"


class DegeneratePoolError(RdnError, ValueError):
    """No negative candidates survive the safe-radius exclusion."""

    category = "degenerate-pool"


class TrainingDivergenceError(RdnError, FloatingPointError):
    category = "divergence"


class GradCheckError(RdnError, FloatingPointError):
    category = "gradcheck"


class FixtureError(RdnError, ValueError):
    category = "fixture"


class DecodeError(RdnError, ValueError):
    category = "decode"


class MagicMismatchError(DecodeError):
    category = "decode-magic"


class VersionMismatchError(DecodeError):
    category = "decode-version"


class TruncatedFileError(DecodeError):
    category = "decode-truncated"


class ChecksumError(DecodeError):
    category = "decode-checksum"


class ShapeMismatchError(DecodeError):
    category = "decode-shape"


class ConfigError(RdnError, ValueError):
    category = "config"
