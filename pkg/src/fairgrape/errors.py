"""Exception hierarchy for the pruning toolkit.

Every error carries the process exit code the CLI should use when it escapes.
"""


class FairGrapeError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ConfigError(FairGrapeError):
    """Invalid or inconsistent experiment configuration"""
    exit_code = 2


class DataError(FairGrapeError):
    """Malformed, empty or inconsistent dataset"""
    exit_code = 3


class NumericError(FairGrapeError):
    """A NaN or Inf appeared in a computation"""
    exit_code = 4


class DimensionError(FairGrapeError, ValueError):
    """Operand shapes do not line up"""


class DomainError(FairGrapeError, ValueError):
    """Input outside the domain of an operation (e.g. log of a non-positive entry)"""


class ContractError(FairGrapeError):
    """A caller broke an operation's precondition"""


class DegenerateImportanceError(FairGrapeError):
    """Importance totals are all zero, so shares or deltas are undefined"""


class MissingSnapshotError(ContractError):
    """A reset was requested on a model that never stored its initial weights"""


class GroupMismatchError(FairGrapeError):
    """Two reports or manifests disagree on the set of sensitive groups"""
