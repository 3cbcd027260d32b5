"""Exception hierarchy shared by all kdlab modules."""


class KdlabError(Exception):
    pass


class ShapeError(KdlabError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(KdlabError):
    """Numerically invalid input (division by ~0, non-finite intermediate)."""


class UsageError(KdlabError):
    """API misuse: wrong call order, invalid axes, non-scalar loss, etc."""


class ConfigError(KdlabError):
    """Malformed or contradictory configuration."""


class FormatError(KdlabError):
    """Corrupt or mismatched serialized artifact (weight files, configs)."""


class TrainingError(KdlabError):
    """Training diverged (NaN/Inf loss)."""


class VerificationError(KdlabError):
    """A verification suite check exceeded its tolerance."""
