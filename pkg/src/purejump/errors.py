"""Exception types shared across the package."""


class PureJumpError(Exception):
    """Base class for all errors raised by purejump."""


class ModelError(PureJumpError):
    """A model violates the Q-function contract or cannot serve a request."""


class UnsupportedSpaceError(ModelError):
    """Raised when a quadrature-based operation is asked of a sampler-defined space."""


class ConfigurationError(PureJumpError):
    """Inputs are well-formed but insufficient, e.g. a missing tail declaration."""


class TruncationLeakError(PureJumpError):
    """Mass routed outside the truncation exceeded the caller's ceiling."""

    def __init__(self, message, outside_mass=None):
        super().__init__(message)
        self.outside_mass = outside_mass


class NumericsError(PureJumpError):
    """An internal consistency check failed (monotonicity, stiffness, convergence)."""


class ModelFileError(PureJumpError):
    """A model file is malformed; ``field`` points at the offending entry."""

    def __init__(self, message, field=None, line=None):
        where = []
        if field:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line
