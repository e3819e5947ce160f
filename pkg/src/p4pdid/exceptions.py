"""Exception hierarchy shared by all pipeline stages."""


class P4PError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(P4PError, ValueError):
    """Data violates a domain invariant. May carry a 1-based line and a column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class SchemaError(ValidationError):
    """Row cannot be parsed against the input schema."""


class ConfigError(P4PError, ValueError):
    """Invalid configuration or generator truth."""


class SingularMatrixError(P4PError, ArithmeticError):
    """Cholesky pivot fell below the positive-definiteness threshold."""

    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class SeparationError(P4PError, ArithmeticError):
    """Logistic fit diverges because the outcome is (quasi-)separated."""


class LineSearchError(P4PError, ArithmeticError):
    """Line search met a non-finite objective and could not recover."""


class StructureError(P4PError, ValueError):
    """Grouping structure cannot support the requested random effects."""


class DesignError(P4PError, ValueError):
    """DID design matrix is rank deficient or otherwise unusable."""

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        super().__init__(message)


class SchemeMismatchError(P4PError, ValueError):
    """Operation requested terms that the interaction scheme does not have."""


class RankError(P4PError, ArithmeticError):
    """Residual cross-product matrix of a multivariate test is singular."""
