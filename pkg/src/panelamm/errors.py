"""Exception types shared across the package."""


class PanelAmmError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(PanelAmmError):
    """Configuration problem: bad schema, model spec, or run config."""


class StructuralError(PanelAmmError):
    """Data violates the required panel structure (duplicates, ragged grid, ...)."""


class ParseError(StructuralError):
    """A cell could not be parsed as its declared type."""


class DomainError(PanelAmmError):
    """Input values outside the mathematical domain of an operation."""


class DimensionError(PanelAmmError):
    """Inconsistent or unusable dimensions (basis size, series length, ...)."""


class NumericError(PanelAmmError):
    """A numerically unusable matrix (indefinite penalty, failed factorization)."""
