"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad argument, configuration, or dimension mismatch."""


class ParseError(ValueError):
    """Malformed input file; message names the path and offending line."""


class NumericalError(ArithmeticError):
    """Numerical failure: rank deficiency, zero-norm feature, non-finite loss."""


class StaleTraceError(RuntimeError):
    """A forward trace was replayed against parameters it was not built from."""
