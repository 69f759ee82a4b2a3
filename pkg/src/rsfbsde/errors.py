"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RsError(Exception):
    exit_code = 3


class ConfigError(RsError):
    """Invalid grid, mark space, parameter or config file."""
    exit_code = 2


class ModelError(RsError):
    """A coefficient evaluated to something outside its contract."""
    exit_code = 3


class RegistrationError(ConfigError):
    pass


class NumericalError(RsError):
    exit_code = 3


class BlowUpError(NumericalError):
    pass


class SolverError(NumericalError):
    pass


class DivergenceError(SolverError):
    pass


class AdjointError(SolverError):
    pass


class CheckFailure(RsError):
    """An enabled verification check did not pass."""
    exit_code = 1
