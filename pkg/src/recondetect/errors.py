"""Exception hierarchy shared by the testbed."""


class TestbedError(Exception):
    """Base class; carries a process exit code for the command line."""

    exit_code = 2


class ConfigError(TestbedError, ValueError):
    exit_code = 1


class DomainError(TestbedError, ValueError):
    """An argument outside the domain an operation is defined on."""

    exit_code = 1


class IntegrationError(TestbedError, ArithmeticError):
    """Non-finite state or adjoint during an ODE/SDE integration."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


class NumericError(TestbedError, ArithmeticError):
    pass


class TrainingError(TestbedError, RuntimeError):
    pass


class VerificationError(TestbedError):
    exit_code = 3
