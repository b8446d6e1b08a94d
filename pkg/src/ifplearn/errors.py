"""Exception hierarchy shared by the library and the command line driver.

Each class carries the process exit code the CLI uses when it escapes.
"""

from __future__ import annotations


class IfpError(Exception):
    exit_code = 1


class ConfigError(IfpError, ValueError):
    """Invalid configuration or input; ``path`` locates the offending entry."""

    exit_code = 2

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DomainError(ConfigError):
    pass


class ResourceError(ConfigError):
    pass


class CertificationError(IfpError):
    exit_code = 3

    def __init__(self, message: str, check: str = "", report=None):
        self.check = check
        self.report = report
        super().__init__(message)


class ConvergenceError(IfpError):
    exit_code = 4

    def __init__(self, message: str, history=None):
        self.history = list(history) if history is not None else []
        super().__init__(message)


class NumericalError(IfpError, ArithmeticError):
    exit_code = 5


class LearningError(NumericalError):
    """Observed transition has zero probability under every weighted candidate."""

    def __init__(self, z: int, z_next: int, theta, context: str = "", row: int | None = None):
        self.row = row
        self.z = z
        self.z_next = z_next
        self.theta = theta
        msg = f"transition {z}->{z_next} impossible under belief {list(theta)}"
        if context:
            msg = f"{msg} ({context})"
        super().__init__(msg)
