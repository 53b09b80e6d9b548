"""Exception hierarchy shared by all emckt modules.

Every error carries enough context to be logged by the CLI, which maps the
classes onto process exit codes.
"""


class EmcktError(Exception):
    """Base class for all toolkit failures."""

    exit_code = 1


class InvalidArgument(EmcktError, ValueError):
    exit_code = 2


class ConfigurationError(EmcktError):
    exit_code = 2


class TopologyError(EmcktError):
    exit_code = 2


class PortResolutionError(EmcktError):
    exit_code = 2


class AssemblyError(EmcktError):
    exit_code = 3


class ParseError(EmcktError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CircuitTopologyError(EmcktError):
    exit_code = 3


class SolverFailure(EmcktError):
    """Linear solver did not reach its tolerance."""

    exit_code = 3

    def __init__(self, message, residual=None, iterations=None, step=None):
        parts = [message]
        if residual is not None:
            parts.append(f"residual={residual:.3e}")
        if iterations is not None:
            parts.append(f"iterations={iterations}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(", ".join(parts))
        self.residual = residual
        self.iterations = iterations
        self.step = step


class NonlinearFailure(SolverFailure):
    """Newton or Gummel iteration diverged or stalled."""


class HorizonExceeded(EmcktError):
    exit_code = 2


class CorruptArchive(EmcktError):
    exit_code = 2


class EquivalenceFailure(EmcktError):
    exit_code = 4
