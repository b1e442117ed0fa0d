"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so new error types should
subclass one of the three roots below rather than ``Exception``.
"""


class MilsenseError(Exception):
    """Base class for all package errors."""


class InputError(MilsenseError):
    """Invalid argument: bad shape, domain violation, or failed precondition."""


class ParseError(InputError):
    """Malformed on-disk data. Carries file context where available."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{': '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.line = line


class UnsupportedKernelError(MilsenseError):
    """Kernel admits no exact state-space form under this representation."""


class NumericalError(MilsenseError):
    """Factorization or recursion failed beyond the jitter policy's reach."""


class OptimizationError(MilsenseError):
    """Optimizer could not produce a finite, accepted iterate."""
