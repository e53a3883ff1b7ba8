"""
Exception hierarchy for pathprof.

Every error raised on purpose by the toolkit derives from PathProfError,
so the command line can map them to exit code 1 in one place.
"""

from typing import Optional


class PathProfError(Exception):
    """Base class for all expected pathprof failures."""

    exit_code = 1


class DomainError(PathProfError, ValueError):
    """An argument is outside the domain an operation accepts."""


class InputShapeError(DomainError):
    """An input tensor does not match the network's input shape."""


class NumericOverflowError(PathProfError, ArithmeticError):
    """A forward pass produced a NaN or infinite intermediate value."""


class ContractViolationError(PathProfError):
    """A caller invoked an operation whose precondition does not hold."""


class InternalInvariantError(PathProfError, AssertionError):
    """An internal invariant was broken; indicates a bug."""


class ExtractionUnsupportedError(PathProfError):
    """Path extraction met a layer type it cannot walk through."""


class FormatError(PathProfError):
    """
    A file or byte stream is malformed.

    Parameters
    ----------
    message : str
        What went wrong
    offset : int, optional
        Byte offset at which the problem was detected
    path : str, optional
        File being read, if any
    """

    def __init__(
        self, message: str, offset: Optional[int] = None,
        path: Optional[str] = None
    ):
        self.offset = offset
        self.path = path
        details = message
        if offset is not None:
            details = f'{details} (at byte offset {offset})'
        if path is not None:
            details = f'{path}: {details}'
        super().__init__(details)


class GenerationError(PathProfError):
    """Input generation gave up before producing the requested count."""

    def __init__(self, message: str, accepted: int, attempts: int):
        self.accepted = accepted
        self.attempts = attempts
        rate = accepted / attempts if attempts else 0.0
        super().__init__(
            f'{message}: accepted {accepted} of {attempts} draws '
            f'(acceptance rate {rate:.4%})'
        )


class ArtifactMissingError(DomainError):
    """A required artifact (model, profile, detector...) was not found."""

    def __init__(self, kind: str, path: str):
        self.kind = kind
        self.path = path
        super().__init__(f'missing {kind} artifact: {path}')
