"""Exception taxonomy shared across the engine.

Each class maps to one CLI exit code (see cli.EXIT_CODES) so failure modes
are assertable from the outside.
"""


class RejectedInputError(ValueError):
    """Input violates a documented precondition (bad shape, range, index)."""


class FormatError(RejectedInputError):
    """A file or payload does not follow its declared format."""


class NumericError(ArithmeticError):
    """A numerically invalid state (singular matrix, NaN) was detected."""


class TransportError(RuntimeError):
    """A provider could not be reached or returned a malformed response."""


class PoisonedResponseError(TransportError):
    """A provider answered, but the payload contains non-finite values."""


class ContactNotFoundError(RuntimeError):
    """No Gaussian weight exceeded the contact threshold for the prompt."""

    def __init__(self, prompt: str, threshold: float):
        super().__init__(
            f"no contact region found for prompt {prompt!r} (threshold {threshold:g})"
        )
        self.prompt = prompt
        self.threshold = threshold
