class ConfigurationError(ValueError):
    """Invalid scheme/experiment configuration (bad probabilities, missing fields...)."""


class PreconditionError(ValueError):
    """An operation's mathematical precondition is violated (e.g. mean offspring != 1)."""


class InternalInconsistencyError(RuntimeError):
    """A condition the theory guarantees failed numerically; indicates a bug or bad input."""
