"""Exception types shared across the package."""


class D2PError(Exception):
    """Base class for all package-specific errors."""


class CheckpointError(D2PError):
    """Malformed checkpoint directory, manifest, or corpus file."""


class PlanError(D2PError):
    """Invalid pruning plan or unattainable sparsity target."""


class SingularSystemError(D2PError):
    """Least-squares system could not be factorized even after damping."""

    def __init__(self, message: str, context: str = ""):
        self.context = context
        super().__init__(f"{message} [{context}]" if context else message)
