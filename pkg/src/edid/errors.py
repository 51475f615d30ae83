"""Exception and warning types shared across the package."""


class EdidError(Exception):
    """Base error carrying a machine-readable ``code``."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}")


class ValidationError(EdidError):
    """The input data or configuration was rejected."""


class EstimationError(EdidError):
    """Estimation could not be carried out on accepted data."""


class EdidWarning(UserWarning):
    """Non-fatal diagnostic (ridge jitter, floored ratios, bootstrap redraws)."""
