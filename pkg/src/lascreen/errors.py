"""Exception hierarchy shared across the package."""


class LascreenError(Exception):
    """Base class for all package errors."""


class SchemaError(LascreenError, ValueError):
    """Input data or configuration does not match the expected schema."""


class FitError(LascreenError, RuntimeError):
    """Model fitting failed."""


class CollinearityError(FitError):
    """X'V^-1 X is singular, so the fixed effects are not identified."""


class LikelihoodAscentError(FitError):
    """An accepted iterate increased -2 log-likelihood."""


class InfeasibleBudgetError(LascreenError, ValueError):
    """No operating point satisfies the follow-up budget."""

    def __init__(self, message, min_expected_flags):
        super().__init__(message)
        self.min_expected_flags = min_expected_flags
