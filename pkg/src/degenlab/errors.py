class HypothesisViolation(RuntimeError):
    """A constructive step failed in a way that signals a geometric or
    measure-theoretic hypothesis does not hold at the probed scale."""

    def __init__(self, message, hypothesis=None, best=None):
        super().__init__(message)
        self.hypothesis = hypothesis
        self.best = best


class InadmissibleInput(ValueError):
    """Input outside the range where an operation is defined."""


class SolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []
