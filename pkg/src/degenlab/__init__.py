"""Numerical laboratory for degenerate elliptic operators on domains with rough,
low-dimensional or mixed-dimensional boundaries."""

from degenlab.errors import HypothesisViolation, InadmissibleInput, SolverError

__version__ = "0.1.0"

__all__ = ["HypothesisViolation", "InadmissibleInput", "SolverError", "__version__"]
