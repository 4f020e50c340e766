"""Exception hierarchy for the turnpike package.

All solver and analysis failures raise subclasses of :class:`TurnpikeError`
carrying enough structured state (residuals, best iterates, offending
constraint labels) that callers can report or recover without string parsing.
"""

from __future__ import annotations


class TurnpikeError(Exception):
    """Base class for all package errors."""


class DimensionError(TurnpikeError):
    """An argument has the wrong shape for the problem at hand."""

    def __init__(self, argument: str, expected, got):
        self.argument = argument
        self.expected = expected
        self.got = got
        super().__init__(
            f"argument {argument!r}: expected shape {expected}, got {got}"
        )


class InfeasibleStartError(TurnpikeError):
    """Initial guess violates the inequality constraints beyond the slack."""

    def __init__(self, worst_violation: float, slack: float):
        self.worst_violation = worst_violation
        self.slack = slack
        super().__init__(
            f"initial guess infeasible: worst constraint value "
            f"{worst_violation:.3e} exceeds slack {slack:.1e}"
        )


class ConvergenceError(TurnpikeError):
    """Iteration limit reached; carries the best iterate and its residuals."""

    def __init__(self, message: str, best=None, residuals=None, iterations=None):
        self.best = best
        self.residuals = residuals
        self.iterations = iterations
        detail = message
        if residuals is not None:
            detail += f" (residuals: {residuals})"
        super().__init__(detail)


class InfeasibilityError(TurnpikeError):
    """Restoration gave up; carries a certificate of violated constraints.

    ``violations`` is a list of ``(label, value)`` pairs for the constraint
    rows that could not be satisfied, sorted by decreasing violation.
    """

    def __init__(self, message: str, violations=None, leg=None):
        self.violations = violations or []
        self.leg = leg
        if self.violations:
            worst = ", ".join(f"{lab}={val:.3e}" for lab, val in self.violations[:5])
            message += f"; worst rows: {worst}"
        if leg is not None:
            message = f"[leg {leg}] " + message
        super().__init__(message)


class UndeterminedFitError(TurnpikeError):
    """No decaying deviation segment; an exponential fit is meaningless."""


class ConfigError(TurnpikeError):
    """Malformed run configuration or problem description."""
