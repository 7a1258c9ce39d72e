"""Exception hierarchy for cl-lab.

Public entry points raise these instead of bare ValueError/RuntimeError so
callers (and the CLI) can map failures to exit codes without string matching.
"""


class CLLabError(Exception):
    """Base class for all cl-lab errors."""


class TaskSetupError(CLLabError, ValueError):
    """Invalid task ensemble, geometry, permutation, or scenario input."""


class RegimeError(CLLabError, ValueError):
    """A closed-form expression was requested outside its validity regime."""


class NearSquareError(RegimeError):
    """Sample count and dimension are too close (n - 1 <= p <= n + 1).

    Neither family of expectation formulas is defined in this band: the
    relevant Wishart moments diverge. The caller must move p away from n.
    """


class InapplicablePredicateError(CLLabError, ValueError):
    """A predicate's own precondition fails, so it has no truth value."""


class SingularDataError(CLLabError, RuntimeError):
    """A sampled design matrix was numerically singular (degenerate draw)."""


class OrderSearchError(CLLabError, ValueError):
    """Order-search input is unsupported (bad permutation, T too large,
    or a scenario shape the search does not handle)."""
