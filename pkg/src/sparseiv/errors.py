"""Exception types raised across the package."""


class SparseIVError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SparseIVError, ValueError):
    pass


class ZeroColumn(SparseIVError, ValueError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column} has (numerically) zero second moment")


class NotNormalized(SparseIVError, ValueError):
    def __init__(self, column, mean_square):
        self.column = column
        self.mean_square = mean_square
        super().__init__(
            f"column {column} has mean square {mean_square!r}; expected 1 (normalize first)"
        )


class NonConvergence(SparseIVError, RuntimeError):
    """Iterative routine hit its iteration cap.

    ``best`` carries the last/best iterate and ``kkt_gap`` its optimality gap so
    callers can decide whether the approximate answer is usable.
    """

    def __init__(self, max_iter, best=None, kkt_gap=float("nan")):
        self.max_iter = max_iter
        self.best = best
        self.kkt_gap = kkt_gap
        super().__init__(f"no convergence after {max_iter} iterations (kkt gap {kkt_gap:.3g})")


class PerfectFit(SparseIVError, ArithmeticError):
    """Square-root objective evaluated at (numerically) zero residual.

    When the square-root LASSO optimum itself interpolates the data, ``best``
    holds that interpolating fit.
    """

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class RankDeficient(SparseIVError, ArithmeticError):
    def __init__(self, support, message="selected columns are collinear"):
        self.support = tuple(int(j) for j in support)
        super().__init__(f"{message}: support of size {len(self.support)}")


class SingularSystem(SparseIVError, ArithmeticError):
    def __init__(self, cond, what="linear system"):
        self.cond = cond
        super().__init__(f"{what} is singular (condition number {cond:.3g})")


class EigenFailure(SparseIVError, ArithmeticError):
    pass


class TooLarge(SparseIVError, ValueError):
    pass
