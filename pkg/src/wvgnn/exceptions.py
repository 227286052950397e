import numpy as np


class ShapeError(ValueError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class DecompositionError(np.linalg.LinAlgError):
    """Cholesky failed; ``index`` is the 0-based leading minor that is not positive."""

    def __init__(self, index, batch_index=None):
        where = "" if batch_index is None else f" (batch item {batch_index})"
        super().__init__(f"matrix not positive definite: leading minor {index} failed{where}")
        self.index = index
        self.batch_index = batch_index


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, cond):
        super().__init__(f"matrix is singular to working precision (condition estimate {cond:.3e})")
        self.cond = cond


class NonFiniteError(FloatingPointError):
    pass


class BracketError(RuntimeError):
    def __init__(self, lo, hi, p_lo, p_hi, target):
        super().__init__(
            f"bisection interval [{lo:.3e}, {hi:.3e}] does not bracket power {target:.3e} "
            f"(P(lo)={p_lo:.3e}, P(hi)={p_hi:.3e})"
        )
        self.interval = (lo, hi)
