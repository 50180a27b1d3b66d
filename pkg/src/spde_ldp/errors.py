"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ValidationError(ValueError):
    """Inputs are inconsistent (shapes, grids, missing pieces)."""


class HypothesisViolation(AssertionError):
    """A sampled point violates one of the growth/Lipschitz hypotheses."""

    def __init__(self, inequality, witness, lhs, rhs):
        self.inequality = inequality
        self.witness = witness
        self.lhs = lhs
        self.rhs = rhs
        super().__init__(
            f"{inequality} violated at {witness}: lhs={lhs:.6g} > rhs={rhs:.6g}"
        )


class UnsupportedDegeneracy(ValueError):
    """The operation needs a noise coefficient bounded away from zero."""


class BlowUpError(ArithmeticError):
    """A time-stepped solution became non-finite or exceeded the guard."""

    def __init__(self, step, sup_l2):
        self.blowup_step = step
        self.sup_l2 = sup_l2
        super().__init__(f"blow-up at step {step} (|U|_2 = {sup_l2:.4g})")


class SampleExclusionError(RuntimeError):
    """Too many Monte Carlo samples had to be discarded after blowing up."""

    def __init__(self, n_excluded, n):
        self.n_excluded = n_excluded
        self.n = n
        super().__init__(f"{n_excluded} of {n} samples blew up (limit 0.1%)")
