"""
Exceptions raised by boat-match. The CLI maps ``exit_code`` straight to the process exit status.
"""


class BoatMatchError(Exception):
    exit_code = 1


class InputError(BoatMatchError):
    """Bad input file, missing column, invalid config or empty data."""

    exit_code = 1


class SamplingError(BoatMatchError):
    exit_code = 1


class VIDivergenceError(BoatMatchError):
    """The ELBO became non-finite during optimisation."""

    exit_code = 1

    def __init__(self, step: int, message: str = None):
        self.step = step
        super().__init__(message or f"variational loss diverged at step {step}")


class ConvergenceError(BoatMatchError):
    """At least one split R-hat is at or above the threshold (or degenerate)."""

    exit_code = 2


class MatchingInfeasibleError(BoatMatchError):
    """1:1 matching without replacement needs at least as many controls as treated units."""

    exit_code = 3

    def __init__(self, n_control: int, n_treated: int):
        self.n_control = n_control
        self.n_treated = n_treated
        super().__init__(
            f"cannot 1:1 match without replacement: {n_control} control units < {n_treated} treated units"
        )
