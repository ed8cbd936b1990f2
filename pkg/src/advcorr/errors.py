"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Plain ValueError from the numeric core signals a
violated call contract (a bug in the caller), not an operational failure.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Unusable input data: parse failures, checksum mismatches, shortfalls."""


class AdversarialShortfallError(DataError):
    """Not enough qualifying adversarial candidates for some labels."""

    def __init__(self, needed, found_per_label):
        self.needed = needed
        self.found_per_label = dict(found_per_label)
        short = {y: n for y, n in self.found_per_label.items() if n < needed}
        super().__init__(
            f"need {needed} adversarial examples per label, "
            f"short labels (label: found): {short}"
        )


class NumericalError(RuntimeError):
    """Numerical failure: divergent or irrecoverably infeasible subproblem."""


class QPInfeasibleError(NumericalError):
    """The constraint polyhedron is (numerically) empty."""
