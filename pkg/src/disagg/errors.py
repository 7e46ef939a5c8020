"""Exception types shared across the package."""


class DisaggError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DisaggError, ValueError):
    """Invalid or inconsistent configuration (grids, lattices, transforms)."""


class DegenerateCovariateError(DisaggError, ValueError):
    def __init__(self, name):
        super().__init__(f"covariate layer {name!r} is constant and cannot be standardized")
        self.name = name


class DegeneratePolygonError(DisaggError, ValueError):
    def __init__(self, polygon_id):
        super().__init__(f"polygon {polygon_id} has zero total population")
        self.polygon_id = polygon_id


class SimulationError(DisaggError, RuntimeError):
    pass


class ThresholdExhaustedError(SimulationError):
    def __init__(self, threshold, totals):
        totals = list(totals)
        super().__init__(
            f"all {len(totals)} attempts exceeded max_total_cases={threshold}: totals={totals}"
        )
        self.threshold = threshold
        self.totals = totals


class NumericalError(DisaggError, ArithmeticError):
    """Factorization or evaluation failure (overflow, non-PD covariance)."""


class EvaluationError(NumericalError):
    def __init__(self, polygon_id, value):
        super().__init__(f"polygon {polygon_id}: aggregate mean is not finite and positive ({value})")
        self.polygon_id = polygon_id
