"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or inconsistent shapes between configured parts."""


class DataError(ValueError):
    """Labels or splits that violate a data contract."""


class DegenerateBatchError(DataError):
    """A batch is missing a class that a loss needs."""


class MetricError(ValueError):
    """A metric was asked for on input that cannot define it."""
