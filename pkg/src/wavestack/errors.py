"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent parameter combination."""


class FormatError(ValueError):
    """Malformed file contents (bad header, truncated payload)."""


class UnsupportedFormatError(FormatError):
    """File parsed but uses an encoding this package does not handle."""


class ShapeError(ValueError):
    """Array arguments with incompatible lengths or shapes."""


class StepError(ValueError):
    """Diffusion step index outside the schedule range."""


class StateError(RuntimeError):
    """Operation attempted against stale or incomplete state."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class MetricUndefined(ValueError):
    """A metric has no defined value for this input pair.

    Distinct from a zero value: e.g. pitch error with no commonly voiced
    frame, or spectral convergence against a silent reference.
    """

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric}: {reason}")
        self.metric = metric
        self.reason = reason
