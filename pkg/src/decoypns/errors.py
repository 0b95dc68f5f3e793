"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or schema violation."""


class AnalysisError(ValueError):
    """A measurement formula was applied to data it cannot handle."""


class IntegrityError(AnalysisError):
    """Decoy gain does not exceed the dark count rate (Q_nu <= Y0)."""


class OptimizationError(RuntimeError):
    """The occurrence optimizer failed to converge."""


class RoundTimeout(RuntimeError):
    """A round exceeded its pulse budget before reaching the signal target."""

    def __init__(self, message, pulses_sent=0):
        super().__init__(message)
        self.pulses_sent = pulses_sent


class TrialAborted(RuntimeError):
    """A round failed inside a trial; ``partial`` keeps what completed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
