"""Exception hierarchy shared by all spikemmd modules.

The CLI maps these onto its exit codes; library users catch them directly.
"""


class SpikeMmdError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SpikeMmdError):
    """A file could not be parsed under its declared format."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class ParameterError(SpikeMmdError):
    """An argument or configuration value is out of its legal range."""


class ShapeError(SpikeMmdError):
    """Array or trial-set shapes are inconsistent."""


class DomainError(SpikeMmdError):
    """A value is outside the domain an operation is defined on."""


class RangeError(DomainError):
    """A spike time falls outside the declared recording window."""


class InsufficientDataError(DomainError):
    """Too few spikes or intervals to compute the requested statistic."""


class ContractError(SpikeMmdError):
    """A kernel or estimator was used outside its declared contract."""


class GradientUndefinedError(SpikeMmdError):
    """The analytic gradient is undefined here (intensity cap engaged)."""


class OptimizationError(SpikeMmdError):
    """An optimizer diverged or could not continue."""

    def __init__(self, message, last_params=None, trace=None):
        super().__init__(message)
        self.last_params = last_params
        self.trace = trace


class RunawayError(OptimizationError):
    """Too many model samples hit the intensity cap to form a gradient."""


class NoQualifyingAlphaError(SpikeMmdError):
    """No value on the alpha grid met the rate-matching criterion."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
