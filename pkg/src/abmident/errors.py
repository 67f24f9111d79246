"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems -> 2,
numerical problems -> 3, missing model capabilities -> 4.
"""


class AbmIdentError(Exception):
    """Base class for all package errors."""


class ConfigError(AbmIdentError, ValueError):
    """Invalid configuration or argument."""


class BoundsError(ConfigError):
    """A parameter value lies outside its box bounds."""

    def __init__(self, name, value, bounds):
        self.name = name
        self.value = value
        self.bounds = bounds
        super().__init__(f"parameter {name!r}={value!r} outside bounds [{bounds[0]}, {bounds[1]}]")


class ShapeError(ConfigError):
    """Dimension mismatch between conformable objects."""


class NumericalError(AbmIdentError, ArithmeticError):
    """Non-finite values or failed numerical routine."""


class StationarityError(NumericalError):
    """Requested process has no stationary regime (e.g. a unit root)."""


class MultipleStationaryError(NumericalError):
    """A reducible chain admits more than one stationary distribution.

    ``basis`` holds one stationary vector per closed communicating class.
    """

    def __init__(self, basis, message=None):
        self.basis = basis
        super().__init__(message or f"chain has {len(basis)} closed classes; stationary distribution not unique")


class CapabilityError(AbmIdentError):
    """The model lacks an optional capability (e.g. state enumeration)."""
