"""Exception hierarchy.

Numerical failures derive from :class:`NumericalError` so the CLI can map
them to a single exit code; configuration problems derive from
:class:`ConfigError`.
"""


class GLSphericalError(Exception):
    pass


class ConfigError(GLSphericalError, ValueError):
    pass


class SpecError(ConfigError):
    """Malformed measure specification.

    ``path`` points at the offending field, e.g. ``components[1].law.point``.
    """

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(GLSphericalError, ArithmeticError):
    pass


class FactorizationFailure(NumericalError):
    """Cholesky hit a non-positive pivot."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class SingularInput(NumericalError):
    pass


class NonFiniteIntegrand(NumericalError):
    def __init__(self, message, sample_index=None, sample=None):
        self.sample_index = sample_index
        self.sample = sample
        super().__init__(message)


class NonFiniteValue(NumericalError):
    pass


class NumericalBlowup(NumericalError):
    pass
