"""Exception types shared across the package."""


class QbsdeError(Exception):
    """Base class for package errors."""


class ConfigurationError(QbsdeError):
    """A spec, scheme, or config object is malformed or missing a required constant."""


class EvaluationFault(QbsdeError):
    """A user-supplied map returned a non-finite value; the message names the point."""


class NonConvexityError(QbsdeError):
    """A convexity-dependent routine detected a midpoint or subgradient violation."""


class TransformDivergenceError(QbsdeError):
    """The conjugate search could not certify a finite supremum."""


class RegressionRankError(QbsdeError):
    """The regression normal matrix is unusable; carries a basis diagnostic."""


class PicardDivergenceError(QbsdeError):
    """Inner or outer Picard iteration diverged; carries the last gap."""
