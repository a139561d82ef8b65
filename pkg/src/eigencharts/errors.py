"""Exception and warning types shared across the package."""


class EigenchartsError(Exception):
    """Base class for all package errors."""


class ValidationError(EigenchartsError, ValueError):
    """Raised when inputs or configuration violate a precondition."""


class NumericalError(EigenchartsError, RuntimeError):
    """Raised when a numerical stage fails (solver breakdown, empty selection, ...)."""


class DegenerateDomainError(ValidationError):
    pass


class SourceNotInDomainError(ValidationError):
    pass


class GraphDisconnectedError(NumericalError):
    def __init__(self, n_components):
        self.n_components = int(n_components)
        super().__init__(f"graph disconnected: {self.n_components} components")


class EllipticityError(ValidationError):
    pass


class EigensolverStagnationError(NumericalError):
    pass


class ResolvedSpectrumError(ValidationError):
    pass


class TimestepSolverError(NumericalError):
    pass


class LocalizationBallError(ValidationError):
    pass


class NullLocalMassError(NumericalError):
    pass


class NoAdmissibleEigenfunctionError(NumericalError):
    pass


class DegenerateGradientFrameError(NumericalError):
    pass


class AnchorPlacementError(NumericalError):
    pass


class UnderResolvedWarning(UserWarning):
    """The lattice is too coarse for a geometric feature of the domain."""


class SpectralTailWarning(UserWarning):
    """A truncated spectral sum may be missing a non-negligible tail."""
