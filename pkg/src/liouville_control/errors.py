"""Exception types raised across the package."""


class LiouvilleControlError(Exception):
    """Base class for all package errors."""


class InvalidGrid(LiouvilleControlError):
    """Grid construction parameters violate an invariant."""


class UnknownPreset(LiouvilleControlError):
    """A named preset (initial datum, drift, potential, source) is not known."""


class ZeroMass(LiouvilleControlError):
    """Moments requested for a field with non-positive mass."""


class UnsupportedOrder(LiouvilleControlError):
    """Weighted Sobolev norm requested beyond the supported derivative order."""


class CflUnderflow(LiouvilleControlError):
    """The CFL condition would require more substeps than the configured cap."""


class NonFinite(LiouvilleControlError):
    """A solver produced NaN or Inf values."""


class CharacteristicEscape(LiouvilleControlError):
    """A traced characteristic left the safety hull and no analytic
    evaluation is available to continue it."""


class GridMismatch(LiouvilleControlError):
    """Forward and adjoint data live on incompatible grids."""


class NotApplicable(LiouvilleControlError):
    """Operation requested in a regime where it is not defined (e.g. the
    H1 Riesz solve with nu=0)."""


class DegenerateProbe(LiouvilleControlError):
    """A probe was asked to compare identical inputs."""


class UnsupportedDrift(LiouvilleControlError):
    """The exact-flow oracle only covers drifts with integrable flows."""


class LinesearchFailure(LiouvilleControlError):
    """Armijo backtracking exhausted its budget without sufficient decrease."""


class SchemaError(LiouvilleControlError):
    """A run configuration violates the schema; the message names the key."""
