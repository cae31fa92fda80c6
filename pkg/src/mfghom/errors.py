"""Exception types shared across the toolkit."""

from __future__ import annotations


class MfgHomError(Exception):
    """Base class for all toolkit errors."""


class NewtonDiverged(MfgHomError):
    """Newton iteration exhausted its budget or the line search failed.

    Carries the last residual norm in ``residual``.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class PositivityViolated(MfgHomError):
    """A density came out negative beyond roundoff; drift too strong for the grid."""


class NullspaceDegenerate(MfgHomError):
    """The stationary operator has a (numerically) multi-dimensional null space."""


class FixedPointStalled(MfgHomError):
    """Damped fixed-point iteration exhausted its budget.

    Carries the last increment norm in ``increment``.
    """

    def __init__(self, message: str, increment: float):
        super().__init__(f"{message} (last increment {increment:.3e})")
        self.increment = increment


class CoupledCellUnsupported(MfgHomError):
    """Operation requires a decoupled cell solution (local coupling not supported)."""


class CompatibilityViolated(MfgHomError):
    """Right-hand side violates the zero-mean solvability condition."""


class CflViolated(MfgHomError):
    """Time step exceeds the advection stability bound."""


class NegativeDensity(MfgHomError):
    """Transport produced a negative density beyond roundoff."""


class GridTooCoarse(MfgHomError):
    """Grid has too few nodes for the requested stencil."""


class OutOfRange(MfgHomError):
    """Query point left the table's convex hull.

    ``coordinate`` names the offending axis, ``value`` the offending value.
    """

    def __init__(self, coordinate: str, value: float, lo: float, hi: float):
        super().__init__(
            f"{coordinate}={value:.6g} outside table range [{lo:.6g}, {hi:.6g}]"
        )
        self.coordinate = coordinate
        self.value = value


class PrimitiveMissing(MfgHomError):
    """Coupling does not declare the primitive needed for the variational check."""


class RateUnreliable(MfgHomError):
    """Fewer than three data points converged; no rate can be fitted."""


class ConfigError(MfgHomError):
    """Configuration could not be parsed or validated.

    ``problems`` lists every validation failure found, not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
