"""Exception hierarchy for khopsim."""

from __future__ import annotations


class KhopError(Exception):
    """Base class for every error raised by khopsim."""


class GraphNotConnected(KhopError, ValueError):
    pass


class IndexOutOfRange(KhopError, IndexError):
    pass


class EmptyNeighborhood(KhopError, ValueError):
    pass


class DimensionError(KhopError, ValueError):
    pass


class NumericalError(KhopError, ArithmeticError):
    pass


class GainConditionViolated(KhopError, ValueError):
    pass


class CouplingNotPD(KhopError, ValueError):
    pass


class CertificateInfeasible(KhopError, ValueError):
    """Raised when tuned gains do not satisfy a strict convergence inequality.

    ``inequality`` names the violated condition (``"phi"`` or ``"psi"``) and
    ``agent`` the 1-based agent index.
    """

    def __init__(self, message: str, inequality: str = "", agent: int = 0) -> None:
        super().__init__(message)
        self.inequality = inequality
        self.agent = agent


class MissingNeighborData(KhopError, LookupError):
    pass


class ProtocolError(KhopError, LookupError):
    pass


class DivergenceDetected(KhopError, RuntimeError):
    """Raised when the closed loop leaves the finite/admissible region."""

    def __init__(self, message: str, time: float = 0.0, agent: int = 0) -> None:
        super().__init__(message)
        self.time = time
        self.agent = agent
        # partial telemetry, attached by the simulator before re-raising
        self.telemetry = None


class StateBoxExceeded(DivergenceDetected):
    pass


class ScenarioError(KhopError, ValueError):
    pass


class InternalConsistencyError(KhopError, AssertionError):
    pass
