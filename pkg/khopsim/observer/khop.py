"""Distributed finite-time state and input observers.

Every agent ``i`` keeps estimates ``x_hat^i_l`` / ``u_hat^i_l`` of each k-hop
member ``l`` and updates them from 1-hop messages only. Estimate arrays are
shaped ``(eta_i, N)``; row ``p`` belongs to ``members[p]``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from khopsim.errors import (
    DimensionError,
    MissingNeighborData,
    NumericalError,
    ProtocolError,
)
from khopsim.graph.khop import KHopNeighborhood
from khopsim.plant import PlantModel
from khopsim.tuning.gains import GainSet


@dataclass
class ObserverState:
    """Estimates held by one agent. Mutated only by its owner."""

    agent: int
    members: tuple[int, ...]
    x_hat: np.ndarray
    u_hat: np.ndarray

    def validate(self, state_dim: int) -> None:
        shape = (len(self.members), state_dim)
        if self.x_hat.shape != shape or self.u_hat.shape != shape:
            raise DimensionError(
                f"agent {self.agent}: estimates must be {shape}, "
                f"got {self.x_hat.shape} / {self.u_hat.shape}"
            )
        if not (np.all(np.isfinite(self.x_hat)) and np.all(np.isfinite(self.u_hat))):
            raise NumericalError(f"agent {self.agent}: non-finite estimate")

    @property
    def eta(self) -> int:
        return len(self.members)

    def estimates(self) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
        """Estimates keyed by global agent id."""
        xs = {m: self.x_hat[p] for p, m in enumerate(self.members)}
        us = {m: self.u_hat[p] for p, m in enumerate(self.members)}
        return xs, us


def init_observer(
    nb: KHopNeighborhood,
    state_dim: int,
    xhat0: float | np.ndarray = 0.0,
    uhat0: float | np.ndarray = 0.0,
) -> ObserverState:
    """Observer with every estimate block set to ``xhat0`` / ``uhat0``."""
    shape = (nb.eta, state_dim)
    state = ObserverState(
        agent=nb.agent,
        members=nb.members,
        x_hat=np.broadcast_to(np.asarray(xhat0, float), shape).copy(),
        u_hat=np.broadcast_to(np.asarray(uhat0, float), shape).copy(),
    )
    state.validate(state_dim)
    return state


@dataclass(frozen=True)
class NeighborMessage:
    """What agent ``sender`` broadcasts to its 1-hop neighbours in one round.

    ``relayed_*`` cover exactly the sender's own neighbours; ``est_*`` hold the
    sender's estimates keyed by global id, so receivers never depend on the
    sender's member ordering.
    """

    sender: int
    state: np.ndarray
    input: np.ndarray
    relayed_states: Mapping[int, np.ndarray]
    relayed_inputs: Mapping[int, np.ndarray]
    est_states: Mapping[int, np.ndarray]
    est_inputs: Mapping[int, np.ndarray]


def make_message(
    sender: int,
    neighbors: frozenset[int],
    x: np.ndarray,
    u: np.ndarray,
    observer: ObserverState,
) -> NeighborMessage:
    """Assemble agent ``sender``'s broadcast from the global ``(n, N)`` arrays."""
    est_x, est_u = observer.estimates()
    return NeighborMessage(
        sender=sender,
        state=x[sender - 1],
        input=u[sender - 1],
        relayed_states={j: x[j - 1] for j in neighbors},
        relayed_inputs={j: u[j - 1] for j in neighbors},
        est_states=est_x,
        est_inputs=est_u,
    )


@dataclass(frozen=True)
class ObserverDerivative:
    dx_hat: np.ndarray
    du_hat: np.ndarray
    xi: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class MemberGains:
    """Gains applied to each estimate row, taken from the estimated agent."""

    G: np.ndarray
    omega: np.ndarray
    theta: np.ndarray
    pi: np.ndarray


def member_gains(gains: GainSet, nb: KHopNeighborhood) -> MemberGains:
    idx = [m - 1 for m in nb.members]
    return MemberGains(
        G=gains.G,
        omega=np.asarray([gains.omega[i] for i in idx], dtype=np.float64),
        theta=np.asarray([gains.theta[i] for i in idx], dtype=np.float64),
        pi=np.asarray([gains.pi[i] for i in idx], dtype=np.float64),
    )


def sign(x: np.ndarray, boundary_layer: float | None = None) -> np.ndarray:
    """Componentwise sign with ``sign(0) = +1``.

    With ``boundary_layer = delta`` the discontinuity is replaced by the
    saturation ``clip(x / delta, -1, 1)``.
    """
    if boundary_layer is None:
        return np.where(x >= 0.0, 1.0, -1.0)
    if boundary_layer <= 0:
        raise ValueError("boundary_layer must be positive")
    return np.clip(x / boundary_layer, -1.0, 1.0)


def _consensus_term(
    agent: int,
    members: tuple[int, ...],
    own: np.ndarray,
    msgs: Mapping[int, NeighborMessage],
    one_hop: frozenset[int],
    kind: str,
) -> np.ndarray:
    missing = sorted(one_hop - set(msgs))
    if missing:
        raise MissingNeighborData(
            f"agent {agent}: no message from neighbours {missing}"
        )
    extra = sorted(set(msgs) - one_hop)
    if extra:
        raise ProtocolError(f"agent {agent}: messages from non-neighbours {extra}")

    out = np.zeros_like(own)
    for p, member in enumerate(members):
        terms = 0
        for j in sorted(one_hop):
            msg = msgs[j]
            relayed = msg.relayed_states if kind == "state" else msg.relayed_inputs
            estimates = msg.est_states if kind == "state" else msg.est_inputs
            if member in relayed and member in estimates:
                raise ProtocolError(
                    f"agent {j} reports agent {member} as both 1-hop and k-hop"
                )
            if member in estimates:
                out[p] += estimates[member] - own[p]
                terms += 1
            elif member in relayed:
                out[p] += relayed[member] - own[p]
                terms += 1
        if terms == 0:
            raise ProtocolError(
                f"agent {agent}: no neighbour carries information on agent {member}"
            )
    return out


def compute_xi(
    state: ObserverState,
    msgs: Mapping[int, NeighborMessage],
    nb: KHopNeighborhood,
) -> np.ndarray:
    """State innovation built from neighbour estimates and relayed states."""
    return _consensus_term(
        state.agent, nb.members, state.x_hat, msgs, nb.one_hop, "state"
    )


def compute_rho(
    state: ObserverState,
    msgs: Mapping[int, NeighborMessage],
    nb: KHopNeighborhood,
) -> np.ndarray:
    """Input innovation; same construction as :func:`compute_xi` on inputs."""
    return _consensus_term(
        state.agent, nb.members, state.u_hat, msgs, nb.one_hop, "input"
    )


def state_observer_derivative(
    state: ObserverState,
    xi: np.ndarray,
    plant: PlantModel,
    gains: MemberGains,
    u_hat: np.ndarray,
    boundary_layer: float | None = None,
) -> np.ndarray:
    """``f(x_hat) + A x_hat + omega G xi + theta sign(G xi) + u_hat`` per row."""
    if state.eta == 0:
        return np.zeros_like(state.x_hat)
    g_xi = xi @ gains.G.T
    dx = (
        plant.drift(state.x_hat)
        + gains.omega[:, None] * g_xi
        + gains.theta[:, None] * sign(g_xi, boundary_layer)
        + u_hat
    )
    if not np.all(np.isfinite(dx)):
        raise NumericalError(f"agent {state.agent}: non-finite state-observer rate")
    return dx


def input_observer_derivative(
    state: ObserverState,
    rho: np.ndarray,
    gains: MemberGains,
    boundary_layer: float | None = None,
) -> np.ndarray:
    """``pi sign(rho)`` per row."""
    if state.eta == 0:
        return np.zeros_like(state.u_hat)
    return gains.pi[:, None] * sign(rho, boundary_layer)


def observer_derivative(
    state: ObserverState,
    msgs: Mapping[int, NeighborMessage],
    nb: KHopNeighborhood,
    plant: PlantModel,
    gains: MemberGains,
    boundary_layer: float | None = None,
    uhat_bias: float = 0.0,
) -> ObserverDerivative:
    """Both observer rates for one agent from one round of messages.

    ``uhat_bias`` is added to the input estimate fed to the state observer; it
    models a persistent input-estimation disturbance.
    """
    if state.eta == 0:
        empty = np.zeros_like(state.x_hat)
        return ObserverDerivative(empty, empty.copy(), empty.copy(), empty.copy())
    xi = compute_xi(state, msgs, nb)
    rho = compute_rho(state, msgs, nb)
    dx = state_observer_derivative(
        state, xi, plant, gains, state.u_hat + uhat_bias, boundary_layer
    )
    du = input_observer_derivative(state, rho, gains, boundary_layer)
    return ObserverDerivative(dx_hat=dx, du_hat=du, xi=xi, rho=rho)


def error_norms(
    state: ObserverState, x: np.ndarray, u: np.ndarray
) -> tuple[float, float]:
    """``(||x^i - x_hat^i||, ||u^i - u_hat^i||)`` against the global truth."""
    if state.eta == 0:
        return 0.0, 0.0
    rows = [m - 1 for m in state.members]
    ex = np.linalg.norm(x[rows] - state.x_hat)
    eu = np.linalg.norm(u[rows] - state.u_hat)
    return float(ex), float(eu)
