"""Fixed-step closed-loop simulation of agents, controllers, and observers."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from khopsim.errors import (
    DimensionError,
    DivergenceDetected,
    NumericalError,
    ProtocolError,
    StateBoxExceeded,
)
from khopsim.graph.khop import (
    Graph,
    KHopNeighborhood,
    ObserverCoupling,
    SelectionMap,
    all_khop_sets,
    coupling_matrices,
    reorder_errors,
    selection_map,
)
from khopsim.observer.khop import (
    MemberGains,
    ObserverState,
    error_norms,
    init_observer,
    make_message,
    member_gains,
    observer_derivative,
)
from khopsim.plant import PlantModel
from khopsim.tuning.gains import GainSet

logger = logging.getLogger(__name__)

CONTROLLER_KINDS = ("khop_consensus", "generic_feedback", "zero")
DEFAULT_BAND_C = 5.0
CONV_EPS_REL = 1e-3
CONV_EPS_FLOOR = 1e-6


def consensus_control(
    i: int,
    x_own: np.ndarray,
    neighbor_states: Mapping[int, np.ndarray],
    estimates: Mapping[int, np.ndarray],
    target_neighbors: frozenset[int],
) -> np.ndarray:
    """Consensus input over the target graph.

    Target neighbours that are also communication neighbours contribute
    ``x_j - x_i``; the others contribute ``x_hat^i_j - x_i``.
    """
    u = np.zeros_like(x_own)
    for j in sorted(target_neighbors):
        if j in neighbor_states:
            u += neighbor_states[j] - x_own
        elif j in estimates:
            u += estimates[j] - x_own
        else:
            raise ProtocolError(f"agent {i} has no state or estimate of agent {j}")
    return u


def generic_feedback_control(
    i: int,
    x_own: np.ndarray,
    neighbor_states: Mapping[int, np.ndarray],
    estimates: Mapping[int, np.ndarray],
    target_neighbors: frozenset[int],
    K_self: np.ndarray,
    K_nb: np.ndarray,
) -> np.ndarray:
    """``K_self x_i + sum_j K_nb (z_j - x_i)`` with ``z_j`` true or estimated."""
    u = K_self @ x_own
    for j in sorted(target_neighbors):
        if j in neighbor_states:
            z = neighbor_states[j]
        elif j in estimates:
            z = estimates[j]
        else:
            raise ProtocolError(f"agent {i} has no state or estimate of agent {j}")
        u = u + K_nb @ (z - x_own)
    return u


@dataclass(frozen=True, eq=False)
class Controller:
    """Control law applied by every agent."""

    kind: str = "khop_consensus"
    target_graph: Graph | None = None
    K_self: np.ndarray | None = None
    K_nb: np.ndarray | None = None

    def validate(
        self, graph: Graph, nbs: Sequence[KHopNeighborhood], state_dim: int
    ) -> None:
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(
                f"Unknown controller '{self.kind}'. Valid: {list(CONTROLLER_KINDS)}"
            )
        if self.kind == "zero":
            return
        if self.target_graph is None:
            raise ValueError(f"controller '{self.kind}' requires a target graph")
        if self.target_graph.n != graph.n:
            raise DimensionError(
                f"target graph has {self.target_graph.n} agents, expected {graph.n}"
            )
        for nb in nbs:
            needed = self.target_graph.neighbors(nb.agent) - graph.neighbors(nb.agent)
            missing = sorted(needed - set(nb.members))
            if missing:
                raise ProtocolError(
                    f"agent {nb.agent} needs agents {missing} that are neither "
                    f"1-hop nor {nb.k}-hop neighbours"
                )
        if self.kind == "generic_feedback":
            for name in ("K_self", "K_nb"):
                mat = getattr(self, name)
                if mat is None or mat.shape != (state_dim, state_dim):
                    raise DimensionError(f"{name} must be {state_dim}x{state_dim}")

    def estimated_neighbors(self, graph: Graph, i: int) -> frozenset[int]:
        """Target neighbours of ``i`` reached only through estimates."""
        if self.target_graph is None:
            return frozenset()
        return self.target_graph.neighbors(i) - graph.neighbors(i)

    def control(
        self,
        i: int,
        x_own: np.ndarray,
        neighbor_states: Mapping[int, np.ndarray],
        estimates: Mapping[int, np.ndarray],
    ) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(x_own)
        target = self.target_graph.neighbors(i)
        if self.kind == "khop_consensus":
            return consensus_control(i, x_own, neighbor_states, estimates, target)
        return generic_feedback_control(
            i, x_own, neighbor_states, estimates, target, self.K_self, self.K_nb
        )


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Closed-loop simulation configuration."""

    plant: PlantModel
    graph: Graph
    k: int
    gains: GainSet
    x0: np.ndarray
    controller: Controller = field(default_factory=Controller)
    dt: float = 1e-3
    T_end: float = 20.0
    xhat0: float | np.ndarray = 0.0
    uhat0: float | np.ndarray = 0.0
    state_box: tuple[float, float] = (-10.0, 10.0)
    conv_eps: float | None = None
    band_c: float = DEFAULT_BAND_C
    boundary_layer: float | None = None
    uhat_bias: float = 0.0
    decimate: int = 1

    @property
    def state_dim(self) -> int:
        return self.plant.state_dim

    @property
    def n_steps(self) -> int:
        return int(round(self.T_end / self.dt))

    def validate(self) -> None:
        self.plant.validate()
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T_end <= self.dt:
            raise ValueError("T_end must exceed dt")
        if self.decimate < 1:
            raise ValueError("decimate must be >= 1")
        if self.band_c <= 0:
            raise ValueError("band_c must be positive")
        if self.conv_eps is not None and self.conv_eps <= 0:
            raise ValueError("conv_eps must be positive")
        if self.boundary_layer is not None and self.boundary_layer <= 0:
            raise ValueError("boundary_layer must be positive")
        lo, hi = self.state_box
        if hi <= lo:
            raise ValueError("state_box must satisfy x_min < x_max")
        shape = (self.graph.n, self.state_dim)
        if self.x0.shape != shape:
            raise DimensionError(f"x0 must be {shape}, got {self.x0.shape}")
        if np.any(self.x0 < lo) or np.any(self.x0 > hi):
            raise ValueError("x0 must lie inside state_box")
        if len(self.gains.omega) != self.graph.n:
            raise DimensionError("gain lists must have one entry per agent")
        if self.gains.G.shape != (self.state_dim, self.state_dim):
            raise DimensionError("G does not match the state dimension")


@dataclass(frozen=True, eq=False)
class Network:
    """Per-run constants derived once from a :class:`SimConfig`."""

    neighborhoods: tuple[KHopNeighborhood, ...]
    couplings: tuple[ObserverCoupling | None, ...]
    member_gains: tuple[MemberGains, ...]
    neighbors: tuple[frozenset[int], ...]
    estimated_neighbors: tuple[frozenset[int], ...]
    selections: tuple[SelectionMap, ...]
    # (start, stop) of each target's block in the target-grouped error vector
    target_slices: tuple[tuple[int, int], ...]


def _target_slices(
    nbs: Sequence[KHopNeighborhood], state_dim: int
) -> tuple[tuple[int, int], ...]:
    out = []
    cursor = 0
    for nb in nbs:
        # the estimators of a target are exactly its own k-hop members
        size = nb.eta * state_dim
        out.append((cursor, cursor + size))
        cursor += size
    return tuple(out)


def prepare(config: SimConfig) -> Network:
    graph = config.graph
    nbs = tuple(all_khop_sets(graph, config.k))
    config.controller.validate(graph, nbs, config.state_dim)
    return Network(
        neighborhoods=nbs,
        couplings=tuple(coupling_matrices(graph, nb) if nb.eta else None for nb in nbs),
        member_gains=tuple(member_gains(config.gains, nb) for nb in nbs),
        selections=tuple(selection_map(graph, nb, config.state_dim) for nb in nbs),
        target_slices=_target_slices(nbs, config.state_dim),
        neighbors=tuple(graph.neighbors(i) for i in graph.agents),
        estimated_neighbors=tuple(
            frozenset()
            if config.controller.kind == "zero"
            else config.controller.estimated_neighbors(graph, i)
            for i in graph.agents
        ),
    )


@dataclass(frozen=True, eq=False)
class WorldState:
    """True states plus every agent's observer at time ``t``."""

    t: float
    x: np.ndarray
    observers: tuple[ObserverState, ...]


def initial_world(config: SimConfig, net: Network) -> WorldState:
    observers = tuple(
        init_observer(nb, config.state_dim, config.xhat0, config.uhat0)
        for nb in net.neighborhoods
    )
    x = np.array(config.x0, dtype=np.float64)
    return WorldState(t=0.0, x=x, observers=observers)


def compute_inputs(world: WorldState, config: SimConfig, net: Network) -> np.ndarray:
    """Control inputs at ``world.t``; agent ``i`` reads only its neighbours."""
    u = np.zeros_like(world.x)
    for idx, obs in enumerate(world.observers):
        i = idx + 1
        neighbor_states = {j: world.x[j - 1] for j in net.neighbors[idx]}
        est_x, _ = obs.estimates()
        u[idx] = config.controller.control(i, world.x[idx], neighbor_states, est_x)
    return u


def step(
    world: WorldState,
    config: SimConfig,
    net: Network | None = None,
    u: np.ndarray | None = None,
) -> WorldState:
    """Advance one synchronous round with explicit Euler.

    Order: states and estimates are broadcast, controls are formed, inputs
    join the same round's messages, then plant and observers update with a
    shared ``dt``.
    """
    net = prepare(config) if net is None else net
    if u is None:
        u = compute_inputs(world, config, net)
    dt = config.dt

    msgs = {
        obs.agent: make_message(obs.agent, net.neighbors[idx], world.x, u, obs)
        for idx, obs in enumerate(world.observers)
    }
    new_observers = []
    for idx, obs in enumerate(world.observers):
        if obs.eta == 0:
            new_observers.append(obs)
            continue
        inbox = {j: msgs[j] for j in net.neighbors[idx]}
        try:
            deriv = observer_derivative(
                obs,
                inbox,
                net.neighborhoods[idx],
                config.plant,
                net.member_gains[idx],
                boundary_layer=config.boundary_layer,
                uhat_bias=config.uhat_bias,
            )
        except NumericalError as exc:
            raise DivergenceDetected(
                f"estimates held by agent {obs.agent} diverged "
                f"at t={world.t:.6g}: {exc}",
                time=world.t,
                agent=obs.agent,
            ) from exc
        new_observers.append(
            ObserverState(
                agent=obs.agent,
                members=obs.members,
                x_hat=obs.x_hat + dt * deriv.dx_hat,
                u_hat=obs.u_hat + dt * deriv.du_hat,
            )
        )

    x_next = world.x + dt * (config.plant.drift(world.x) + u)
    t_next = world.t + dt
    _check_world(x_next, new_observers, t_next, config.state_box)
    return WorldState(t=t_next, x=x_next, observers=tuple(new_observers))


def _check_world(
    x: np.ndarray,
    observers: Sequence[ObserverState],
    t: float,
    state_box: tuple[float, float],
) -> None:
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        agent = int(np.argmax(bad)) + 1
        raise DivergenceDetected(
            f"non-finite state of agent {agent} at t={t:.6g}", time=t, agent=agent
        )
    for obs in observers:
        if not (np.all(np.isfinite(obs.x_hat)) and np.all(np.isfinite(obs.u_hat))):
            raise DivergenceDetected(
                f"non-finite estimate held by agent {obs.agent} at t={t:.6g}",
                time=t,
                agent=obs.agent,
            )
    lo, hi = state_box
    outside = np.any((x < lo) | (x > hi), axis=1)
    if np.any(outside):
        agent = int(np.argmax(outside)) + 1
        raise StateBoxExceeded(
            f"agent {agent} left the state box [{lo}, {hi}] at t={t:.6g}",
            time=t,
            agent=agent,
        )


def consensus_distance(x: np.ndarray) -> float:
    """Distance of the stacked ``(n, N)`` state to the consensus set."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return float(np.linalg.norm(x - x.mean(axis=0, keepdims=True)))


@dataclass(frozen=True)
class ErrorSnapshot:
    """Estimation errors at one instant, grouped by estimator and by target."""

    errx: np.ndarray
    erru: np.ndarray
    errx_target: np.ndarray
    erru_target: np.ndarray
    v: np.ndarray


def measure_errors(world: WorldState, u: np.ndarray, net: Network) -> ErrorSnapshot:
    """Harness-side error norms; uses the global truth agents never see.

    Estimator-grouped norms come from each observer, target-grouped norms
    from the reordered stack of every estimator's error vector.
    """
    n, dim = world.x.shape
    flat_x = world.x.reshape(-1)
    flat_u = u.reshape(-1)
    errx = np.zeros(n)
    erru = np.zeros(n)
    v = np.zeros_like(world.x)
    stacked_x = []
    stacked_u = []
    for idx, obs in enumerate(world.observers):
        errx[idx], erru[idx] = error_norms(obs, world.x, u)
        sel = net.selections[idx]
        dx = sel.select_khop(flat_x).reshape(obs.eta, dim) - obs.x_hat
        du = sel.select_khop(flat_u).reshape(obs.eta, dim) - obs.u_hat
        stacked_x.append(dx.reshape(-1))
        stacked_u.append(du.reshape(-1))
        for j in net.estimated_neighbors[idx]:
            v[idx] += dx[obs.members.index(j)]
    by_target_x = reorder_errors(net.neighborhoods, np.concatenate(stacked_x), dim)
    by_target_u = reorder_errors(net.neighborhoods, np.concatenate(stacked_u), dim)
    return ErrorSnapshot(
        errx=errx,
        erru=erru,
        errx_target=_block_norms(by_target_x, net.target_slices),
        erru_target=_block_norms(by_target_u, net.target_slices),
        v=v,
    )


def _block_norms(vec: np.ndarray, slices: Sequence[tuple[int, int]]) -> np.ndarray:
    return np.asarray([np.linalg.norm(vec[a:b]) for a, b in slices], dtype=np.float64)


@dataclass(frozen=True)
class Bands:
    """Sliding bands per target and per estimator, plus the entry thresholds."""

    x_target: np.ndarray
    u_target: np.ndarray
    x: np.ndarray
    u: np.ndarray
    eps_x: float
    eps_u: float


def sliding_bands(
    nbs: Sequence[KHopNeighborhood],
    gains: GainSet,
    dt: float,
    eps_x: float,
    eps_u: float,
    c: float = DEFAULT_BAND_C,
) -> Bands:
    """Chattering bands of the discretized sign laws.

    Target ``l`` gets ``max(c theta_l dt, eps_x)`` for its state estimates and
    ``max(c pi_l dt, eps_u)`` for its input estimates. An estimator's band is
    the root sum of squares over its members.
    """
    n = len(nbs)
    bx = np.full(n, eps_x)
    bu = np.full(n, eps_u)
    for idx, nb in enumerate(nbs):
        if nb.eta == 0:
            continue
        bx[idx] = max(c * gains.theta[idx] * dt, eps_x)
        bu[idx] = max(c * gains.pi[idx] * dt, eps_u)
    est_x = np.zeros(n)
    est_u = np.zeros(n)
    for idx, nb in enumerate(nbs):
        rows = [m - 1 for m in nb.members]
        est_x[idx] = math.sqrt(float(np.sum(bx[rows] ** 2))) if rows else eps_x
        est_u[idx] = math.sqrt(float(np.sum(bu[rows] ** 2))) if rows else eps_u
    return Bands(x_target=bx, u_target=bu, x=est_x, u=est_u, eps_x=eps_x, eps_u=eps_u)


def conv_thresholds(
    conv_eps: float | None, x_err0: float, u_err0: float
) -> tuple[float, float]:
    """``conv_eps`` for state and input, defaulting to a fraction of the start."""
    if conv_eps is not None:
        return conv_eps, conv_eps
    return (
        max(CONV_EPS_REL * x_err0, CONV_EPS_FLOOR),
        max(CONV_EPS_REL * u_err0, CONV_EPS_FLOOR),
    )


def detect_convergence(
    times: np.ndarray, norms: np.ndarray, band: float, eps: float | None = None
) -> float | None:
    """First time ``norms < eps`` with ``norms <= band`` from then on.

    Returns ``None`` when the last sample lies outside the band. When the
    settled tail chatters above ``eps`` without ever dipping under it, the
    time of the final band entry is returned instead.
    """
    norms = np.asarray(norms)
    outside = np.flatnonzero(norms > band)
    start = 0 if outside.size == 0 else int(outside[-1]) + 1
    if start >= len(times):
        return None
    if eps is not None:
        below = np.flatnonzero(norms[start:] < eps)
        if below.size:
            start += int(below[0])
    return float(times[start])


@dataclass(frozen=True)
class ConvergenceTimes:
    x: tuple[float | None, ...]
    u: tuple[float | None, ...]
    x_target: tuple[float | None, ...]
    u_target: tuple[float | None, ...]


def convergence_times(
    times: np.ndarray,
    errx: np.ndarray,
    erru: np.ndarray,
    errx_target: np.ndarray,
    erru_target: np.ndarray,
    bands: Bands,
) -> ConvergenceTimes:
    def detect(
        norms: np.ndarray, band: np.ndarray, eps: float
    ) -> tuple[float | None, ...]:
        return tuple(
            detect_convergence(times, norms[:, i], float(band[i]), eps)
            for i in range(norms.shape[1])
        )

    return ConvergenceTimes(
        x=detect(errx, bands.x, bands.eps_x),
        u=detect(erru, bands.u, bands.eps_u),
        x_target=detect(errx_target, bands.x_target, bands.eps_x),
        u_target=detect(erru_target, bands.u_target, bands.eps_u),
    )


@dataclass(frozen=True)
class AssumptionAudit:
    """Observed extremes compared against the declared bounds.

    Every integration step contributes, logged or not; ``max_udot`` is the
    finite difference between consecutive steps.
    """

    max_u: np.ndarray
    max_udot: np.ndarray
    max_uerr_target: np.ndarray
    max_xerr: float


@dataclass(frozen=True, eq=False)
class Telemetry:
    """Logged trajectory (one row per decimated step) plus per-step audit."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    errx: np.ndarray
    erru: np.ndarray
    errx_target: np.ndarray
    erru_target: np.ndarray
    consdist: np.ndarray
    vnorm: np.ndarray
    vsup: np.ndarray
    # running maxima over every integration step up to each logged row
    umax: np.ndarray
    udotmax: np.ndarray
    errutmax: np.ndarray
    errxmax: np.ndarray
    audit: AssumptionAudit
    completed: bool = True
    bands: Bands | None = None
    convergence: ConvergenceTimes | None = None

    @property
    def n_agents(self) -> int:
        return int(self.states.shape[1])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[2])

    @property
    def max_error(self) -> float:
        """Largest estimator-grouped state error over the run."""
        return self.audit.max_xerr


class _Recorder:
    def __init__(self, n: int, state_dim: int) -> None:
        self.n = n
        self.state_dim = state_dim
        self.rows: dict[str, list] = {
            key: []
            for key in (
                "times",
                "states",
                "inputs",
                "errx",
                "erru",
                "errx_target",
                "erru_target",
                "consdist",
                "vnorm",
                "vsup",
                "umax",
                "udotmax",
                "errutmax",
                "errxmax",
            )
        }
        self.vsup = 0.0
        self.max_u = np.zeros(n)
        self.max_udot = np.zeros(n)
        self.max_uerr_target = np.zeros(n)
        self.max_xerr = 0.0
        self._u_prev: np.ndarray | None = None

    def observe(
        self, world: WorldState, u: np.ndarray, err: ErrorSnapshot, dt: float, log: bool
    ) -> None:
        vnorm = float(np.linalg.norm(err.v))
        self.vsup = max(self.vsup, vnorm)
        self.max_u = np.maximum(self.max_u, np.linalg.norm(u, axis=1))
        if self._u_prev is not None:
            rate = np.linalg.norm(u - self._u_prev, axis=1) / dt
            self.max_udot = np.maximum(self.max_udot, rate)
        self._u_prev = u
        self.max_uerr_target = np.maximum(self.max_uerr_target, err.erru_target)
        self.max_xerr = max(self.max_xerr, float(err.errx.max(initial=0.0)))
        if not log:
            return
        self.rows["times"].append(world.t)
        self.rows["states"].append(world.x.copy())
        self.rows["inputs"].append(u.copy())
        self.rows["errx"].append(err.errx)
        self.rows["erru"].append(err.erru)
        self.rows["errx_target"].append(err.errx_target)
        self.rows["erru_target"].append(err.erru_target)
        self.rows["consdist"].append(consensus_distance(world.x))
        self.rows["vnorm"].append(vnorm)
        self.rows["vsup"].append(self.vsup)
        self.rows["umax"].append(self.max_u.copy())
        self.rows["udotmax"].append(self.max_udot.copy())
        self.rows["errutmax"].append(self.max_uerr_target.copy())
        self.rows["errxmax"].append(self.max_xerr)

    def finish(self, completed: bool) -> Telemetry:
        def stack(key: str, shape: tuple[int, ...]) -> np.ndarray:
            data = self.rows[key]
            if not data:
                return np.zeros((0, *shape))
            return np.asarray(data, dtype=np.float64)

        n, dim = self.n, self.state_dim
        return Telemetry(
            times=stack("times", ()),
            states=stack("states", (n, dim)),
            inputs=stack("inputs", (n, dim)),
            errx=stack("errx", (n,)),
            erru=stack("erru", (n,)),
            errx_target=stack("errx_target", (n,)),
            erru_target=stack("erru_target", (n,)),
            consdist=stack("consdist", ()),
            vnorm=stack("vnorm", ()),
            vsup=stack("vsup", ()),
            umax=stack("umax", (n,)),
            udotmax=stack("udotmax", (n,)),
            errutmax=stack("errutmax", (n,)),
            errxmax=stack("errxmax", ()),
            audit=AssumptionAudit(
                max_u=self.max_u,
                max_udot=self.max_udot,
                max_uerr_target=self.max_uerr_target,
                max_xerr=self.max_xerr,
            ),
            completed=completed,
        )


def initial_errors(
    config: SimConfig, net: Network | None = None
) -> tuple[ErrorSnapshot, np.ndarray]:
    """Errors at ``t = 0`` and the initial inputs that produced them."""
    net = prepare(config) if net is None else net
    world = initial_world(config, net)
    u = compute_inputs(world, config, net)
    return measure_errors(world, u, net), u


def run(config: SimConfig) -> Telemetry:
    """Integrate to ``T_end`` and return telemetry with convergence detections.

    On divergence the partial telemetry is attached to the raised
    :class:`DivergenceDetected` as ``exc.telemetry``.
    """
    config.validate()
    net = prepare(config)
    world = initial_world(config, net)
    recorder = _Recorder(config.graph.n, config.state_dim)
    n_steps = config.n_steps
    logger.info(
        "run start: n=%d N=%d k=%d dt=%g T_end=%g steps=%d",
        config.graph.n,
        config.state_dim,
        config.k,
        config.dt,
        config.T_end,
        n_steps,
    )
    started = time.perf_counter()

    first: ErrorSnapshot | None = None
    try:
        for k in range(n_steps + 1):
            u = compute_inputs(world, config, net)
            err = measure_errors(world, u, net)
            if first is None:
                first = err
            log = k % config.decimate == 0 or k == n_steps
            recorder.observe(world, u, err, config.dt, log)
            if k == n_steps:
                break
            world = step(world, config, net, u)
            # keep the time axis free of accumulated rounding
            world = replace(world, t=(k + 1) * config.dt)
    except DivergenceDetected as exc:
        logger.error("run diverged: %s", exc)
        exc.telemetry = recorder.finish(completed=False)
        raise

    telemetry = recorder.finish(completed=True)
    eps_x, eps_u = conv_thresholds(
        config.conv_eps,
        float(np.linalg.norm(first.errx)),
        float(np.linalg.norm(first.erru)),
    )
    bands = sliding_bands(
        net.neighborhoods,
        config.gains,
        config.dt,
        eps_x,
        eps_u,
        config.band_c,
    )
    conv = convergence_times(
        telemetry.times,
        telemetry.errx,
        telemetry.erru,
        telemetry.errx_target,
        telemetry.erru_target,
        bands,
    )
    logger.info(
        "run finished in %.2fs: final consensus distance %.3e",
        time.perf_counter() - started,
        telemetry.consdist[-1],
    )
    for i, (tx, tu) in enumerate(zip(conv.x_target, conv.u_target), start=1):
        logger.debug("agent %d estimates: T_x_obs=%s T_u_obs=%s", i, tx, tu)
    return replace(telemetry, bands=bands, convergence=conv)


def csv_header(n: int, state_dim: int) -> list[str]:
    cols = ["t"]
    cols += [f"x_{i}_{c}" for i in range(1, n + 1) for c in range(1, state_dim + 1)]
    cols += [f"u_{i}_{c}" for i in range(1, n + 1) for c in range(1, state_dim + 1)]
    cols += [f"errx_{i}" for i in range(1, n + 1)]
    cols += [f"erru_{i}" for i in range(1, n + 1)]
    cols += [f"errxt_{i}" for i in range(1, n + 1)]
    cols += [f"errut_{i}" for i in range(1, n + 1)]
    cols += ["consdist", "vnorm", "vsup"]
    cols += [f"umax_{i}" for i in range(1, n + 1)]
    cols += [f"udotmax_{i}" for i in range(1, n + 1)]
    cols += [f"errutmax_{i}" for i in range(1, n + 1)]
    cols += ["errxmax"]
    return cols


def _fmt(value: float) -> str:
    return repr(float(value))


def write_csv(telemetry: Telemetry, path: str | Path) -> Path:
    """Write telemetry rows; float text uses ``repr`` so reruns are byte-identical."""
    dest = Path(path)
    dest.parent.mkdir(parents=True, exist_ok=True)
    n = telemetry.n_agents
    dim = telemetry.state_dim
    with dest.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(csv_header(n, dim))
        for r in range(telemetry.times.shape[0]):
            row = [telemetry.times[r]]
            row += list(telemetry.states[r].reshape(-1))
            row += list(telemetry.inputs[r].reshape(-1))
            row += list(telemetry.errx[r])
            row += list(telemetry.erru[r])
            row += list(telemetry.errx_target[r])
            row += list(telemetry.erru_target[r])
            row += [telemetry.consdist[r], telemetry.vnorm[r], telemetry.vsup[r]]
            row += list(telemetry.umax[r])
            row += list(telemetry.udotmax[r])
            row += list(telemetry.errutmax[r])
            row += [telemetry.errxmax[r]]
            writer.writerow([_fmt(v) for v in row])
    logger.info("wrote %d telemetry rows to %s", telemetry.times.shape[0], dest)
    return dest


def read_csv(path: str | Path, n: int, state_dim: int) -> Telemetry:
    """Load telemetry written by :func:`write_csv`.

    The audit is read from the running maxima on the last row. A header
    that does not match ``(n, state_dim)`` raises :class:`DimensionError`.
    """
    src = Path(path)
    with src.open(encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = csv_header(n, state_dim)
        if header != expected:
            raise DimensionError(
                f"{src}: CSV header does not match a run with n={n}, N={state_dim}"
            )
        try:
            data = np.asarray([[float(v) for v in row] for row in reader if row])
        except ValueError as exc:
            raise DimensionError(f"{src}: non-numeric telemetry value: {exc}") from exc
    if data.size == 0:
        data = np.zeros((0, len(expected)))
    if data.shape[1] != len(expected):
        raise DimensionError(f"{src}: rows must have {len(expected)} columns")

    col = 0

    def take(width: int) -> np.ndarray:
        nonlocal col
        block = data[:, col : col + width]
        col += width
        return block

    times = take(1)[:, 0]
    states = take(n * state_dim).reshape(-1, n, state_dim)
    inputs = take(n * state_dim).reshape(-1, n, state_dim)
    errx = take(n)
    erru = take(n)
    errx_target = take(n)
    erru_target = take(n)
    consdist, vnorm, vsup = take(3).T
    umax = take(n)
    udotmax = take(n)
    errutmax = take(n)
    errxmax = take(1)[:, 0]

    if times.size:
        audit = AssumptionAudit(
            max_u=umax[-1].copy(),
            max_udot=udotmax[-1].copy(),
            max_uerr_target=errutmax[-1].copy(),
            max_xerr=float(errxmax[-1]),
        )
    else:
        audit = AssumptionAudit(
            max_u=np.zeros(n),
            max_udot=np.zeros(n),
            max_uerr_target=np.zeros(n),
            max_xerr=0.0,
        )
    return Telemetry(
        times=times,
        states=states,
        inputs=inputs,
        errx=errx,
        erru=erru,
        errx_target=errx_target,
        erru_target=erru_target,
        consdist=consdist,
        vnorm=vnorm,
        vsup=vsup,
        umax=umax,
        udotmax=udotmax,
        errutmax=errutmax,
        errxmax=errxmax,
        audit=audit,
    )
