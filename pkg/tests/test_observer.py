"""Tests for the distributed state and input observers."""

import numpy as np
import pytest

from khopsim.errors import MissingNeighborData, ProtocolError
from khopsim.graph.khop import (
    all_khop_sets,
    coupling_matrices,
    khop_set,
    path_graph,
    random_connected_graph,
    reorder_errors,
)
from khopsim.linalg.dense import kron
from khopsim.observer.khop import (
    MemberGains,
    NeighborMessage,
    compute_rho,
    compute_xi,
    error_norms,
    init_observer,
    input_observer_derivative,
    make_message,
    member_gains,
    observer_derivative,
    sign,
    state_observer_derivative,
)
from khopsim.plant import build_plant
from khopsim.tuning.gains import GainSet


def _messages(graph, observers, x, u) -> dict:
    return {
        obs.agent: make_message(obs.agent, graph.neighbors(obs.agent), x, u, obs)
        for obs in observers
    }


def _inbox(graph, msgs, i) -> dict:
    return {j: msgs[j] for j in graph.neighbors(i)}


def _unit_gains(eta: int, theta: float = 1.0, pi: float = 1.0) -> MemberGains:
    return MemberGains(
        G=np.eye(1),
        omega=np.ones(eta),
        theta=np.full(eta, theta),
        pi=np.full(eta, pi),
    )


def test_sign_convention() -> None:
    """sign(0) is +1."""
    np.testing.assert_array_equal(sign(np.array([-2.0, 0.0, 3.0])), [-1.0, 1.0, 1.0])


def test_sign_boundary_layer() -> None:
    """Inside the layer the sign is replaced by x / delta."""
    out = sign(np.array([-1.0, 0.05, 0.2]), boundary_layer=0.1)
    np.testing.assert_allclose(out, [-1.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        sign(np.zeros(1), boundary_layer=0.0)


def test_xi_vanishes_at_the_truth() -> None:
    """Exact estimates give a zero innovation for every agent."""
    g = path_graph(4)
    x = np.arange(8.0).reshape(4, 2)
    u = np.zeros((4, 2))
    nbs = all_khop_sets(g, 3)
    observers = []
    for nb in nbs:
        obs = init_observer(nb, 2)
        obs.x_hat[:] = x[[m - 1 for m in nb.members]]
        observers.append(obs)
    msgs = _messages(g, observers, x, u)
    for obs, nb in zip(observers, nbs):
        xi = compute_xi(obs, _inbox(g, msgs, nb.agent), nb)
        np.testing.assert_array_equal(xi, 0.0)


def test_state_rate_at_zero_innovation_is_theta() -> None:
    """With xi = 0, A = 0, f = 0 and u_hat = 0 the rate is +theta."""
    nb = khop_set(path_graph(4), 2, 3)
    obs = init_observer(nb, 1)
    dx = state_observer_derivative(
        obs, np.zeros((1, 1)), build_plant(state_dim=1), _unit_gains(1, theta=0.7),
        obs.u_hat,
    )
    np.testing.assert_allclose(dx, [[0.7]])


def test_innovation_matches_coupling_structure() -> None:
    """Target-grouped xi equals (M_l ⊗ I) times the target-grouped errors."""
    rng = np.random.default_rng(40)
    dim = 2
    checked = 0
    for _ in range(100):
        g = random_connected_graph(int(rng.integers(3, 9)), 0.35, rng)
        k = int(rng.integers(2, 5))
        nbs = all_khop_sets(g, k)
        if all(nb.eta == 0 for nb in nbs):
            continue
        x = rng.standard_normal((g.n, dim))
        u = rng.standard_normal((g.n, dim))
        observers = []
        for nb in nbs:
            obs = init_observer(nb, dim)
            obs.x_hat[:] = rng.standard_normal((nb.eta, dim))
            observers.append(obs)
        msgs = _messages(g, observers, x, u)

        xi_est = []
        err_est = []
        for obs, nb in zip(observers, nbs):
            if nb.eta == 0:
                continue
            xi_est.append(compute_xi(obs, _inbox(g, msgs, nb.agent), nb).reshape(-1))
            err_est.append((x[[m - 1 for m in nb.members]] - obs.x_hat).reshape(-1))
        xi_t = reorder_errors(nbs, np.concatenate(xi_est), dim)
        err_t = reorder_errors(nbs, np.concatenate(err_est), dim)

        expected = []
        cursor = 0
        for nb in nbs:
            if nb.eta == 0:
                continue
            block = err_t[cursor : cursor + nb.eta * dim]
            expected.append(kron(coupling_matrices(g, nb).M, np.eye(dim)) @ block)
            cursor += nb.eta * dim
        np.testing.assert_allclose(xi_t, np.concatenate(expected), atol=1e-12)
        checked += 1
    assert checked > 50


def test_innovation_is_local() -> None:
    """Agent 1 on a 5-path ignores the true states of agents 4 and 5."""
    g = path_graph(5)
    nbs = all_khop_sets(g, 4)
    observers = [init_observer(nb, 1, xhat0=0.3) for nb in nbs]
    x = np.linspace(-1.0, 1.0, 5).reshape(5, 1)
    u = np.zeros((5, 1))
    msgs = _messages(g, observers, x, u)
    before = compute_xi(observers[0], _inbox(g, msgs, 1), nbs[0])
    x2 = x.copy()
    x2[3:] += 5.0
    msgs2 = _messages(g, observers, x2, u)
    after = compute_xi(observers[0], _inbox(g, msgs2, 1), nbs[0])
    np.testing.assert_array_equal(before, after)


def test_missing_neighbor_message() -> None:
    """Agent 2 needs a message from agent 3 as well."""
    g = path_graph(4)
    nbs = all_khop_sets(g, 3)
    observers = [init_observer(nb, 1) for nb in nbs]
    msgs = _messages(g, observers, np.zeros((4, 1)), np.zeros((4, 1)))
    with pytest.raises(MissingNeighborData):
        compute_xi(observers[1], {1: msgs[1]}, nbs[1])


def test_message_from_non_neighbor() -> None:
    """Agent 1 only talks to agent 2."""
    g = path_graph(4)
    nbs = all_khop_sets(g, 3)
    observers = [init_observer(nb, 1) for nb in nbs]
    msgs = _messages(g, observers, np.zeros((4, 1)), np.zeros((4, 1)))
    with pytest.raises(ProtocolError, match="non-neighbours"):
        compute_xi(observers[0], {2: msgs[2], 4: msgs[4]}, nbs[0])


def test_conflicting_neighbor_report() -> None:
    """A member listed as both relayed and estimated is rejected."""
    g = path_graph(4)
    nb = khop_set(g, 1, 3)
    obs = init_observer(nb, 1)
    zero = np.zeros(1)
    bad = NeighborMessage(
        sender=2,
        state=zero,
        input=zero,
        relayed_states={1: zero, 3: zero},
        relayed_inputs={1: zero, 3: zero},
        est_states={3: zero, 4: zero},
        est_inputs={3: zero, 4: zero},
    )
    with pytest.raises(ProtocolError, match="both"):
        compute_xi(obs, {2: bad}, nb)


def test_input_observer_tracks_sinusoid() -> None:
    """pi = 2 dominates |d/dt sin t| = 1; the error settles by t = 1."""
    g = path_graph(3)
    nb1 = khop_set(g, 1, 2)
    obs1 = init_observer(nb1, 1, uhat0=1.0)
    obs2 = init_observer(khop_set(g, 2, 2), 1)
    gains = _unit_gains(1, pi=2.0)
    x = np.zeros((3, 1))
    dt = 1e-3
    late = []
    for step in range(5000):
        t = step * dt
        u = np.array([[0.0], [0.0], [np.sin(t)]])
        inbox = {2: make_message(2, g.neighbors(2), x, u, obs2)}
        rho = compute_rho(obs1, inbox, nb1)
        if t >= 1.1:
            late.append(abs(float(rho[0, 0])))
        obs1.u_hat = obs1.u_hat + dt * input_observer_derivative(obs1, rho, gains)
    assert max(late) <= 4e-3


def test_uhat_bias_enters_state_rate() -> None:
    """The bias is added to u_hat in the state rate only."""
    g = path_graph(3)
    nbs = all_khop_sets(g, 2)
    observers = [init_observer(nb, 1) for nb in nbs]
    msgs = _messages(g, observers, np.zeros((3, 1)), np.zeros((3, 1)))
    gains = _unit_gains(1, theta=0.0)
    deriv = observer_derivative(
        observers[0], _inbox(g, msgs, 1), nbs[0], build_plant(state_dim=1), gains,
        uhat_bias=5.0,
    )
    np.testing.assert_allclose(deriv.dx_hat, [[5.0]])
    np.testing.assert_allclose(deriv.du_hat, [[1.0]])


def test_empty_observer_derivative() -> None:
    """No members, empty rates."""
    g = path_graph(2)
    nb = khop_set(g, 1, 2)
    obs = init_observer(nb, 2)
    deriv = observer_derivative(obs, {}, nb, build_plant(state_dim=2), _unit_gains(0))
    assert deriv.dx_hat.shape == (0, 2)


def test_member_gains_follow_target() -> None:
    """Agent 1 estimates agents 3 and 4 with their gains."""
    gains = GainSet(
        G=np.eye(1),
        omega=(1.0, 2.0, 3.0, 4.0),
        theta=(5.0, 6.0, 7.0, 8.0),
        pi=(9.0, 10.0, 11.0, 12.0),
    )
    mg = member_gains(gains, khop_set(path_graph(4), 1, 3))
    np.testing.assert_array_equal(mg.omega, [3.0, 4.0])
    np.testing.assert_array_equal(mg.pi, [11.0, 12.0])


def test_error_norms() -> None:
    """Norms against the truth of agents 3 and 4."""
    nb = khop_set(path_graph(4), 1, 3)
    obs = init_observer(nb, 1)
    x = np.array([[0.0], [0.0], [3.0], [4.0]])
    u = np.array([[0.0], [0.0], [0.0], [1.0]])
    ex, eu = error_norms(obs, x, u)
    assert ex == pytest.approx(5.0)
    assert eu == pytest.approx(1.0)


def _tuned_gains(g: float = 20.0) -> GainSet:
    return GainSet(
        G=g * np.eye(1),
        omega=(2.618, 1.0, 1.0, 2.618),
        theta=(3.428, 0.501, 0.501, 3.428),
        pi=(9.694, 1.001, 1.001, 9.694),
    )


def test_exact_estimates_follow_the_plant() -> None:
    """Zero estimation error and a smoothed sign: x_hat moves like the plant."""
    g = path_graph(4)
    nbs = all_khop_sets(g, 3)
    plant = build_plant(state_dim=2, A=[[0.0, 1.0], [-1.0, -0.5]], f="saturation")
    gains = GainSet(
        G=3.0 * np.eye(2),
        omega=(2.0, 1.0, 1.0, 2.0),
        theta=(1.5, 0.5, 0.5, 1.5),
        pi=(4.0, 1.0, 1.0, 4.0),
    )
    rng = np.random.default_rng(41)
    x = rng.uniform(-2.0, 2.0, (4, 2))
    u = rng.uniform(-1.0, 1.0, (4, 2))
    observers = []
    for nb in nbs:
        obs = init_observer(nb, 2)
        rows = [m - 1 for m in nb.members]
        obs.x_hat[:] = x[rows]
        obs.u_hat[:] = u[rows]
        observers.append(obs)
    msgs = _messages(g, observers, x, u)
    for obs, nb in zip(observers, nbs):
        deriv = observer_derivative(
            obs,
            _inbox(g, msgs, nb.agent),
            nb,
            plant,
            member_gains(gains, nb),
            boundary_layer=0.1,
        )
        rows = [m - 1 for m in nb.members]
        expected = plant.drift(x[rows]) + u[rows]
        np.testing.assert_allclose(deriv.dx_hat, expected, atol=1e-12)
        np.testing.assert_array_equal(deriv.du_hat, 0.0)


def test_scalar_error_dynamics_by_target() -> None:
    """N = 1, f = 0: per target, e' = u_err - omega g M e - theta sgn(g M e)."""
    rng = np.random.default_rng(42)
    plant = build_plant(state_dim=1)
    gains = _tuned_gains()
    g_scale = 20.0
    g = path_graph(4)
    nbs = all_khop_sets(g, 3)
    for _ in range(20):
        x = rng.standard_normal((4, 1))
        u = rng.standard_normal((4, 1))
        observers = []
        for nb in nbs:
            obs = init_observer(nb, 1)
            obs.x_hat[:] = rng.standard_normal((nb.eta, 1))
            obs.u_hat[:] = rng.standard_normal((nb.eta, 1))
            observers.append(obs)
        msgs = _messages(g, observers, x, u)

        rate_est = []
        xerr_est = []
        uerr_est = []
        du_est = []
        for obs, nb in zip(observers, nbs):
            deriv = observer_derivative(
                obs, _inbox(g, msgs, nb.agent), nb, plant, member_gains(gains, nb)
            )
            rows = [m - 1 for m in nb.members]
            # truth moves with x' = u when f = 0 and A = 0
            rate_est.append((u[rows] - deriv.dx_hat).reshape(-1))
            xerr_est.append((x[rows] - obs.x_hat).reshape(-1))
            uerr_est.append((u[rows] - obs.u_hat).reshape(-1))
            du_est.append(deriv.du_hat.reshape(-1))
        rate = reorder_errors(nbs, np.concatenate(rate_est), 1)
        xerr = reorder_errors(nbs, np.concatenate(xerr_est), 1)
        uerr = reorder_errors(nbs, np.concatenate(uerr_est), 1)
        du = reorder_errors(nbs, np.concatenate(du_est), 1)

        cursor = 0
        for target, nb in enumerate(nbs):
            block = slice(cursor, cursor + nb.eta)
            cursor += nb.eta
            M = coupling_matrices(g, nb).M
            gme = g_scale * (M @ xerr[block])
            expected = (
                uerr[block]
                - gains.omega[target] * gme
                - gains.theta[target] * np.where(gme >= 0.0, 1.0, -1.0)
            )
            np.testing.assert_allclose(rate[block], expected, atol=1e-10)
            rho = M @ uerr[block]
            np.testing.assert_allclose(
                du[block], gains.pi[target] * np.where(rho >= 0.0, 1.0, -1.0)
            )
