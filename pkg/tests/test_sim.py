"""Tests for the closed-loop simulator, telemetry, and convergence detection."""

import math
import tempfile
from pathlib import Path

import numpy as np
import pytest

from khopsim.errors import (
    DimensionError,
    DivergenceDetected,
    ProtocolError,
    StateBoxExceeded,
)
from khopsim.graph.khop import Graph, cycle_graph, path_graph
from khopsim.plant import build_plant
from khopsim.sim import (
    Controller,
    SimConfig,
    consensus_control,
    consensus_distance,
    csv_header,
    detect_convergence,
    initial_errors,
    initial_world,
    prepare,
    read_csv,
    run,
    sliding_bands,
    step,
    write_csv,
)
from khopsim.tuning.gains import BoundSet, tune_network

X0 = np.array([[1.0], [2.0], [3.0], [4.0]])


def _path_config(k: int = 3, **overrides) -> SimConfig:
    plant = build_plant(state_dim=1)
    bounds = BoundSet(d_udot=(1.0,) * 4, d_tilde_u=(0.5,) * 4)
    net = tune_network(path_graph(4), k, plant, bounds, g_scale=20.0)
    params = {
        "plant": plant,
        "graph": path_graph(4),
        "k": k,
        "gains": net.gains,
        "x0": X0,
        "controller": Controller(target_graph=cycle_graph(4)),
        "T_end": 0.1,
    }
    params.update(overrides)
    return SimConfig(**params)


def test_consensus_distance() -> None:
    """Distance to the mean; identical rows are already in consensus."""
    assert consensus_distance(np.array([[0.0], [2.0]])) == pytest.approx(math.sqrt(2))
    assert consensus_distance(np.ones((3, 2))) == 0.0


def test_consensus_control_mixes_states_and_estimates() -> None:
    """Neighbour 2 is read directly, agent 4 through its estimate."""
    u = consensus_control(
        1,
        np.array([0.0]),
        {2: np.array([1.0])},
        {4: np.array([3.0])},
        frozenset({2, 4}),
    )
    np.testing.assert_allclose(u, [4.0])


def test_consensus_control_without_estimate() -> None:
    """A target neighbour with no estimate is a protocol violation."""
    with pytest.raises(ProtocolError):
        consensus_control(1, np.zeros(1), {2: np.zeros(1)}, {}, frozenset({2, 4}))


def test_target_edge_beyond_horizon() -> None:
    """Agent 1 cannot reach agent 4 on the path with k = 2."""
    with pytest.raises(ProtocolError, match="neither"):
        prepare(_path_config(k=2))


def test_initial_errors_and_v() -> None:
    """Zero initial estimates: v_1 = x_4 and v_4 = x_1."""
    err, u = initial_errors(_path_config())
    assert err.errx[0] == pytest.approx(5.0)
    np.testing.assert_allclose(err.v[:, 0], [4.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(u[:, 0], [0.0, 0.0, 0.0, -5.0])
    assert err.errx_target[3] == pytest.approx(math.sqrt(16.0 + 16.0))


def test_one_euler_step_by_hand() -> None:
    """First synchronous round from zero estimates, worked out by hand."""
    config = _path_config()
    net = prepare(config)
    world = step(initial_world(config, net), config, net)
    dt = config.dt
    gains = config.gains
    np.testing.assert_allclose(world.x[:, 0], [1.0, 2.0, 3.0, 4.0 - 5.0 * dt])
    # agent 1 estimates agents 3 and 4; xi = (x_3 - 0, x_hat^2_4 - 0) = (3, 0)
    obs1 = world.observers[0]
    expected_x = [
        dt * (gains.omega[2] * 20.0 * 3.0 + gains.theta[2]),
        dt * gains.theta[3],
    ]
    np.testing.assert_allclose(obs1.x_hat[:, 0], expected_x)
    np.testing.assert_allclose(obs1.u_hat[:, 0], [dt * gains.pi[2], dt * gains.pi[3]])
    assert world.t == pytest.approx(dt)


def test_single_agent_runs() -> None:
    """One agent, no neighbours, nothing to estimate."""
    plant = build_plant(state_dim=1)
    graph = Graph(n=1, edges=frozenset())
    net = tune_network(graph, 2, plant, BoundSet(d_udot=(0.0,), d_tilde_u=(0.0,)))
    config = SimConfig(
        plant=plant,
        graph=graph,
        k=2,
        gains=net.gains,
        x0=np.array([[0.5]]),
        controller=Controller(target_graph=graph),
        T_end=0.05,
    )
    telemetry = run(config)
    np.testing.assert_array_equal(telemetry.states[:, 0, 0], 0.5)
    assert telemetry.convergence.x_target == (0.0,)
    assert telemetry.max_error == 0.0


def test_zero_controller_holds_states() -> None:
    """u = 0 and f = 0 freeze the true states."""
    config = _path_config(controller=Controller(kind="zero"), decimate=10)
    telemetry = run(config)
    assert telemetry.times.shape == (11,)
    assert telemetry.times[-1] == pytest.approx(0.1)
    held = np.broadcast_to(X0, telemetry.states.shape)
    np.testing.assert_array_equal(telemetry.states, held)
    np.testing.assert_array_equal(telemetry.vnorm, 0.0)


def test_consensus_distance_shrinks() -> None:
    """The closed loop contracts and the running sup never drops."""
    telemetry = run(_path_config(T_end=1.0, decimate=50))
    assert telemetry.consdist[-1] < telemetry.consdist[0]
    assert np.all(np.diff(telemetry.vsup) >= 0.0)


def test_state_box_exceeded_keeps_partial_telemetry() -> None:
    """Unstable feedback leaves the box; rows up to the exit survive."""
    controller = Controller(
        kind="generic_feedback",
        target_graph=cycle_graph(4),
        K_self=5.0 * np.eye(1),
        K_nb=np.zeros((1, 1)),
    )
    config = _path_config(
        controller=controller, x0=np.ones((4, 1)), state_box=(-2.0, 2.0), T_end=1.0
    )
    with pytest.raises(StateBoxExceeded) as info:
        run(config)
    partial = info.value.telemetry
    assert partial is not None
    assert not partial.completed
    assert partial.times.size > 0
    assert 0.1 < info.value.time < 0.2


def test_config_validation() -> None:
    """Bad step, initial state outside the box, wrong x0 shape."""
    with pytest.raises(ValueError, match="dt"):
        _path_config(dt=0.0).validate()
    with pytest.raises(ValueError, match="state_box"):
        _path_config(x0=np.full((4, 1), 20.0)).validate()
    with pytest.raises(DimensionError):
        _path_config(x0=np.zeros((3, 1))).validate()




def test_estimate_overflow_is_divergence() -> None:
    """dt = 0.05 makes agent 1's linear observer step unstable."""
    config = _path_config(controller=Controller(kind="zero"), dt=0.05, T_end=200.0)
    with pytest.raises(DivergenceDetected) as info:
        run(config)
    assert 1 <= info.value.agent <= 4
    assert 0.0 < info.value.time < 200.0
    partial = info.value.telemetry
    assert partial is not None
    assert not partial.completed
    assert partial.times[-1] <= info.value.time


def test_detect_convergence() -> None:
    """Last band entry without eps; first dip under eps inside the tail with it."""
    times = np.array([0.0, 1.0, 2.0, 3.0])
    assert detect_convergence(times, np.array([5.0, 0.5, 2.0, 0.1]), 1.0) == 3.0
    assert detect_convergence(times, np.array([5.0, 0.5, 0.2, 2.0]), 1.0) is None
    assert detect_convergence(times, np.zeros(4), 1.0) == 0.0

    settled = np.array([5.0, 0.8, 0.05, 0.6])
    assert detect_convergence(times, settled, 1.0, eps=0.1) == 2.0
    assert detect_convergence(times, settled, 1.0) == 1.0
    # the tail chatters above eps: fall back to the band entry
    chatter = np.array([5.0, 0.8, 0.6, 0.7])
    assert detect_convergence(times, chatter, 1.0, eps=0.1) == 1.0
    # a dip before the final exit does not count
    late_exit = np.array([0.01, 5.0, 0.5, 0.05])
    assert detect_convergence(times, late_exit, 1.0, eps=0.1) == 3.0
    assert detect_convergence(times, np.array([0.0, 0.0, 0.0, 2.0]), 1.0, 0.1) is None


def test_sliding_bands() -> None:
    """c theta_l dt per target, floored at eps; estimators add members in quadrature."""
    config = _path_config()
    net = prepare(config)
    gains = config.gains
    bands = sliding_bands(net.neighborhoods, gains, 1e-3, 1e-6, 1e-6, c=5.0)
    assert bands.x_target[0] == pytest.approx(5.0 * 1e-3 * gains.theta[0])
    assert bands.u_target[1] == pytest.approx(5.0 * 1e-3 * gains.pi[1])
    # agent 1 estimates agents 3 and 4
    expected = math.hypot(bands.x_target[2], bands.x_target[3])
    assert bands.x[0] == pytest.approx(expected)

    floored = sliding_bands(net.neighborhoods, gains, 1e-3, 1.0, 2.0, c=5.0)
    np.testing.assert_array_equal(floored.x_target, 1.0)
    np.testing.assert_array_equal(floored.u_target, 2.0)
    assert floored.u[1] == pytest.approx(2.0)
    assert (floored.eps_x, floored.eps_u) == (1.0, 2.0)


def test_detected_times_stay_in_band() -> None:
    """Every detected target time starts a tail that never leaves the band."""
    telemetry = run(_path_config(T_end=1.0, decimate=5, conv_eps=1e-2))
    bands, conv = telemetry.bands, telemetry.convergence
    assert bands.eps_x == bands.eps_u == 1e-2
    for idx, t in enumerate(conv.x_target):
        if t is None:
            continue
        start = int(np.searchsorted(telemetry.times, t))
        assert np.all(telemetry.errx_target[start:, idx] <= bands.x_target[idx])


def test_euler_consistency_when_dt_is_halved() -> None:
    """With smoothed sign laws the final state moves by O(dt) as dt shrinks."""
    finals = [
        run(_path_config(dt=dt, boundary_layer=1.0)).states[-1]
        for dt in (2e-3, 1e-3, 5e-4)
    ]
    coarse = float(np.linalg.norm(finals[0] - finals[1]))
    fine = float(np.linalg.norm(finals[1] - finals[2]))
    assert 0.0 < fine < 0.75 * coarse
    assert fine < 1e-2


def test_full_communication_matches_closed_form_consensus() -> None:
    """Target graph equal to the communication graph: x(t) = exp(-L t) x0."""
    graph = path_graph(4)
    config = _path_config(
        controller=Controller(target_graph=graph), T_end=10.0, decimate=100
    )
    telemetry = run(config)
    w, V = np.linalg.eigh(graph.laplacian())
    for r in range(0, telemetry.times.size, 10):
        t = telemetry.times[r]
        exact = V @ np.diag(np.exp(-w * t)) @ V.T @ X0
        np.testing.assert_allclose(telemetry.states[r], exact, atol=2e-3)

    lam2 = 2.0 - math.sqrt(2.0)
    assert w[1] == pytest.approx(lam2)
    dist = telemetry.consdist
    envelope = dist[0] * np.exp(-lam2 * telemetry.times)
    assert np.all(dist <= envelope * (1.0 + 1e-9))
    late = math.log(dist[-11] / dist[-1]) / (telemetry.times[-1] - telemetry.times[-11])
    assert late == pytest.approx(lam2, rel=1e-2)


def test_csv_round_trip() -> None:
    """Rows and the per-step audit come back from disk unchanged."""
    telemetry = run(_path_config(decimate=20))
    with tempfile.TemporaryDirectory() as tmp:
        path = write_csv(telemetry, Path(tmp) / "telemetry.csv")
        loaded = read_csv(path, 4, 1)
        np.testing.assert_array_equal(loaded.times, telemetry.times)
        np.testing.assert_array_equal(loaded.states, telemetry.states)
        np.testing.assert_array_equal(loaded.errx_target, telemetry.errx_target)
        np.testing.assert_array_equal(loaded.vsup, telemetry.vsup)
        np.testing.assert_array_equal(loaded.audit.max_u, telemetry.audit.max_u)
        np.testing.assert_array_equal(loaded.audit.max_udot, telemetry.audit.max_udot)
        np.testing.assert_array_equal(
            loaded.audit.max_uerr_target, telemetry.audit.max_uerr_target
        )
        assert loaded.audit.max_xerr == telemetry.audit.max_xerr
        with pytest.raises(DimensionError, match="header"):
            read_csv(path, 5, 1)


def test_audit_does_not_depend_on_decimation() -> None:
    """Skipped rows still feed the running maxima."""
    every = run(_path_config(decimate=1))
    sparse = run(_path_config(decimate=25))
    np.testing.assert_array_equal(every.audit.max_udot, sparse.audit.max_udot)
    np.testing.assert_array_equal(sparse.udotmax[-1], sparse.audit.max_udot)
    assert sparse.errxmax[-1] == every.audit.max_xerr
    assert "udotmax_4" in csv_header(4, 1)
    assert csv_header(4, 1)[-1] == "errxmax"
