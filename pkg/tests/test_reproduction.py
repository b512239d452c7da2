"""End-to-end checks on the four-agent path consensus example and its variants."""

import numpy as np
import pytest

from khopsim.scenarios import build, paper_variants
from khopsim.sim import run
from khopsim.verify import NOT_CERTIFIED, PASS, verify


def _run_variant(name: str):
    built = build(paper_variants()[name])
    telemetry = run(built.config)
    return built, telemetry, verify(built.config, built.tuned, telemetry)


@pytest.fixture(scope="module")
def baseline():
    return _run_variant("baseline")


@pytest.fixture(scope="module")
def pi_half():
    return _run_variant("pi_half")


@pytest.fixture(scope="module")
def negative_control():
    return _run_variant("negative_control")


def test_baseline_gains(baseline) -> None:
    """Tuned gains on the path with g = 20."""
    built, _, _ = baseline
    gains = built.config.gains
    np.testing.assert_allclose(gains.omega, [2.618, 1.0, 1.0, 2.618], atol=1e-3)
    np.testing.assert_allclose(gains.theta, [3.428, 0.501, 0.501, 3.428], atol=1e-3)
    np.testing.assert_allclose(gains.pi, [9.694, 1.001, 1.001, 9.694], atol=1e-3)


def test_baseline_passes(baseline) -> None:
    _, telemetry, report = baseline
    assert telemetry.completed
    assert report.overall == PASS


def test_baseline_reaches_consensus(baseline) -> None:
    """Twenty seconds bring the agents together."""
    _, telemetry, _ = baseline
    assert telemetry.consdist[-1] < 1e-2
    assert telemetry.times[-1] == pytest.approx(20.0)


def test_baseline_iss_envelope(baseline) -> None:
    """The 4-cycle has algebraic connectivity 2."""
    _, _, report = baseline
    (iss,) = report.by_name("iss_envelope")
    assert iss.status == PASS
    assert iss.detail == "lambda_2=2"


def test_baseline_state_times_within_certificate(baseline) -> None:
    """Every target's state estimates settle within the certified time."""
    _, _, report = baseline
    rows = report.by_name("state_convergence_time")
    assert len(rows) == 4
    for row in rows:
        assert row.observed is not None
        assert row.observed <= row.bound


def test_baseline_error_bound_after_inputs_settle(baseline) -> None:
    """Once inputs are estimated, state errors never grow."""
    _, _, report = baseline
    rows = report.by_name("lemma4_error_bound")
    assert len(rows) == 4
    assert all(r.status == PASS for r in rows)


def test_halved_input_gain_keeps_state_convergence(pi_half) -> None:
    """Input certificates are lost but state estimates still converge in time."""
    _, _, report = pi_half
    for row in report.by_name("input_convergence_time"):
        assert row.status == NOT_CERTIFIED
    for row in report.by_name("state_convergence_time"):
        assert row.observed is not None
        assert row.observed <= row.bound


def test_negative_control_not_certified(negative_control) -> None:
    """A biased input estimate with weak theta never settles."""
    _, telemetry, report = negative_control
    assert telemetry.completed
    assert any(t is None for t in telemetry.convergence.x_target)
    rows = report.by_name("state_convergence_time")
    unconverged = [r for r in rows if r.observed is None]
    assert unconverged
    assert all(r.status == NOT_CERTIFIED for r in unconverged)
    assert report.overall != PASS
