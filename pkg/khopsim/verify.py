"""Offline checks of a simulated run against the convergence guarantees."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from khopsim.errors import InternalConsistencyError
from khopsim.graph.khop import check_lemma1
from khopsim.linalg.dense import PD_TOL, algebraic_connectivity
from khopsim.sim import (
    ConvergenceTimes,
    SimConfig,
    Telemetry,
    conv_thresholds,
    convergence_times,
    sliding_bands,
)
from khopsim.tuning.gains import (
    ConvergenceCertificate,
    TunedNetwork,
    certificate,
    verify_lemma3_inequality,
)

logger = logging.getLogger(__name__)

PASS = "PASS"
FAIL = "FAIL"
NOT_CERTIFIED = "NOT_CERTIFIED"
NOT_APPLICABLE = "NOT_APPLICABLE"

ISS_TOL = 1e-6
CONSENSUS_TOL = 1e-2


@dataclass(frozen=True)
class Criterion:
    """One pass/fail line of a verification report."""

    name: str
    status: str
    observed: float | None = None
    bound: float | None = None
    tolerance: float | None = None
    agent: int | None = None
    detail: str = ""

    @property
    def margin(self) -> float | None:
        if self.observed is None or self.bound is None:
            return None
        return self.bound - self.observed


@dataclass
class VerificationReport:
    criteria: list[Criterion] = field(default_factory=list)
    agents: list[dict] = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    max_error: float | None = None
    scenario_hash: str | None = None

    @property
    def overall(self) -> str:
        statuses = {c.status for c in self.criteria}
        if FAIL in statuses:
            return FAIL
        if NOT_CERTIFIED in statuses:
            return NOT_CERTIFIED
        return PASS

    def by_name(self, name: str) -> list[Criterion]:
        return [c for c in self.criteria if c.name == name]

    def to_dict(self) -> dict:
        criteria = []
        for c in self.criteria:
            entry = asdict(c)
            entry["margin"] = c.margin
            criteria.append(entry)
        return {
            "scenario_hash": self.scenario_hash,
            "overall": self.overall,
            "criteria": criteria,
            "agents": self.agents,
            "audit": self.audit,
            "max_error": self.max_error,
        }


def _exceeds(observed: float, bound: float | None) -> bool:
    return bound is not None and observed > bound


def _timing_status(
    observed: float | None,
    bound: float | None,
    feasible: bool,
    assumptions_hold: bool,
) -> str:
    if not feasible or bound is None:
        return NOT_CERTIFIED
    if observed is not None and observed <= bound:
        return PASS
    return FAIL if assumptions_hold else NOT_CERTIFIED


def _structural_criteria(tuned: TunedNetwork, config: SimConfig) -> list[Criterion]:
    out = []
    try:
        check_lemma1(tuned.graph, tuned.k)
        out.append(Criterion("lemma1_overlap", PASS))
    except InternalConsistencyError as exc:
        out.append(Criterion("lemma1_overlap", FAIL, detail=str(exc)))

    for nb, coupling in zip(tuned.neighborhoods, tuned.couplings):
        if coupling is None:
            continue
        out.append(
            Criterion(
                "lemma2_coupling_pd",
                PASS if coupling.lambda_min > PD_TOL else FAIL,
                observed=coupling.lambda_min,
                bound=PD_TOL,
                tolerance=PD_TOL,
                agent=nb.agent,
            )
        )
        check = verify_lemma3_inequality(
            coupling, config.plant, config.gains.G, config.gains.omega[nb.agent - 1]
        )
        out.append(
            Criterion(
                "lemma3_inequality",
                PASS if check.holds else FAIL,
                observed=check.lambda_max,
                bound=0.0,
                tolerance=PD_TOL,
                agent=nb.agent,
            )
        )
    return out


def _audit(tuned: TunedNetwork, telemetry: Telemetry) -> tuple[dict, list, list]:
    """Observed extremes vs declared bounds, and which targets break them."""
    bounds = tuned.bounds
    a = telemetry.audit
    rows = []
    state_ok = []
    input_ok = []
    for idx in range(telemetry.n_agents):
        d_u = None if bounds.d_u is None else bounds.d_u[idx]
        d_udot = None if bounds.d_udot is None else bounds.d_udot[idx]
        d_tu = None if bounds.d_tilde_u is None else bounds.d_tilde_u[idx]
        row = {
            "agent": idx + 1,
            "max_u": float(a.max_u[idx]),
            "d_u": d_u,
            "u_ok": not _exceeds(float(a.max_u[idx]), d_u),
            "max_udot": float(a.max_udot[idx]),
            "d_udot": d_udot,
            "udot_ok": not _exceeds(float(a.max_udot[idx]), d_udot),
            "max_uerr": float(a.max_uerr_target[idx]),
            "d_tilde_u": d_tu,
            "uerr_ok": not _exceeds(float(a.max_uerr_target[idx]), d_tu),
        }
        rows.append(row)
        state_ok.append(row["uerr_ok"])
        input_ok.append(row["udot_ok"] and row["u_ok"])
    return {"agents": rows}, state_ok, input_ok


def _certificate_criteria(
    cert: ConvergenceCertificate,
    conv: ConvergenceTimes,
    state_ok: list[bool],
    input_ok: list[bool],
) -> list[Criterion]:
    out = []
    for idx, ac in enumerate(cert.agents):
        if ac.eta == 0:
            continue
        out.append(
            Criterion(
                "state_convergence_time",
                _timing_status(
                    conv.x_target[idx], ac.T_x, ac.state_feasible, state_ok[idx]
                ),
                observed=conv.x_target[idx],
                bound=ac.T_x,
                agent=ac.agent,
                detail=f"phi={ac.phi}",
            )
        )
        out.append(
            Criterion(
                "input_convergence_time",
                _timing_status(
                    conv.u_target[idx], ac.T_u, ac.input_feasible, input_ok[idx]
                ),
                observed=conv.u_target[idx],
                bound=ac.T_u,
                agent=ac.agent,
                detail=f"psi={ac.psi}",
            )
        )

    observed_x = [t for t, ac in zip(conv.x_target, cert.agents) if ac.eta]
    if observed_x:
        worst = None if any(t is None for t in observed_x) else max(observed_x)
        out.append(
            Criterion(
                "combined_convergence_time",
                _timing_status(worst, cert.T_xu, cert.feasible, all(state_ok)),
                observed=worst,
                bound=cert.T_xu,
            )
        )
    return out


def iss_envelope(
    config: SimConfig, telemetry: Telemetry, tol: float = ISS_TOL
) -> Criterion:
    """Disagreement stays under ``e^{-l2 t}|x(0)| + sup|v| / l2`` at every row.

    Only defined for single-integrator agents under the consensus controller.
    """
    plant = config.plant
    linear_free = not np.any(plant.A) and plant.f_name == "zero"
    if config.controller.kind != "khop_consensus" or not linear_free:
        return Criterion(
            "iss_envelope",
            NOT_APPLICABLE,
            detail="requires A = 0, f = 0 and the consensus controller",
        )
    lam2 = algebraic_connectivity(config.controller.target_graph.laplacian())
    t = telemetry.times
    d0 = float(telemetry.consdist[0])
    envelope = np.exp(-lam2 * t) * d0 + telemetry.vsup / lam2 + tol
    excess = float(np.max(telemetry.consdist - envelope))
    return Criterion(
        "iss_envelope",
        PASS if excess <= 0.0 else FAIL,
        observed=excess,
        bound=0.0,
        tolerance=tol,
        detail=f"lambda_2={lam2:.6g}",
    )


def lemma4_monotonicity(
    telemetry: Telemetry, conv: ConvergenceTimes, band_x: np.ndarray
) -> list[Criterion]:
    """After the input observers settle, no state error grows past its value then."""
    if any(t is None for t in conv.u):
        return [
            Criterion(
                "lemma4_error_bound",
                NOT_CERTIFIED,
                detail="input observers never settled",
            )
        ]
    t_u = max(conv.u, default=0.0)
    k0 = int(np.searchsorted(telemetry.times, t_u, side="left"))
    out = []
    for idx in range(telemetry.n_agents):
        ref = float(telemetry.errx[k0, idx])
        bound = ref + float(band_x[idx])
        later = telemetry.errx[k0 + 1 :, idx]
        worst = float(later.max()) if later.size else ref
        out.append(
            Criterion(
                "lemma4_error_bound",
                PASS if worst <= bound else FAIL,
                observed=worst,
                bound=bound,
                tolerance=float(band_x[idx]),
                agent=idx + 1,
                detail=f"T_u_obs={t_u:.6g}",
            )
        )
    return out


def consensus_reached(
    config: SimConfig, telemetry: Telemetry, tol: float = CONSENSUS_TOL
) -> Criterion:
    if config.controller.kind != "khop_consensus":
        return Criterion("consensus", NOT_APPLICABLE)
    final = float(telemetry.consdist[-1])
    return Criterion(
        "consensus",
        PASS if final < tol else FAIL,
        observed=final,
        bound=tol,
        tolerance=tol,
    )


def verify(
    config: SimConfig,
    tuned: TunedNetwork,
    telemetry: Telemetry,
    iss_tol: float = ISS_TOL,
    consensus_tol: float = CONSENSUS_TOL,
) -> VerificationReport:
    """Recompute every criterion from telemetry alone.

    Works on a fresh run or on telemetry read back from CSV; initial error
    norms for the certificates come from the first logged row.
    """
    if telemetry.times.size == 0:
        raise ValueError("telemetry has no rows")
    x_err0 = telemetry.errx_target[0]
    u_err0 = telemetry.erru_target[0]
    cert = certificate(
        tuned.couplings,
        config.gains.G,
        config.gains,
        tuned.bounds,
        x_err0,
        u_err0,
        strict=False,
    )

    bands = telemetry.bands
    if bands is None:
        eps_x, eps_u = conv_thresholds(
            config.conv_eps,
            float(np.linalg.norm(telemetry.errx[0])),
            float(np.linalg.norm(telemetry.erru[0])),
        )
        bands = sliding_bands(
            tuned.neighborhoods,
            config.gains,
            config.dt,
            eps_x,
            eps_u,
            config.band_c,
        )
    conv = telemetry.convergence or convergence_times(
        telemetry.times,
        telemetry.errx,
        telemetry.erru,
        telemetry.errx_target,
        telemetry.erru_target,
        bands,
    )

    audit, state_ok, input_ok = _audit(tuned, telemetry)
    report = VerificationReport(audit=audit, max_error=telemetry.max_error)
    report.criteria.extend(_structural_criteria(tuned, config))
    report.criteria.extend(_certificate_criteria(cert, conv, state_ok, input_ok))
    report.criteria.append(iss_envelope(config, telemetry, iss_tol))
    report.criteria.extend(lemma4_monotonicity(telemetry, conv, bands.x))
    report.criteria.append(consensus_reached(config, telemetry, consensus_tol))
    if not telemetry.completed:
        report.criteria.append(
            Criterion("run_completed", FAIL, detail="simulation diverged")
        )

    for nb, coupling, ac in zip(tuned.neighborhoods, tuned.couplings, cert.agents):
        idx = nb.agent - 1
        entry = {
            "agent": nb.agent,
            "eta": nb.eta,
            "members": list(nb.members),
            "band_x": float(bands.x_target[idx]),
            "band_u": float(bands.u_target[idx]),
            "T_x_obs": conv.x_target[idx],
            "T_u_obs": conv.u_target[idx],
            "T_x_obs_estimator": conv.x[idx],
            "T_u_obs_estimator": conv.u[idx],
        }
        if coupling is not None:
            entry.update(
                {
                    "lambda_min": coupling.lambda_min,
                    "lambda_max": coupling.lambda_max,
                    "omega": config.gains.omega[idx],
                    "theta": config.gains.theta[idx],
                    "pi": config.gains.pi[idx],
                    "phi": ac.phi,
                    "psi": ac.psi,
                    "T_x_bound": ac.T_x,
                    "T_u_bound": ac.T_u,
                }
            )
        report.agents.append(entry)

    for c in report.criteria:
        if c.status in (FAIL, NOT_CERTIFIED):
            logger.warning(
                "%s%s: %s %s",
                c.name,
                "" if c.agent is None else f" (agent {c.agent})",
                c.status,
                c.detail,
            )
    logger.info("verification overall: %s", report.overall)
    return report

