"""Observer gain design (G, omega, theta, pi) and finite-time certificates.

Gains are indexed by the *estimated* agent: every estimate of ``x_l`` kept by
the members of ``l``'s k-hop set is driven by ``omega_l``, ``theta_l`` and
``pi_l``, all tuned from ``M_l``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from khopsim.errors import (
    CertificateInfeasible,
    CouplingNotPD,
    GainConditionViolated,
)
from khopsim.graph.khop import (
    Graph,
    KHopNeighborhood,
    ObserverCoupling,
    all_khop_sets,
    coupling_matrices,
)
from khopsim.linalg.dense import (
    PD_TOL,
    SymMatrix,
    extreme_eigenvalues,
    is_negative_definite,
    kron,
    spectral_norm,
)
from khopsim.plant import PlantModel

logger = logging.getLogger(__name__)

DEFAULT_SLACK = 1e-3


@dataclass(frozen=True)
class BoundSet:
    """Known per-agent bounds on inputs, input rates, and input-estimate errors."""

    d_u: tuple[float, ...] | None = None
    d_udot: tuple[float, ...] | None = None
    d_tilde_u: tuple[float, ...] | None = None

    def validate(self, n: int) -> None:
        if self.d_u is None and self.d_udot is None:
            raise ValueError("at least one of d_u / d_udot must be given")
        for name in ("d_u", "d_udot", "d_tilde_u"):
            values = getattr(self, name)
            if values is None:
                continue
            if len(values) != n:
                raise ValueError(f"{name} must list {n} values, got {len(values)}")
            if any(v < 0 for v in values):
                raise ValueError(f"{name} entries must be non-negative")

    def with_default_d_tilde_u(
        self, nbs: Sequence[KHopNeighborhood], uhat0_max: float = 0.0
    ) -> BoundSet:
        """Fill ``d_tilde_u`` with ``sqrt(eta_i) * (d_u_i + max|u_hat(0)|)``."""
        if self.d_tilde_u is not None:
            return self
        if self.d_u is None:
            raise ValueError("d_tilde_u default requires d_u")
        values = tuple(
            math.sqrt(nb.eta) * (du + abs(uhat0_max))
            for nb, du in zip(nbs, self.d_u, strict=True)
        )
        return BoundSet(d_u=self.d_u, d_udot=self.d_udot, d_tilde_u=values)


@dataclass(frozen=True, eq=False)
class GainSet:
    """Observer design matrix and per-agent gains (index ``i - 1`` for agent i).

    Agents with an empty k-hop set carry zeros; nobody estimates them.
    """

    G: np.ndarray
    omega: tuple[float, ...]
    theta: tuple[float, ...]
    pi: tuple[float, ...]
    margins: tuple[dict[str, float], ...] = field(default=())

    @property
    def g(self) -> float | None:
        """Scalar ``g`` when ``G = g I``."""
        diag = np.diag(self.G)
        if np.allclose(self.G, np.diag(diag)) and np.allclose(diag, diag[0]):
            return float(diag[0])
        return None

    def scaled(self, theta_scale: float = 1.0, pi_scale: float = 1.0) -> GainSet:
        return GainSet(
            G=self.G,
            omega=self.omega,
            theta=tuple(t * theta_scale for t in self.theta),
            pi=tuple(p * pi_scale for p in self.pi),
            margins=self.margins,
        )


@dataclass(frozen=True)
class AgentCertificate:
    """Convergence certificate for the estimates of one agent's state/input."""

    agent: int
    eta: int
    phi: float | None
    psi: float | None
    T_x: float | None
    T_u: float | None

    @property
    def state_feasible(self) -> bool:
        return self.eta == 0 or (self.phi is not None and self.phi > 0)

    @property
    def input_feasible(self) -> bool:
        return self.eta == 0 or (self.psi is not None and self.psi > 0)


@dataclass(frozen=True)
class ConvergenceCertificate:
    """Per-agent certificates plus the team-level bounds."""

    agents: tuple[AgentCertificate, ...]

    @property
    def feasible(self) -> bool:
        return all(a.state_feasible and a.input_feasible for a in self.agents)

    @property
    def T_x(self) -> float | None:
        return _max_bound(a.T_x for a in self.agents)

    @property
    def T_u(self) -> float | None:
        return _max_bound(a.T_u for a in self.agents)

    @property
    def T_xu(self) -> float | None:
        if self.T_x is None or self.T_u is None:
            return None
        return self.T_u + self.T_x


def _max_bound(values) -> float | None:
    values = list(values)
    if any(v is None for v in values):
        return None
    return max(values, default=0.0)


def g_condition_matrix(A: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``G^T A + A^T G - 2 G^T G``."""
    return G.T @ A + A.T @ G - 2.0 * G.T @ G


def design_G(
    plant: PlantModel,
    g_scale: float | None = None,
    G: np.ndarray | None = None,
) -> np.ndarray:
    """Return an observer design matrix satisfying the G condition.

    By default ``G = g I`` with ``g = max(0, lambda_max((A + A^T)/2)) + 1``.
    A user ``g_scale`` or a full symmetric positive-definite ``G`` is checked
    instead; a violation raises :class:`GainConditionViolated`.
    """
    n = plant.state_dim
    if G is not None:
        cand = np.asarray(G, dtype=np.float64)
        if cand.shape != (n, n):
            raise GainConditionViolated(f"G must be {n}x{n}, got {cand.shape}")
        if extreme_eigenvalues(SymMatrix(cand))[0] <= PD_TOL:
            raise GainConditionViolated("G must be symmetric positive definite")
    elif g_scale is not None:
        if g_scale <= 0:
            raise GainConditionViolated(f"g_scale must be positive, got {g_scale}")
        cand = float(g_scale) * np.eye(n)
    else:
        sym_max = extreme_eigenvalues(SymMatrix.symmetric_part(plant.A))[1]
        cand = (max(0.0, sym_max) + 1.0) * np.eye(n)

    if not is_negative_definite(g_condition_matrix(plant.A, cand)):
        raise GainConditionViolated(
            "G^T A + A^T G - 2 G^T G is not negative definite for the chosen G"
        )
    return cand


def _g_extremes(G: np.ndarray) -> tuple[float, float]:
    return extreme_eigenvalues(SymMatrix.symmetric_part(G))


def _require_pd(coupling: ObserverCoupling) -> None:
    if coupling.lambda_min <= PD_TOL:
        raise CouplingNotPD(
            f"coupling matrix is not positive definite "
            f"(lambda_min={coupling.lambda_min:.3e})"
        )


def omega_threshold(
    coupling: ObserverCoupling, plant: PlantModel, G: np.ndarray
) -> float:
    """Smallest omega admitted by the tuning rule."""
    _require_pd(coupling)
    lam = coupling.lambda_min
    gtg_min = extreme_eigenvalues(SymMatrix.symmetric_part(G.T @ G))[0]
    mg_norm = coupling.lambda_max * spectral_norm(G)
    return (1.0 / lam) * (1.0 + plant.l_f * mg_norm / (lam * gtg_min))


def tune_omega(
    coupling: ObserverCoupling,
    plant: PlantModel,
    G: np.ndarray,
    slack: float = 0.0,
) -> float:
    """Linear observer gain; with ``l_f = 0`` this is ``1 / lambda_min(M)``."""
    if slack < 0:
        raise ValueError("omega slack must be non-negative")
    return omega_threshold(coupling, plant, G) + slack


def theta_threshold(
    coupling: ObserverCoupling, G: np.ndarray, d_tilde_u: float
) -> float:
    g_min, g_max = _g_extremes(G)
    return coupling.condition * (g_max / g_min) * d_tilde_u


def tune_theta(
    coupling: ObserverCoupling,
    G: np.ndarray,
    d_tilde_u: float,
    slack: float = DEFAULT_SLACK,
) -> float:
    """Discontinuous state-observer gain dominating the input-estimate error."""
    if d_tilde_u < 0:
        raise ValueError("d_tilde_u must be non-negative")
    if slack <= 0:
        raise ValueError("theta slack must be positive (strict inequality)")
    return theta_threshold(coupling, G, d_tilde_u) + slack


def pi_threshold(coupling: ObserverCoupling, eta: int, d_udot: float) -> float:
    return coupling.condition * math.sqrt(eta) * d_udot


def tune_pi(
    coupling: ObserverCoupling,
    eta: int,
    d_udot: float,
    slack: float = DEFAULT_SLACK,
) -> float:
    """Input-observer gain dominating the input rate."""
    if d_udot < 0:
        raise ValueError("d_udot must be non-negative")
    if slack <= 0:
        raise ValueError("pi slack must be positive (strict inequality)")
    return pi_threshold(coupling, eta, d_udot) + slack


@dataclass(frozen=True)
class Lemma3Check:
    holds: bool
    lambda_max: float


def verify_lemma3_inequality(
    coupling: ObserverCoupling,
    plant: PlantModel,
    G: np.ndarray,
    omega: float,
) -> Lemma3Check:
    """Assemble ``(M⊗G)(A^i - omega M⊗G) + l_f ||M⊗G|| I`` and test its sign."""
    mg = kron(coupling.M, G)
    a_blk = kron(np.eye(coupling.eta), plant.A)
    mat = mg @ (a_blk - omega * mg) + plant.l_f * spectral_norm(mg) * np.eye(
        mg.shape[0]
    )
    sym = SymMatrix.symmetric_part(mat)
    lam_max = extreme_eigenvalues(sym)[1]
    return Lemma3Check(holds=is_negative_definite(sym), lambda_max=lam_max)


def agent_certificate(
    agent: int,
    coupling: ObserverCoupling | None,
    G: np.ndarray,
    theta: float,
    pi: float,
    d_tilde_u: float | None,
    d_udot: float | None,
    x_err0: float,
    u_err0: float,
) -> AgentCertificate:
    """Evaluate phi, psi and the finite-time bounds for one estimated agent.

    ``x_err0``/``u_err0`` are the norms of the stacked initial errors on that
    agent's state/input over all of its estimators. Infeasible inequalities
    leave the corresponding bound as ``None``.
    """
    if coupling is None:
        return AgentCertificate(agent, 0, None, None, 0.0, 0.0)
    g_min, g_max = _g_extremes(G)
    lam_min, lam_max = coupling.lambda_min, coupling.lambda_max
    eta = coupling.eta

    phi = None
    t_x = None
    if d_tilde_u is not None:
        phi = theta * lam_min * g_min - lam_max * spectral_norm(G) * d_tilde_u
        if phi > 0:
            t_x = lam_max * g_max / phi * x_err0

    psi = None
    t_u = None
    if d_udot is not None:
        # ||M ⊗ I_N|| equals lambda_max(M) for symmetric PSD M
        psi = pi * lam_min - lam_max * math.sqrt(eta) * d_udot
        if psi > 0:
            t_u = lam_max / psi * u_err0
    return AgentCertificate(agent, eta, phi, psi, t_x, t_u)


def certificate(
    couplings: Sequence[ObserverCoupling | None],
    G: np.ndarray,
    gains: GainSet,
    bounds: BoundSet,
    x_err0: Sequence[float],
    u_err0: Sequence[float],
    strict: bool = True,
) -> ConvergenceCertificate:
    """Certificates for every agent.

    With ``strict`` an infeasible inequality raises
    :class:`CertificateInfeasible` naming it; otherwise it is reported.
    """
    agents = []
    for idx, coupling in enumerate(couplings):
        cert = agent_certificate(
            agent=idx + 1,
            coupling=coupling,
            G=G,
            theta=gains.theta[idx],
            pi=gains.pi[idx],
            d_tilde_u=None if bounds.d_tilde_u is None else bounds.d_tilde_u[idx],
            d_udot=None if bounds.d_udot is None else bounds.d_udot[idx],
            x_err0=x_err0[idx],
            u_err0=u_err0[idx],
        )
        agents.append(cert)
        if strict and not cert.state_feasible:
            raise CertificateInfeasible(
                f"agent {cert.agent}: phi={cert.phi} is not positive "
                "(theta does not dominate the input-estimate error bound)",
                inequality="phi",
                agent=cert.agent,
            )
        if strict and not cert.input_feasible:
            raise CertificateInfeasible(
                f"agent {cert.agent}: psi={cert.psi} is not positive "
                "(pi does not dominate the input-rate bound)",
                inequality="psi",
                agent=cert.agent,
            )
    return ConvergenceCertificate(agents=tuple(agents))


@dataclass(frozen=True, eq=False)
class TunedNetwork:
    """Everything the observers need, derived from graph, plant, and bounds."""

    graph: Graph
    k: int
    neighborhoods: tuple[KHopNeighborhood, ...]
    couplings: tuple[ObserverCoupling | None, ...]
    gains: GainSet
    bounds: BoundSet


def tune_network(
    graph: Graph,
    k: int,
    plant: PlantModel,
    bounds: BoundSet,
    g_scale: float | None = None,
    G: np.ndarray | None = None,
    slack: float = DEFAULT_SLACK,
    omega: Sequence[float] | None = None,
    theta: Sequence[float] | None = None,
    pi: Sequence[float] | None = None,
) -> TunedNetwork:
    """Tune every agent's gains; explicit per-agent lists override tuning."""
    bounds.validate(graph.n)
    nbs = tuple(all_khop_sets(graph, k))
    couplings = tuple(coupling_matrices(graph, nb) if nb.eta else None for nb in nbs)
    g_mat = design_G(plant, g_scale=g_scale, G=G)

    omegas, thetas, pis, margins = [], [], [], []
    for idx, (nb, coupling) in enumerate(zip(nbs, couplings, strict=True)):
        if coupling is None:
            omegas.append(0.0)
            thetas.append(0.0)
            pis.append(0.0)
            margins.append({})
            continue
        w_min = omega_threshold(coupling, plant, g_mat)
        w = tune_omega(coupling, plant, g_mat) if omega is None else omega[idx]

        margin = {"omega": w - w_min}
        if theta is not None:
            t = float(theta[idx])
        elif bounds.d_tilde_u is not None:
            t = tune_theta(coupling, g_mat, bounds.d_tilde_u[idx], slack)
        else:
            raise ValueError("theta needs d_tilde_u or an explicit override")
        if bounds.d_tilde_u is not None:
            margin["theta"] = t - theta_threshold(
                coupling, g_mat, bounds.d_tilde_u[idx]
            )

        if pi is not None:
            p = float(pi[idx])
        elif bounds.d_udot is not None:
            p = tune_pi(coupling, nb.eta, bounds.d_udot[idx], slack)
        else:
            raise ValueError("pi needs d_udot or an explicit override")
        if bounds.d_udot is not None:
            margin["pi"] = p - pi_threshold(coupling, nb.eta, bounds.d_udot[idx])

        omegas.append(float(w))
        thetas.append(float(t))
        pis.append(float(p))
        margins.append(margin)
        logger.debug(
            "agent %d: eta=%d omega=%.4f theta=%.4f pi=%.4f",
            nb.agent,
            nb.eta,
            w,
            t,
            p,
        )

    gains = GainSet(
        G=g_mat,
        omega=tuple(omegas),
        theta=tuple(thetas),
        pi=tuple(pis),
        margins=tuple(margins),
    )
    return TunedNetwork(
        graph=graph,
        k=k,
        neighborhoods=nbs,
        couplings=couplings,
        gains=gains,
        bounds=bounds,
    )


def gain_report(
    net: TunedNetwork,
    cert: ConvergenceCertificate,
    plant: PlantModel,
) -> dict:
    """JSON-ready gain report."""
    agents = []
    for nb, coupling, ac in zip(net.neighborhoods, net.couplings, cert.agents):
        idx = nb.agent - 1
        entry: dict = {"agent": nb.agent, "eta": nb.eta, "members": list(nb.members)}
        if coupling is not None:
            check = verify_lemma3_inequality(
                coupling, plant, net.gains.G, net.gains.omega[idx]
            )
            entry.update(
                {
                    "lambda_min": coupling.lambda_min,
                    "lambda_max": coupling.lambda_max,
                    "omega": net.gains.omega[idx],
                    "theta": net.gains.theta[idx],
                    "pi": net.gains.pi[idx],
                    "phi": ac.phi,
                    "psi": ac.psi,
                    "T_x_bound": ac.T_x,
                    "T_u_bound": ac.T_u,
                    "lemma3_holds": check.holds,
                    "lemma3_lambda_max": check.lambda_max,
                    "margins": net.gains.margins[idx],
                }
            )
        agents.append(entry)

    violated = []
    for ac in cert.agents:
        if not ac.state_feasible:
            violated.append({"agent": ac.agent, "inequality": "phi > 0"})
        if not ac.input_feasible:
            violated.append({"agent": ac.agent, "inequality": "psi > 0"})
    notes = []
    if all(nb.eta == 0 for nb in net.neighborhoods):
        notes.append("no observers needed: every agent is within 1 hop of the rest")

    return {
        "agents": agents,
        "global": {
            "g": net.gains.g,
            "G": net.gains.G.tolist(),
            "k": net.k,
            "T_x": cert.T_x,
            "T_u": cert.T_u,
            "T_xu": cert.T_xu,
        },
        "bounds": {
            "d_u": None if net.bounds.d_u is None else list(net.bounds.d_u),
            "d_udot": None if net.bounds.d_udot is None else list(net.bounds.d_udot),
            "d_tilde_u": (
                None if net.bounds.d_tilde_u is None else list(net.bounds.d_tilde_u)
            ),
        },
        "certified": cert.feasible,
        "violated": violated,
        "notes": notes,
        "tolerance": {"pd": PD_TOL},
    }
