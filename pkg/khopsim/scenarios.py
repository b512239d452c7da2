"""Scenario loader, validation, hashing, and config builder."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from khopsim.errors import ScenarioError
from khopsim.graph.khop import (
    Graph,
    all_khop_sets,
    complete_graph,
    cycle_graph,
    load_edge_list,
    path_graph,
    star_graph,
)
from khopsim.plant import PlantModel, build_plant
from khopsim.rng import initial_states
from khopsim.sim import Controller, SimConfig
from khopsim.tuning.gains import DEFAULT_SLACK, BoundSet, TunedNetwork, tune_network

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_REQUIRED = ("graph", "k", "plant", "bounds")
_OPTIONAL_SECTIONS = ("sim", "gains", "outputs", "target_graph", "sweep")
_GRAPH_KINDS = {
    "path": path_graph,
    "cycle": cycle_graph,
    "complete": complete_graph,
}


def load_scenario(path: str | Path) -> dict:
    """Parse and validate a scenario file (YAML, or JSON as a YAML subset).

    A ``graph.edge_file`` is read relative to the scenario file and inlined,
    so the scenario hash covers the edges themselves.

    Args:
        path: Scenario file.

    Returns:
        The validated scenario mapping.

    Raises:
        ScenarioError: If the file does not parse or fails validation.
        OSError: If the file or its edge file cannot be read.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"{path.name}: not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError(f"{path.name}: top level must be a mapping")

    graph = data.get("graph")
    if isinstance(graph, dict) and "edge_file" in graph:
        edge_path = Path(graph["edge_file"])
        if not edge_path.is_absolute():
            edge_path = path.parent / edge_path
        g = load_edge_list(edge_path)
        data["graph"] = {"n": g.n, "edges": [list(e) for e in sorted(g.edges)]}

    validate_scenario(data, source=path.name)
    logger.info("loaded scenario '%s' from %s", data.get("name", path.stem), path)
    return data


def _check_edges(edges, source: str, name: str) -> None:
    if not isinstance(edges, list):
        raise ScenarioError(f"{source}: '{name}' must be a list of [i, j] pairs")
    for edge in edges:
        if (
            not isinstance(edge, (list, tuple))
            or len(edge) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in edge)
        ):
            raise ScenarioError(
                f"{source}: '{name}' entry {edge!r} is not an [i, j] integer pair"
            )


def validate_scenario(data: dict, source: str = "scenario") -> dict:
    """Check schema version, section types and required keys.

    Args:
        data: Parsed scenario mapping.
        source: Name used in error messages, usually the file name.

    Returns:
        ``data`` unchanged.

    Raises:
        ScenarioError: On any structural problem, before a value is used.
    """
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(
            f"{source}: unsupported schema_version {version!r} "
            f"(expected {SCHEMA_VERSION})"
        )
    missing = [key for key in _REQUIRED if key not in data]
    if missing:
        raise ScenarioError(f"{source}: missing sections {missing}")
    for key in ("graph", "plant", "bounds"):
        if not isinstance(data[key], dict):
            raise ScenarioError(f"{source}: '{key}' must be a mapping")
    for key in _OPTIONAL_SECTIONS:
        if data.get(key) is not None and not isinstance(data[key], dict):
            raise ScenarioError(f"{source}: '{key}' must be a mapping")

    graph = data["graph"]
    n = graph.get("n")
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ScenarioError(f"{source}: 'graph.n' must be a positive integer")
    if "edges" not in graph and "kind" not in graph:
        raise ScenarioError(f"{source}: 'graph' needs 'edges' or 'kind'")
    if "kind" in graph and graph["kind"] not in (*_GRAPH_KINDS, "star"):
        raise ScenarioError(f"{source}: unknown graph kind '{graph['kind']}'")
    if "edges" in graph:
        _check_edges(graph["edges"], source, "graph.edges")
    target = data.get("target_graph")
    if target and "edges" in target:
        _check_edges(target["edges"], source, "target_graph.edges")

    k = data["k"]
    if not isinstance(k, int) or isinstance(k, bool) or k < 2:
        raise ScenarioError(f"{source}: 'k' must be an integer >= 2")
    dim = data["plant"].get("state_dim")
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ScenarioError(f"{source}: 'plant.state_dim' must be a positive integer")

    sim = data.get("sim") or {}
    if sim.get("controller") is not None and not isinstance(sim["controller"], dict):
        raise ScenarioError(f"{source}: 'sim.controller' must be a mapping")
    for key in ("x0_range", "state_box"):
        pair = sim.get(key)
        if pair is not None and (not isinstance(pair, list) or len(pair) != 2):
            raise ScenarioError(f"{source}: 'sim.{key}' must be a [lo, hi] list")
    return data


def apply_overrides(
    scenario: dict,
    seed: int | None = None,
    decimate: int | None = None,
    slack: float | None = None,
    boundary_layer: float | None | str = "keep",
) -> dict:
    """Copy of ``scenario`` with command-line overrides applied."""
    out = copy.deepcopy(scenario)
    sim = out.setdefault("sim", {})
    if seed is not None:
        sim["seed"] = int(seed)
    if decimate is not None:
        out.setdefault("outputs", {})["decimate"] = int(decimate)
    if slack is not None:
        out.setdefault("gains", {})["slack"] = float(slack)
    if boundary_layer != "keep":
        sim["boundary_layer"] = boundary_layer
    return out


def scenario_hash(scenario: dict) -> str:
    """SHA-256 of the canonical JSON form of a scenario."""
    canonical = json.dumps(scenario, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _graph_from(section: dict, n: int | None = None) -> Graph:
    n = int(section.get("n", n))
    if "edges" in section:
        return Graph.from_edges(n, section["edges"])
    kind = section["kind"]
    if kind == "star":
        return star_graph(n - 1)
    return _GRAPH_KINDS[kind](n)


def _per_agent(value, n: int, name: str) -> tuple[float, ...] | None:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return tuple(float(value) for _ in range(n))
    if len(value) != n:
        raise ScenarioError(f"'{name}' must be a scalar or a list of {n} values")
    return tuple(float(v) for v in value)


def _matrix(value, dim: int, name: str) -> np.ndarray | None:
    if value is None:
        return None
    mat = np.asarray(value, dtype=np.float64)
    if mat.shape != (dim, dim):
        raise ScenarioError(f"'{name}' must be {dim}x{dim}, got {mat.shape}")
    return mat


@dataclass(frozen=True, eq=False)
class BuiltScenario:
    """Everything derived from one scenario dict."""

    name: str
    scenario: dict
    plant: PlantModel
    tuned: TunedNetwork
    config: SimConfig
    hash: str


def build_plant_from(section: dict) -> PlantModel:
    dim = int(section["state_dim"])
    return build_plant(
        state_dim=dim,
        A=_matrix(section.get("A"), dim, "plant.A"),
        f=section.get("f", "zero"),
        l_f=section.get("l_f"),
        saturation_limit=float(section.get("saturation_limit", 1.0)),
        f_table=section.get("f_table"),
    )


def build(scenario: dict) -> BuiltScenario:
    """Tune gains and assemble the :class:`SimConfig` for a scenario."""
    validate_scenario(scenario)
    graph = _graph_from(scenario["graph"])
    n = graph.n
    k = int(scenario["k"])
    plant = build_plant_from(scenario["plant"])
    dim = plant.state_dim

    sim = scenario.get("sim", {}) or {}
    gains_cfg = scenario.get("gains", {}) or {}
    b = scenario["bounds"] or {}
    bounds = BoundSet(
        d_u=_per_agent(b.get("d_u"), n, "bounds.d_u"),
        d_udot=_per_agent(b.get("d_udot"), n, "bounds.d_udot"),
        d_tilde_u=_per_agent(b.get("d_tilde_u"), n, "bounds.d_tilde_u"),
    )
    uhat0 = sim.get("uhat0", 0.0)
    if bounds.d_tilde_u is None and bounds.d_u is not None:
        bounds = bounds.with_default_d_tilde_u(
            all_khop_sets(graph, k), float(np.max(np.abs(uhat0)))
        )

    tuned = tune_network(
        graph,
        k,
        plant,
        bounds,
        g_scale=gains_cfg.get("g"),
        G=_matrix(gains_cfg.get("G"), dim, "gains.G"),
        slack=float(gains_cfg.get("slack", DEFAULT_SLACK)),
        omega=_per_agent(gains_cfg.get("omega"), n, "gains.omega"),
        theta=_per_agent(gains_cfg.get("theta"), n, "gains.theta"),
        pi=_per_agent(gains_cfg.get("pi"), n, "gains.pi"),
    )
    gains = tuned.gains.scaled(
        theta_scale=float(gains_cfg.get("theta_scale", 1.0)),
        pi_scale=float(gains_cfg.get("pi_scale", 1.0)),
    )

    if "x0" in sim:
        x0 = np.asarray(sim["x0"], dtype=np.float64).reshape(n, dim)
    else:
        lo, hi = sim.get("x0_range", [-1.0, 1.0])
        x0 = initial_states(int(sim.get("seed", 1)), n, dim, float(lo), float(hi))

    ctrl_cfg = sim.get("controller", {}) or {}
    kind = ctrl_cfg.get("kind", "khop_consensus")
    target = scenario.get("target_graph")
    target_graph = _graph_from(target, n) if target else graph
    controller = Controller(
        kind=kind,
        target_graph=None if kind == "zero" else target_graph,
        K_self=_matrix(ctrl_cfg.get("K_self"), dim, "controller.K_self"),
        K_nb=_matrix(ctrl_cfg.get("K_nb"), dim, "controller.K_nb"),
    )

    box = sim.get("state_box", [-10.0, 10.0])
    config = SimConfig(
        plant=plant,
        graph=graph,
        k=k,
        gains=gains,
        x0=x0,
        controller=controller,
        dt=float(sim.get("dt", 1e-3)),
        T_end=float(sim.get("T_end", 20.0)),
        xhat0=np.asarray(sim.get("xhat0", 0.0), dtype=np.float64),
        uhat0=np.asarray(uhat0, dtype=np.float64),
        state_box=(float(box[0]), float(box[1])),
        conv_eps=sim.get("conv_eps"),
        band_c=float(sim.get("band_c", 5.0)),
        boundary_layer=sim.get("boundary_layer"),
        uhat_bias=float(sim.get("uhat_bias", 0.0)),
        decimate=int((scenario.get("outputs") or {}).get("decimate", 1)),
    )
    config.validate()
    digest = scenario_hash(scenario)
    logger.info("built scenario '%s' (hash %s)", scenario.get("name", ""), digest[:12])
    return BuiltScenario(
        name=str(scenario.get("name", "scenario")),
        scenario=scenario,
        plant=plant,
        tuned=tuned,
        config=config,
        hash=digest,
    )


def scenario_to_config(scenario: dict) -> SimConfig:
    """Build only the :class:`SimConfig` of a scenario.

    Args:
        scenario: A scenario mapping, as returned by :func:`load_scenario`.

    Returns:
        The validated simulation config, gains tuned.

    Raises:
        ScenarioError: On a malformed scenario.
        ValueError: If the assembled config is inconsistent.
    """
    return build(scenario).config


def paper_scenario() -> dict:
    """Four single integrators on a path, consensus over the 4-cycle.

    The input-rate and input-error bounds are chosen so the tuned gains land
    on 2.62/1.0 (omega), 3.4/0.5 (theta) and 9.7/1.0 (pi).
    """
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "khop-consensus-path4",
        "description": (
            "Path communication graph 1-2-3-4, target graph adds edge {1,4}; "
            "agents 1 and 4 reach each other through 3-hop observers."
        ),
        "graph": {"n": 4, "edges": [[1, 2], [2, 3], [3, 4]]},
        "target_graph": {"edges": [[1, 2], [2, 3], [3, 4], [1, 4]]},
        "k": 3,
        "plant": {"state_dim": 2, "f": "zero"},
        "bounds": {"d_udot": 1.0, "d_tilde_u": 0.5},
        "gains": {"g": 20.0, "slack": DEFAULT_SLACK},
        "sim": {
            "dt": 1e-3,
            "T_end": 20.0,
            "seed": 7,
            "x0_range": [-1.0, 1.0],
            "xhat0": 0.0,
            "uhat0": 0.0,
            "state_box": [-10.0, 10.0],
            "band_c": 5.0,
            "controller": {"kind": "khop_consensus"},
        },
        "outputs": {"decimate": 10},
        "sweep": {"pi_scale": [0.5, 1.0, 2.0]},
    }


def paper_variants(base: dict | None = None) -> dict[str, dict]:
    """Baseline run, halved input-observer gains, and the negative control."""
    base = paper_scenario() if base is None else copy.deepcopy(base)
    base.setdefault("gains", {})
    base.setdefault("sim", {})

    pi_half = copy.deepcopy(base)
    pi_half["name"] = f"{base.get('name', 'scenario')}-pi-half"
    pi_half["gains"]["pi_scale"] = 0.5

    negative = copy.deepcopy(base)
    negative["name"] = f"{base.get('name', 'scenario')}-negative-control"
    negative["gains"]["theta_scale"] = 0.1
    negative["sim"]["uhat_bias"] = 5.0
    negative["sim"]["T_end"] = 10.0
    return {"baseline": base, "pi_half": pi_half, "negative_control": negative}
