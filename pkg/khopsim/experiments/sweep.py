"""Parameter sweeps over dt, gain scales, and hop horizon."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from khopsim.errors import KhopError
from khopsim.scenarios import build
from khopsim.sim import run
from khopsim.verify import verify

logger = logging.getLogger(__name__)

SWEEP_KEYS = ("dt", "theta_scale", "pi_scale", "k")
SUMMARY_COLUMNS = (
    "cell",
    *SWEEP_KEYS,
    "status",
    "overall",
    "T_x_obs_max",
    "T_u_obs_max",
    "max_error",
    "final_consdist",
    "error",
)


def grid_cells(grid: Mapping[str, Sequence]) -> list[dict]:
    """Cartesian product of the grid axes, in ``SWEEP_KEYS`` order.

    Args:
        grid: Axis name to the values it takes, e.g. ``{"dt": [1e-3, 5e-4]}``.

    Returns:
        One dict per cell; ``[{}]`` for an empty grid.

    Raises:
        ValueError: If an axis is not one of ``SWEEP_KEYS``.
    """
    unknown = sorted(set(grid) - set(SWEEP_KEYS))
    if unknown:
        raise ValueError(f"Unknown sweep axes {unknown}. Valid: {list(SWEEP_KEYS)}")
    axes = [(key, list(grid[key])) for key in SWEEP_KEYS if key in grid]
    if not axes:
        return [{}]
    names = [name for name, _ in axes]
    combos = itertools.product(*(values for _, values in axes))
    return [dict(zip(names, combo)) for combo in combos]


def apply_cell(scenario: dict, cell: Mapping) -> dict:
    out = copy.deepcopy(scenario)
    if "dt" in cell:
        out.setdefault("sim", {})["dt"] = float(cell["dt"])
    if "k" in cell:
        out["k"] = int(cell["k"])
    for key in ("theta_scale", "pi_scale"):
        if key in cell:
            out.setdefault("gains", {})[key] = float(cell[key])
    return out


def _latest(times) -> float | None:
    times = list(times)
    if any(t is None for t in times):
        return None
    return max(times, default=0.0)


def run_cell(scenario: dict, cell: dict) -> dict:
    """Simulate and verify one grid cell; any failure becomes a row, not a raise."""
    row = {key: cell.get(key) for key in SWEEP_KEYS}
    try:
        built = build(apply_cell(scenario, cell))
        telemetry = run(built.config)
        report = verify(built.config, built.tuned, telemetry)
    except (KhopError, ValueError) as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return row
    except Exception as exc:
        logger.exception("sweep cell %s crashed", cell)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return row
    conv = telemetry.convergence
    row.update(
        status="ok",
        overall=report.overall,
        T_x_obs_max=_latest(conv.x_target),
        T_u_obs_max=_latest(conv.u_target),
        max_error=telemetry.max_error,
        final_consdist=float(telemetry.consdist[-1]),
    )
    return row


def sweep(scenario: dict, grid: Mapping[str, Sequence], workers: int = 1) -> list[dict]:
    """Run every cell; ``workers > 1`` fans cells out to processes."""
    cells = grid_cells(grid)
    logger.info("sweep: %d cells, %d worker(s)", len(cells), workers)
    if workers <= 1:
        rows = [run_cell(scenario, cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, itertools.repeat(scenario), cells))
    for idx, row in enumerate(rows):
        row["cell"] = idx
        if row["status"] != "ok":
            logger.warning("sweep cell %d failed: %s", idx, row["error"])
    return rows


def save_sweep(out_dir: str | Path, rows: list[dict], scenario_hash: str) -> Path:
    """Write ``sweep.json`` and a flat ``sweep.csv`` summary.

    Args:
        out_dir: Directory to create or reuse.
        rows: Rows from :func:`sweep`, in cell order.
        scenario_hash: Hash of the base scenario, stored in the JSON.

    Returns:
        Path of ``sweep.json``.
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    json_path = out_path / "sweep.json"
    with json_path.open("w", encoding="utf-8") as f:
        payload = {"scenario_hash": scenario_hash, "cells": rows}
        json.dump(payload, f, indent=2, sort_keys=True)

    with (out_path / "sweep.csv").open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key) for key in SUMMARY_COLUMNS})
    return json_path
