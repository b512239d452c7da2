"""Agent dynamics ``x' = f(x) + A x + u`` and the registry of nonlinearities."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

NonlinearMap = Callable[[np.ndarray], np.ndarray]

F_REGISTRY = ("zero", "saturation", "table")


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Per-agent drift shared by every agent of the team."""

    state_dim: int
    A: np.ndarray
    f: NonlinearMap = field(compare=False)
    l_f: float = 0.0
    f_name: str = "zero"

    def validate(self) -> None:
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.A.shape != (self.state_dim, self.state_dim):
            raise ValueError(
                f"A must be {self.state_dim}x{self.state_dim}, got {self.A.shape}"
            )
        if self.l_f < 0:
            raise ValueError("l_f must be non-negative")

    def drift(self, x: np.ndarray) -> np.ndarray:
        """``f(x) + A x`` row-wise for an ``(m, N)`` block of states."""
        x = np.atleast_2d(x)
        return self.f(x) + x @ self.A.T


def _zero(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x, dtype=np.float64)


def _saturation(limit: float) -> NonlinearMap:
    def f(x: np.ndarray) -> np.ndarray:
        return np.clip(x, -limit, limit)

    return f


def _table(xs: np.ndarray, ys: np.ndarray) -> NonlinearMap:
    def f(x: np.ndarray) -> np.ndarray:
        return np.interp(x, xs, ys)

    return f


def build_plant(
    state_dim: int,
    A: Sequence[Sequence[float]] | np.ndarray | None = None,
    f: str = "zero",
    l_f: float | None = None,
    saturation_limit: float = 1.0,
    f_table: dict | None = None,
) -> PlantModel:
    """Assemble a :class:`PlantModel` from registry selectors.

    ``f="saturation"`` clips each component to ``[-limit, limit]`` (Lipschitz
    constant 1). ``f="table"`` interpolates ``f_table = {"x": [...], "y": [...]}``
    piecewise-linearly per component; its Lipschitz constant is the largest
    segment slope. A user-supplied ``l_f`` below the registry value is rejected.
    """
    a = np.zeros((state_dim, state_dim)) if A is None else np.asarray(A, float)
    if f == "zero":
        fn, lip = _zero, 0.0
    elif f == "saturation":
        if saturation_limit <= 0:
            raise ValueError("saturation_limit must be positive")
        fn, lip = _saturation(float(saturation_limit)), 1.0
    elif f == "table":
        if not f_table or "x" not in f_table or "y" not in f_table:
            raise ValueError("f='table' requires f_table with 'x' and 'y' lists")
        xs = np.asarray(f_table["x"], dtype=np.float64)
        ys = np.asarray(f_table["y"], dtype=np.float64)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
            raise ValueError("f_table 'x' and 'y' must be equal-length lists (>= 2)")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("f_table 'x' must be strictly increasing")
        fn = _table(xs, ys)
        lip = float(np.max(np.abs(np.diff(ys) / np.diff(xs))))
    else:
        raise ValueError(f"Unknown f '{f}'. Valid: {list(F_REGISTRY)}")

    if l_f is None:
        l_f = lip
    elif l_f < lip:
        raise ValueError(f"l_f={l_f} is below the Lipschitz constant {lip} of f")
    plant = PlantModel(state_dim=state_dim, A=a, f=fn, l_f=float(l_f), f_name=f)
    plant.validate()
    return plant
