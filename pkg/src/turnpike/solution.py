"""Primal-dual trajectories and their serialization.

CSV emits one row per grid node with the columns ``t, x*, u*, lambda*, mu*``;
inputs and path multipliers live on intervals, so the terminal row repeats
the last interval value (documented convenience for plotting).  JSON stores
the full arrays plus metadata and round-trips exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .grid import TimeGrid

_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class Solution:
    """Solved trajectory on a grid: states and adjoints at the ``N+1`` nodes,
    inputs and multipliers on the ``N`` intervals."""

    grid: TimeGrid
    states: np.ndarray
    inputs: np.ndarray
    adjoints: np.ndarray
    multipliers: np.ndarray
    objective: float
    solver_tolerance: float
    terminal_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n_nodes = len(self.grid)
        arrays = {}
        for name, rows, axis1 in (
            ("states", n_nodes, None),
            ("inputs", n_nodes - 1, None),
            ("adjoints", n_nodes, None),
            ("multipliers", n_nodes - 1, None),
        ):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape[0] != rows:
                # allow (n,) vectors for scalar problems
                if arr.shape == (1, rows):
                    arr = arr.T
                else:
                    raise DimensionError(name, (rows, "*"), arr.shape)
            arr = arr.copy()
            arr.setflags(write=False)
            arrays[name] = arr
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        tm = np.asarray(self.terminal_multipliers, dtype=float).reshape(-1).copy()
        tm.setflags(write=False)
        object.__setattr__(self, "terminal_multipliers", tm)
        object.__setattr__(self, "objective", float(self.objective))
        object.__setattr__(self, "solver_tolerance", float(self.solver_tolerance))
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ConfigError("states must have one more row than inputs")

    # -- convenience accessors ---------------------------------------------

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def state_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.grid.nodes - t)))
        return self.states[k]

    def node_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.grid.nodes - t)))

    def inputs_at_nodes(self) -> np.ndarray:
        """Inputs aligned with nodes; the terminal node takes the last
        interval's value."""
        return np.vstack([self.inputs, self.inputs[-1]])

    def multipliers_at_nodes(self) -> np.ndarray:
        if self.multipliers.shape[1] == 0:
            return np.zeros((self.states.shape[0], 0))
        return np.vstack([self.multipliers, self.multipliers[-1]])

    # -- serialization -------------------------------------------------------

    def to_csv(self, path, header_lines=()):
        nx = self.states.shape[1]
        nu = self.inputs.shape[1]
        nm = self.multipliers.shape[1]
        cols = (
            ["t"]
            + [f"x{i}" for i in range(nx)]
            + [f"u{i}" for i in range(nu)]
            + [f"lambda{i}" for i in range(nx)]
            + [f"mu{i}" for i in range(nm)]
        )
        table = np.column_stack(
            [
                self.grid.nodes,
                self.states,
                self.inputs_at_nodes(),
                self.adjoints,
                self.multipliers_at_nodes(),
            ]
        )
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(",".join(cols) + "\n")
            for row in table:
                fh.write(",".join(_FLOAT_FMT % v for v in row) + "\n")

    def to_json_dict(self) -> dict:
        return {
            "grid": self.grid.nodes.tolist(),
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
            "adjoints": self.adjoints.tolist(),
            "multipliers": self.multipliers.tolist(),
            "terminal_multipliers": self.terminal_multipliers.tolist(),
            "objective": self.objective,
            "solver_tolerance": self.solver_tolerance,
            "metadata": self.metadata,
        }

    def to_json(self, path, header: Optional[dict] = None):
        doc = self.to_json_dict()
        if header:
            doc["header"] = header
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Solution":
        n_nodes = len(doc["grid"])
        mult = np.asarray(doc["multipliers"], dtype=float)
        if mult.size == 0:
            mult = np.zeros((n_nodes - 1, 0))
        return cls(
            grid=TimeGrid(np.asarray(doc["grid"], dtype=float)),
            states=np.asarray(doc["states"], dtype=float),
            inputs=np.asarray(doc["inputs"], dtype=float),
            adjoints=np.asarray(doc["adjoints"], dtype=float),
            multipliers=mult,
            terminal_multipliers=np.asarray(doc.get("terminal_multipliers", []), dtype=float),
            objective=doc["objective"],
            solver_tolerance=doc["solver_tolerance"],
            metadata=doc.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, path) -> "Solution":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))
