"""Time grids for transcription.

A :class:`TimeGrid` is an ordered, strictly increasing sequence of node
times starting at 0 and ending at the horizon.  Discrete problems use the
integers ``0..T``; continuous problems may use arbitrary (also nonuniform)
node placements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TimeGrid:
    """Ordered node times ``t_0 = 0 < t_1 < ... < t_N = T``."""

    nodes: np.ndarray = field()

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigError("grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ConfigError(f"first grid node must be 0, got {nodes[0]}")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigError("grid nodes must be strictly increasing")
        nodes = nodes.copy()
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, horizon: float, n_intervals: int) -> "TimeGrid":
        if n_intervals < 1:
            raise ConfigError("need at least one interval")
        return cls(np.linspace(0.0, float(horizon), n_intervals + 1))

    @classmethod
    def integers(cls, horizon: int) -> "TimeGrid":
        """Grid ``0, 1, ..., T`` for a discrete-time problem."""
        return cls(np.arange(int(horizon) + 1, dtype=float))

    @property
    def n_intervals(self) -> int:
        return self.nodes.size - 1

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        """Interval lengths ``t_{k+1} - t_k``."""
        return np.diff(self.nodes)

    def __len__(self) -> int:
        return self.nodes.size
