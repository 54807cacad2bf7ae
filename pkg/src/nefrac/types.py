"""Shared value types: type space, simulation configuration, trajectories.

States are plain numpy arrays throughout the library: a population
configuration is a 1-D float vector indexed by the type space, and a
composition matrix is an (E, K) array whose column k holds the per-class
density of fraction k. ``TypeSpace`` carries the class labels used at the
I/O boundary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

BOUNDARY_POLICIES = ("full-truncation", "reflect-at-zero")
CLOCKS = ("ecological", "evolutionary")


@dataclass(frozen=True)
class TypeSpace:
    """Ordered finite set of population classes."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ConfigError("type space must contain at least one class")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("type space labels must be unique")

    @classmethod
    def of_size(cls, n: int) -> "TypeSpace":
        return cls(tuple(f"x{i + 1}" for i in range(n)))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of a stochastic simulation run.

    ``dt`` is a step on the ecological clock; ``None`` lets the engine pick
    0.01 / max(1, ||F(h_tilde)||). ``t_end`` is interpreted on ``t_end_clock``.
    ``store_points`` caps the number of recorded grid points per replicate;
    ``store_states`` can be switched off for large replicate counts where only
    the fraction weights and diagnostics are needed.
    """

    N: float
    K: int = 1
    dt: Optional[float] = None
    t_end: float = 1.0
    t_end_clock: str = "ecological"
    seed: int = 0
    replicates: int = 1
    boundary_policy: str = "full-truncation"
    store_points: int = 2048
    store_states: bool = True

    def __post_init__(self):
        if self.N <= 0:
            raise ConfigError("N must be positive")
        if self.K < 1:
            raise ConfigError("K must be a positive integer")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.t_end <= 0:
            raise ConfigError("t_end must be positive")
        if self.t_end_clock not in CLOCKS:
            raise ConfigError(f"t_end_clock must be one of {CLOCKS}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.boundary_policy not in BOUNDARY_POLICIES:
            raise ConfigError(f"boundary_policy must be one of {BOUNDARY_POLICIES}")
        if self.store_points < 2:
            raise ConfigError("store_points must be >= 2")

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "K": self.K,
            "dt": self.dt,
            "t_end": self.t_end,
            "t_end_clock": self.t_end_clock,
            "seed": self.seed,
            "replicates": self.replicates,
            "boundary_policy": self.boundary_policy,
            "store_points": self.store_points,
            "store_states": self.store_states,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serializable mapping."""
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class Trajectory:
    """Recorded sample paths with replicate and seed metadata.

    ``states`` has shape (replicates, len(times), ...) where the trailing
    axes depend on ``kind``: (E, K) for fraction systems, (E,) for total
    population or count paths, (K,) for simplex-valued paths. For rescaled
    runs ``theta`` holds the fraction weights <U^k, h> with shape
    (replicates, len(times), K), and ``diagnostics`` maps names to
    (replicates, len(times)) arrays.
    """

    times: np.ndarray
    states: Optional[np.ndarray]
    kind: str
    clock: str
    seed: int
    config_hash: str = ""
    theta: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def replicates(self) -> int:
        arr = self.states if self.states is not None else self.theta
        return 0 if arr is None else arr.shape[0]

    def __post_init__(self):
        if self.clock not in CLOCKS:
            raise ConfigError(f"clock must be one of {CLOCKS}")
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("trajectory times must be strictly increasing")
