"""Core data model: grid city, clocks, drivers, orders, transitions and the
engine configuration.

Cells are flat integer ids on a width x height grid, row-major
(``cell = y * width + x``). All times are seconds. ``clock`` counts seconds
since episode start; ``abs_time`` is seconds-of-day and is only attached to
states that feed the time-indexed offline value network.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

SECONDS_PER_DAY = 86400
MASK64 = 0xFFFFFFFFFFFFFFFF


class EngineError(Exception):
    """Base class for all engine failures."""


class ConfigError(EngineError):
    """Bad configuration file or inconsistent run setup."""


class DataError(EngineError):
    """Malformed input data (trajectories, order files, matrices)."""


class TrainingDivergence(EngineError):
    """Non-finite loss encountered during training."""


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    cell_edge_m: float = 500.0
    speed_mps: float = 5.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if self.cell_edge_m <= 0 or self.speed_mps <= 0:
            raise ConfigError("cell_edge_m and speed_mps must be positive")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def xy(self, cell: int) -> tuple[int, int]:
        return cell % self.width, cell // self.width

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def contains(self, cell: int) -> bool:
        return 0 <= cell < self.n_cells

    def cell_xy_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """x and y coordinate arrays indexed by cell id."""
        ids = np.arange(self.n_cells)
        return ids % self.width, ids // self.width

    def chebyshev(self, a: int, b: int) -> int:
        ax, ay = self.xy(a)
        bx, by = self.xy(b)
        return max(abs(ax - bx), abs(ay - by))

    def neighborhood(self, cell: int, radius: int) -> list[int]:
        """All cells within the Chebyshev radius, the cell itself included."""
        cx, cy = self.xy(cell)
        out = []
        for y in range(max(0, cy - radius), min(self.height, cy + radius + 1)):
            for x in range(max(0, cx - radius), min(self.width, cx + radius + 1)):
                out.append(self.cell(x, y))
        return out


@dataclass(frozen=True)
class SpatioTemporalState:
    cell: int
    clock: float
    abs_time: float | None = None

    def __post_init__(self):
        if self.clock < 0:
            raise ValueError(f"clock must be non-negative, got {self.clock}")
        if self.abs_time is not None and not (0 <= self.abs_time <= SECONDS_PER_DAY):
            raise ValueError(f"abs_time out of range: {self.abs_time}")


DRIVER_STATUSES = ("idle", "en_route", "on_trip", "offline")
ORDER_STATUSES = ("open", "matched", "cancelled", "completed")


@dataclass
class Driver:
    id: int
    state: SpatioTemporalState
    status: str = "idle"
    idle_since: float = 0.0
    online_since: float = 0.0
    income_accum: float = 0.0
    managed: bool = False


@dataclass
class Order:
    id: int
    origin: int
    destination: int
    created_at: float
    fee: float
    trip_duration: float
    status: str = "open"

    def __post_init__(self):
        if self.fee < 0:
            raise ValueError(f"order fee must be non-negative, got {self.fee}")
        if self.trip_duration <= 0:
            raise ValueError(f"trip_duration must be positive, got {self.trip_duration}")


@dataclass(frozen=True)
class DriverTransition:
    from_state: SpatioTemporalState
    kind: str  # "trip" | "idle"
    reward: float
    to_state: SpatioTemporalState
    duration: float

    def __post_init__(self):
        if self.kind not in ("trip", "idle"):
            raise ValueError(f"unknown transition kind {self.kind!r}")
        if self.kind == "idle" and self.reward != 0.0:
            raise ValueError("idle transitions carry zero reward")
        if self.duration <= 0:
            raise ValueError("transition duration must be positive")
        if not math.isclose(self.to_state.clock, self.from_state.clock + self.duration):
            raise ValueError("to.clock must equal from.clock + duration")


@dataclass
class EngineConfig:
    """All tunables of the engine. Field names double as the config-file keys."""

    gamma: float = 0.9
    discount_time_unit_s: float = 600.0
    omega: float = 0.2
    reposition_threshold_C: int = 150
    dispatch_round_s: float = 2.0
    online_lr_alpha: float = 0.025
    ope_lr: float = 3e-4
    lipschitz_lambda: float = 1e-4
    K_changepoints: int = 5
    segment_bin_s: float = 1800.0
    pickup_radius_cells: int = 3
    reposition_radius_cells: int = 2
    episode_horizon_s: float = 72000.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (0 <= self.omega <= 1):
            raise ConfigError(f"omega must lie in [0, 1], got {self.omega}")
        if self.discount_time_unit_s <= 0 or self.dispatch_round_s <= 0:
            raise ConfigError("time units must be positive")
        if self.reposition_threshold_C < 1:
            raise ConfigError("reposition_threshold_C must be at least 1")


def load_engine_config(path: str | Path) -> EngineConfig:
    """Read an EngineConfig from a flat JSON document.

    Unknown keys are a load error; missing keys take their defaults.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat key-value object")
    known = {f.name for f in fields(EngineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    return EngineConfig(**raw)


def save_engine_config(cfg: EngineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2) + "\n")


def discount_exponent(duration_s: float, cfg: EngineConfig) -> float:
    """Duration expressed in discount units; the factor applied downstream
    is ``gamma ** exponent``."""
    if duration_s < 0:
        raise ValueError(f"duration must be non-negative, got {duration_s}")
    return duration_s / cfg.discount_time_unit_s


def discount_factor(duration_s: float, cfg: EngineConfig) -> float:
    return cfg.gamma ** discount_exponent(duration_s, cfg)


def travel_time(a: int, b: int, grid: GridMap) -> int:
    """Cruise time between cell centers: Chebyshev distance at grid speed,
    rounded up to whole seconds. Zero iff a == b."""
    d = grid.chebyshev(a, b)
    if d == 0:
        return 0
    return math.ceil(d * grid.cell_edge_m / grid.speed_mps)


def travel_time_array(dist_cells: np.ndarray, grid: GridMap) -> np.ndarray:
    """Vectorized travel_time over an array of Chebyshev distances."""
    return np.ceil(dist_cells * (grid.cell_edge_m / grid.speed_mps)).astype(np.int64)


def substream_seed(seed: int, label: str) -> int:
    """Derive a named substream seed: seed xor the first 8 bytes of
    sha256(label). Stable across platforms and runs."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) & MASK64


def substream(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(substream_seed(seed, label)))
