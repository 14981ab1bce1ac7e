"""Idle-fleet repositioning policies.

The value-based policy samples a destination with probability proportional
to exp(gamma^dt * V(candidate)); its greedy variant takes the argmax with
random tie-breaking; the Expert baseline replays an hour-of-day transition
matrix estimated from historical idle movements.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .domain import DataError, EngineConfig, GridMap, SpatioTemporalState, travel_time_array
from .online_engine import OnlineValue

logger = logging.getLogger(__name__)


@dataclass
class RepositionCandidateSet:
    """Destination candidates around one idle driver. The origin is always a
    candidate with zero travel time, so staying put is never discounted."""

    origin: SpatioTemporalState
    cells: np.ndarray      # candidate cell ids, origin included
    travel_s: np.ndarray   # per-candidate travel time, 0 for the origin

    def __post_init__(self):
        if self.origin.cell not in self.cells:
            raise ValueError("candidate set must include the origin cell")
        at_origin = self.travel_s[np.nonzero(self.cells == self.origin.cell)[0]]
        if np.any(at_origin != 0):
            raise ValueError("origin candidate must have zero travel time")


def candidate_set(origin: SpatioTemporalState, grid: GridMap, radius: int) -> RepositionCandidateSet:
    cells = np.array(grid.neighborhood(origin.cell, radius), dtype=np.int64)
    ox, oy = grid.xy(origin.cell)
    dist = np.maximum(np.abs(cells % grid.width - ox), np.abs(cells // grid.width - oy))
    return RepositionCandidateSet(origin, cells, travel_time_array(dist, grid))


def reposition_distribution(cands: RepositionCandidateSet, V: OnlineValue,
                            cfg: EngineConfig, value_scale: float = 1.0) -> np.ndarray:
    """Softmax over discounted candidate values, computed with
    max-subtraction. value_scale optionally divides the exponents to tame
    currency-unit sensitivity (1 = the literal rule)."""
    if len(cands.cells) == 0:
        raise ValueError("candidate set is empty")
    dt = cands.travel_s.astype(np.float64)
    vals = V.lookup(cands.cells, cands.origin.clock + dt)
    z = cfg.gamma ** (dt / cfg.discount_time_unit_s) * vals / value_scale
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def discounted_candidate_values(cands: RepositionCandidateSet, V: OnlineValue,
                                cfg: EngineConfig) -> np.ndarray:
    dt = cands.travel_s.astype(np.float64)
    vals = V.lookup(cands.cells, cands.origin.clock + dt)
    return cfg.gamma ** (dt / cfg.discount_time_unit_s) * vals


def sample_reposition(drivers: list[tuple[int, SpatioTemporalState]], V: OnlineValue,
                      cfg: EngineConfig, grid: GridMap, rng: np.random.Generator,
                      value_scale: float = 1.0) -> list[tuple[int, int]]:
    """Independent draws from the value softmax for each qualifying driver,
    consuming the stream in driver-id order."""
    out = []
    for driver_id, state in sorted(drivers, key=lambda d: d[0]):
        cands = candidate_set(state, grid, cfg.reposition_radius_cells)
        p = reposition_distribution(cands, V, cfg, value_scale)
        k = rng.choice(len(p), p=p)
        out.append((driver_id, int(cands.cells[k])))
    return out


def greedy_reposition(drivers: list[tuple[int, SpatioTemporalState]], V: OnlineValue,
                      cfg: EngineConfig, grid: GridMap,
                      rng: np.random.Generator) -> list[tuple[int, int]]:
    """Argmax over discounted candidate values, ties broken uniformly at
    random from the seeded stream."""
    out = []
    for driver_id, state in sorted(drivers, key=lambda d: d[0]):
        cands = candidate_set(state, grid, cfg.reposition_radius_cells)
        vals = discounted_candidate_values(cands, V, cfg)
        best = np.nonzero(vals == vals.max())[0]
        k = best[0] if len(best) == 1 else rng.choice(best)
        out.append((driver_id, int(cands.cells[k])))
    return out


class ExpertMatrix:
    """Hour-of-day transition probabilities over origin -> destination cells."""

    def __init__(self, rows: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]):
        # rows: (hour, origin) -> (destination cells, probabilities)
        for key, (cells, probs) in rows.items():
            if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-9:
                raise DataError(f"expert row {key}: probabilities must be non-negative and sum to 1")
        self.rows = rows

    def row(self, hour: int, origin: int):
        return self.rows.get((hour, origin))


def expert_reposition(drivers: list[tuple[int, SpatioTemporalState]], matrix: ExpertMatrix,
                      hour_of: float, grid: GridMap,
                      rng: np.random.Generator) -> list[tuple[int, int]]:
    """Categorical draws from each driver's (hour, origin) row. Missing rows
    fall back to a uniform draw over the radius-1 neighborhood, logged."""
    hour = int(hour_of // 3600) % 24
    out = []
    for driver_id, state in sorted(drivers, key=lambda d: d[0]):
        row = matrix.row(hour, state.cell)
        if row is None:
            logger.warning("expert matrix missing row hour=%d origin=%d; uniform fallback",
                           hour, state.cell)
            cells = np.array(grid.neighborhood(state.cell, 1), dtype=np.int64)
            out.append((driver_id, int(rng.choice(cells))))
            continue
        cells, probs = row
        out.append((driver_id, int(cells[rng.choice(len(cells), p=probs)])))
    return out


def walk_reposition(drivers: list[tuple[int, SpatioTemporalState]], grid: GridMap,
                    rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniform move to a radius-1 neighbor (never stays); the bootstrap
    behavior used to build historical logs and the expert matrix."""
    out = []
    for driver_id, state in sorted(drivers, key=lambda d: d[0]):
        cells = [c for c in grid.neighborhood(state.cell, 1) if c != state.cell]
        out.append((driver_id, int(rng.choice(np.array(cells, dtype=np.int64)))))
    return out


def estimate_expert_matrix(moves: list[tuple[float, int, int]], grid: GridMap,
                           radius: int = 2, smoothing: float = 1.0) -> ExpertMatrix:
    """Estimate hour-of-day transition rows from observed idle movements
    (abs_time_s, origin, destination), with additive smoothing over the
    radius neighborhood of each observed origin."""
    counts: dict[tuple[int, int], dict[int, float]] = {}
    for abs_time, origin, dest in moves:
        key = (int(abs_time // 3600) % 24, origin)
        bucket = counts.setdefault(key, {})
        bucket[dest] = bucket.get(dest, 0.0) + 1.0
    rows = {}
    for key, dests in counts.items():
        hood = grid.neighborhood(key[1], radius)
        merged = {c: smoothing for c in hood}
        for c, n in dests.items():
            merged[c] = merged.get(c, 0.0) + n
        cells = np.array(sorted(merged), dtype=np.int64)
        probs = np.array([merged[c] for c in cells], dtype=np.float64)
        probs = probs / probs.sum()
        rows[key] = (cells, probs)
    return ExpertMatrix(rows)


def save_expert_matrix(matrix: ExpertMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "origin_cell", "destination_cell", "probability"])
        for (hour, origin) in sorted(matrix.rows):
            cells, probs = matrix.rows[(hour, origin)]
            for c, p in zip(cells, probs):
                writer.writerow([hour, origin, int(c), repr(float(p))])


def load_expert_matrix(path) -> ExpertMatrix:
    raw: dict[tuple[int, int], list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["hour"]), int(row["origin_cell"]))
            raw.setdefault(key, []).append((int(row["destination_cell"]), float(row["probability"])))
    rows = {}
    for key, entries in raw.items():
        cells = np.array([c for c, _ in entries], dtype=np.int64)
        probs = np.array([p for _, p in entries], dtype=np.float64)
        rows[key] = (cells, probs)
    return ExpertMatrix(rows)
