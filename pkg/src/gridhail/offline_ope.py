"""Regularized offline policy evaluation on historical driver trajectories.

Trains the time-indexed value network by bootstrapped squared error over
(state, reward, next state, duration) transitions, with the uniformly-spread
in-trip reward closed form and the infinity-norm Lipschitz regularizer.
Temporal slices of the trained network seed the online ensemble.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import DataError, EngineConfig, TrainingDivergence, substream
from .valuefn import Adam, NetworkSpec, TargetShadow, ValueNetwork, lipschitz_penalty, lipschitz_penalty_grad

TRAJECTORY_FIELDS = (
    "episode_id", "driver_id", "from_cell", "abs_time_s", "kind", "reward", "to_cell", "duration_s",
)


@dataclass
class TrajectoryRecord:
    episode_id: str
    driver_id: int
    from_cell: int
    abs_time_s: float
    kind: str  # "trip" | "idle"
    reward: float
    to_cell: int
    duration_s: float


@dataclass
class TrajectoryDataset:
    """Training transitions: V(s) targets bootstrap from s' at k discount
    units ahead. States carry absolute time-of-day."""

    from_cell: np.ndarray
    from_abs: np.ndarray
    to_cell: np.ndarray
    to_abs: np.ndarray
    reward: np.ndarray
    k_units: np.ndarray
    source_episodes: tuple[str, ...] = ()
    rejected: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.from_cell)


def load_trajectories(path: str | Path) -> list[TrajectoryRecord]:
    """Read a line-delimited option log (CSV with header). Malformed lines
    raise with their line number."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_FIELDS:
            raise DataError(f"{path}: expected header {','.join(TRAJECTORY_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(TrajectoryRecord(
                    episode_id=row[0],
                    driver_id=int(row[1]),
                    from_cell=int(row[2]),
                    abs_time_s=float(row[3]),
                    kind=row[4],
                    reward=float(row[5]),
                    to_cell=int(row[6]),
                    duration_s=float(row[7]),
                ))
                if records[-1].kind not in ("trip", "idle"):
                    raise ValueError(f"unknown option kind {row[4]!r}")
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed trajectory line: {exc}") from exc
    return records


def save_trajectories(records: list[TrajectoryRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_FIELDS)
        for r in records:
            writer.writerow([r.episode_id, r.driver_id, r.from_cell, f"{r.abs_time_s:g}",
                             r.kind, repr(float(r.reward)), r.to_cell, f"{r.duration_s:g}"])


def duration_to_units(duration_s, cfg: EngineConfig) -> np.ndarray:
    """Trip duration in whole discount units, rounded up, at least one."""
    k = np.ceil(np.asarray(duration_s, dtype=np.float64) / cfg.discount_time_unit_s)
    return np.maximum(k, 1.0)


def extract_transitions(records: list[TrajectoryRecord], cfg: EngineConfig) -> TrajectoryDataset:
    """Turn option logs into training transitions, one per option.

    Records are grouped by (episode, driver); a group whose timestamps go
    backwards is rejected whole, with a diagnostic, without failing the rest.
    """
    groups: dict[tuple[str, int], list[TrajectoryRecord]] = {}
    for r in records:
        groups.setdefault((r.episode_id, r.driver_id), []).append(r)

    rejected = []
    keep: list[TrajectoryRecord] = []
    for key, group in groups.items():
        times = [g.abs_time_s for g in group]
        if any(b < a for a, b in zip(times, times[1:])):
            rejected.append(f"episode {key[0]} driver {key[1]}: non-monotone timestamps")
            continue
        keep.extend(group)

    bad = [r for r in keep if r.kind == "idle" and r.reward != 0.0]
    if bad:
        raise DataError("idle options must carry zero reward")

    from_cell = np.array([r.from_cell for r in keep], dtype=np.int64)
    from_abs = np.array([r.abs_time_s for r in keep], dtype=np.float64)
    to_cell = np.array([r.to_cell for r in keep], dtype=np.int64)
    duration = np.array([r.duration_s for r in keep], dtype=np.float64)
    if np.any(duration <= 0):
        raise DataError("option durations must be positive")
    return TrajectoryDataset(
        from_cell=from_cell,
        from_abs=from_abs,
        to_cell=to_cell,
        to_abs=from_abs + duration,
        reward=np.array([r.reward for r in keep], dtype=np.float64),
        k_units=duration_to_units(duration, cfg),
        source_episodes=tuple(sorted({r.episode_id for r in keep})),
        rejected=rejected,
    )


def smdp_reward(R, k, gamma: float):
    """Discounted value of a reward spread uniformly over k whole units:
    sum_{j<k} gamma^j * (R/k), in closed form. gamma == 1 collapses to R."""
    R = np.asarray(R, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 1):
        raise ValueError("k must be at least 1")
    if gamma == 1.0:
        out = R + 0.0
    else:
        out = R * (gamma ** k - 1.0) / (k * (gamma - 1.0))
    return float(out) if out.ndim == 0 else out


@dataclass
class OpeTrainer:
    net: ValueNetwork
    lr: float = 3e-4
    lipschitz_lambda: float = 1e-4
    batch_size: int = 256
    max_iters: int = 50_000
    sync_period: int = 100
    gamma: float = 0.9
    target: TargetShadow = None
    optimizer: Adam = None

    def __post_init__(self):
        if not self.net.spec.uses_time_input:
            raise ValueError("offline evaluation requires a time-indexed network")
        if self.target is None:
            self.target = TargetShadow(self.net, sync_period=self.sync_period)
        if self.optimizer is None:
            self.optimizer = Adam(self.net.params.size, self.lr)


def ope_step(trainer: OpeTrainer, batch: TrajectoryDataset, indices=None) -> float:
    """One regularized bootstrap step on a mini-batch; returns the pre-step
    loss (summed squared Bellman error plus the Lipschitz term)."""
    if indices is None:
        indices = np.arange(len(batch))
    if len(indices) == 0:
        raise ValueError("empty mini-batch")
    net = trainer.net
    gamma = trainer.gamma
    k = batch.k_units[indices]
    spread = smdp_reward(batch.reward[indices], k, gamma)
    boot = trainer.target.forward(batch.to_cell[indices], batch.to_abs[indices])
    target = spread + gamma ** k * boot
    pred, cache = net.forward_cached(batch.from_cell[indices], batch.from_abs[indices])
    resid = pred - target
    loss = float(resid @ resid)
    if trainer.lipschitz_lambda > 0:
        loss += trainer.lipschitz_lambda * lipschitz_penalty(net)
    if not math.isfinite(loss):
        raise TrainingDivergence(f"offline training diverged: loss={loss}")
    grad = net.backward(cache, 2.0 * resid)
    if trainer.lipschitz_lambda > 0:
        grad += trainer.lipschitz_lambda * lipschitz_penalty_grad(net)
    trainer.optimizer.step(net.params, grad)
    return loss


def train_ope(dataset: TrajectoryDataset, trainer: OpeTrainer, seed: int = 0) -> list[float]:
    """Run the full mini-batch loop; returns the per-iteration loss curve.
    The target shadow refreshes every sync_period steps."""
    if len(dataset) == 0:
        raise DataError("offline training needs a nonempty dataset")
    rng = substream(seed, "ope-batch")
    curve = []
    for it in range(trainer.max_iters):
        if it % trainer.sync_period == 0:
            trainer.target.sync(trainer.net)
        idx = rng.integers(0, len(dataset), size=min(trainer.batch_size, len(dataset)))
        curve.append(ope_step(trainer, dataset, idx))
    return curve


def slice_values(net: ValueNetwork, t_abs: float) -> np.ndarray:
    """Per-cell values with the time input pinned at t_abs (seconds of day)."""
    if not net.spec.uses_time_input:
        raise ValueError("slicing requires a time-indexed network")
    cells = np.arange(net.spec.n_cells, dtype=np.int64)
    return net.forward(cells, np.full(len(cells), float(t_abs)))


def write_loss_curve(curve: list[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(curve):
            writer.writerow([i, repr(float(loss))])


def default_ope_spec(grid_width: int, grid_height: int, cfg: EngineConfig | None = None,
                     **overrides) -> NetworkSpec:
    kwargs = dict(grid_width=grid_width, grid_height=grid_height, uses_time_input=True)
    kwargs.update(overrides)
    return NetworkSpec(**kwargs)
