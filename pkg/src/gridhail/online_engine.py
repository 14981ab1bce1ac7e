"""The live value function: per-dispatch-round population TD updates and the
changepoint-scheduled ensemble with offline temporal slices.

A dispatch round yields one batch of driver transitions (matched drivers took
trips, the rest idled one round); the squared TD errors over that whole batch
form the round's loss and one gradient step is applied. Next-state values are
frozen for the round (tabular: targets computed before any write; network:
target shadow synced at round start).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .domain import EngineConfig, TrainingDivergence, substream
from .offline_ope import slice_values
from .valuefn import TabularValue, TargetShadow, ValueNetwork, distill, ensemble_tabular


@dataclass
class DispatchRoundOutcome:
    """The round's driver transitions, split into trip assignments and idlers.

    Array fields are aligned per driver within each group. Idle drivers keep
    their cell for the round; their transition lasts one dispatch round.
    """

    matched_cell: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    matched_clock: np.ndarray = field(default_factory=lambda: np.empty(0))
    matched_reward: np.ndarray = field(default_factory=lambda: np.empty(0))
    matched_dest: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    matched_duration: np.ndarray = field(default_factory=lambda: np.empty(0))
    idle_cell: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    idle_clock: np.ndarray = field(default_factory=lambda: np.empty(0))
    idle_dest: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    idle_duration: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n_drivers(self) -> int:
        return len(self.matched_cell) + len(self.idle_cell)

    def validate(self) -> None:
        if np.any(self.matched_duration <= 0) or np.any(self.idle_duration <= 0):
            raise ValueError("transition durations must be positive")

    @classmethod
    def from_lists(cls, matched, idle) -> "DispatchRoundOutcome":
        """matched: (cell, clock, reward, dest, duration) tuples; idle:
        (cell, clock, duration) staying put or (cell, clock, dest, duration)."""
        out = cls()
        if matched:
            m = list(zip(*matched))
            out.matched_cell = np.array(m[0], dtype=np.int64)
            out.matched_clock = np.array(m[1], dtype=np.float64)
            out.matched_reward = np.array(m[2], dtype=np.float64)
            out.matched_dest = np.array(m[3], dtype=np.int64)
            out.matched_duration = np.array(m[4], dtype=np.float64)
        if idle:
            rows = [r if len(r) == 4 else (r[0], r[1], r[0], r[2]) for r in idle]
            i = list(zip(*rows))
            out.idle_cell = np.array(i[0], dtype=np.int64)
            out.idle_clock = np.array(i[1], dtype=np.float64)
            out.idle_dest = np.array(i[2], dtype=np.int64)
            out.idle_duration = np.array(i[3], dtype=np.float64)
        return out


class OnlineValue:
    """Live value estimate, tabular or network-backed, updated once per round."""

    def __init__(self, repr_: TabularValue | ValueNetwork, alpha: float = 0.025):
        self.repr = repr_
        self.alpha = alpha
        self.target = TargetShadow(repr_, sync_period=1) if isinstance(repr_, ValueNetwork) else None

    @property
    def tabular(self) -> bool:
        return isinstance(self.repr, TabularValue)

    def lookup(self, cells, clock_s) -> np.ndarray:
        if self.tabular:
            return self.repr.lookup(cells, clock_s)
        cells = np.asarray(cells, dtype=np.int64)
        clocks = np.broadcast_to(np.asarray(clock_s, dtype=np.float64), cells.shape)
        return self.repr.forward(cells, clocks)


def td_errors(outcome: DispatchRoundOutcome, V: OnlineValue, cfg: EngineConfig) -> np.ndarray:
    """Per-driver TD errors, matched drivers first then idle, in input order.

    matched: r + gamma^dt * V(dest at arrival) - V(here now)
    idle:    gamma^dt * V(here after the round) - V(here now)
    """
    g = cfg.gamma
    unit = cfg.discount_time_unit_s
    vm_here = V.lookup(outcome.matched_cell, outcome.matched_clock)
    vm_dest = V.lookup(outcome.matched_dest, outcome.matched_clock + outcome.matched_duration)
    d_m = outcome.matched_reward + g ** (outcome.matched_duration / unit) * vm_dest - vm_here
    vi_here = V.lookup(outcome.idle_cell, outcome.idle_clock)
    vi_next = V.lookup(outcome.idle_dest, outcome.idle_clock + outcome.idle_duration)
    d_i = g ** (outcome.idle_duration / unit) * vi_next - vi_here
    return np.concatenate([d_m, d_i])


def online_update(outcome: DispatchRoundOutcome, V: OnlineValue, cfg: EngineConfig) -> float:
    """One gradient step on the round's summed squared TD error; returns the
    pre-step loss. Next-state values are frozen for the whole round."""
    if outcome.n_drivers == 0:
        return 0.0
    deltas = td_errors(outcome, V, cfg)
    loss = float(deltas @ deltas)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"online update diverged: loss={loss}")
    cells = np.concatenate([outcome.matched_cell, outcome.idle_cell])
    clocks = np.concatenate([outcome.matched_clock, outcome.idle_clock])
    if V.tabular:
        tab = V.repr
        sl = tab.slice_of(clocks)
        ok = (sl >= 0) & (sl < tab.n_slices)
        flat = cells[ok] * tab.n_slices + sl[ok]
        # dL/dV(key) = sum over drivers at the key of -2*delta
        np.add.at(tab.table.reshape(-1), flat, 2.0 * V.alpha * deltas[ok])
    else:
        net = V.repr
        pred, cache = net.forward_cached(cells, clocks)
        grad = net.backward(cache, -2.0 * deltas)
        net.params -= V.alpha * grad
        V.target.sync(net)
    return loss


@dataclass(frozen=True)
class ChangepointSchedule:
    """Episode seconds at which the online value re-ensembles with the
    offline slice."""

    points: tuple[float, ...]
    K: int

    def __post_init__(self):
        if list(self.points) != sorted(set(self.points)):
            raise ValueError("changepoints must be strictly increasing")

    def __contains__(self, t: float) -> bool:
        return float(t) in set(self.points)


def segment_costs(series: np.ndarray):
    """Prefix sums giving cost(i, j) = squared deviation of series[i:j] from
    its mean, O(1) per query."""
    x = np.asarray(series, dtype=np.float64)
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def cost(i: int, j: int) -> float:
        d1 = s1[j] - s1[i]
        return (s2[j] - s2[i]) - d1 * d1 / (j - i)

    return cost


def segment_series(series, K: int) -> tuple[list[int], float]:
    """Exact L2 dynamic-programming segmentation into K+1 pieces.

    Returns the K internal breakpoint indices (segment start positions) and
    the total within-segment squared deviation. Ties take the lowest index.
    """
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if K < 0:
        raise ValueError("K must be non-negative")
    if K >= n:
        raise ValueError(f"need at least K+1={K + 1} bins, got {n}")
    cost = segment_costs(x)
    if K == 0:
        return [], cost(0, n)
    INF = float("inf")
    # best[k][j]: minimal cost of splitting x[:j] into k+1 nonempty segments
    best = np.full((K + 1, n + 1), INF)
    arg = np.zeros((K + 1, n + 1), dtype=np.int64)
    for j in range(1, n + 1):
        best[0][j] = cost(0, j)
    for k in range(1, K + 1):
        for j in range(k + 1, n + 1):
            b, a = INF, 0
            for i in range(k, j):
                c = best[k - 1][i] + cost(i, j)
                if c < b:
                    b, a = c, i
            best[k][j] = b
            arg[k][j] = a
    points = []
    j = n
    for k in range(K, 0, -1):
        j = int(arg[k][j])
        points.append(j)
    points.reverse()
    return points, float(best[K][n])


def segment_orders(series, K: int, bin_s: float = 1800.0,
                   include_start: bool = False) -> ChangepointSchedule:
    """Changepoint schedule from a per-bin order-count series. Breakpoint bin
    b maps to episode second b * bin_s. include_start adds an ensemble at
    t = 0 so a fresh online value is grounded before the first round."""
    points, _ = segment_series(series, K)
    seconds = [p * bin_s for p in points]
    if include_start and 0.0 not in seconds:
        seconds = [0.0] + seconds
    return ChangepointSchedule(points=tuple(seconds), K=K)


def maybe_ensemble(t: float, V: OnlineValue, ope_net: ValueNetwork,
                   schedule: ChangepointSchedule, cfg: EngineConfig,
                   episode_start_s: float = 14400.0,
                   states_seen: list | None = None,
                   historical_states: list | None = None,
                   seed: int = 0,
                   distill_steps: int = 200,
                   distill_lr: float = 1e-3) -> OnlineValue:
    """Re-ensemble the online value with the offline slice when t is a
    changepoint; otherwise return V untouched.

    Tabular: every (cell, slice) key blends toward the slice at t.
    Network: distill toward omega*V + (1-omega)*slice on the union of
    episode-seen states and a seeded subsample of historical states.
    """
    if t not in schedule:
        return V
    offline = slice_values(ope_net, episode_start_s + t)
    if V.tabular:
        V.repr.table[:] = ensemble_tabular(V.repr, offline, cfg.omega).table
        return V
    states = list(states_seen or [])
    pool = list(historical_states or [])
    if pool:
        rng = substream(seed, "distill-subsample")
        take = min(5000, len(pool))
        states.extend(pool[i] for i in rng.choice(len(pool), size=take, replace=False))
    if not states:
        return V
    net = V.repr
    cells = np.array([s.cell for s in states], dtype=np.int64)
    clocks = np.array([s.clock for s in states], dtype=np.float64)
    v_on = net.forward(cells, clocks)
    blended = cfg.omega * v_on + (1.0 - cfg.omega) * offline[cells]
    distill(net, list(zip(states, blended.tolist())), steps=distill_steps, lr=distill_lr)
    V.target.sync(net)
    return V


def write_schedule(series, schedule: ChangepointSchedule, bin_s: float, path) -> None:
    """CSV export: bin_start_s, order_count, is_changepoint."""
    marks = set(schedule.points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start_s", "order_count", "is_changepoint"])
        for b, count in enumerate(series):
            start = b * bin_s
            writer.writerow([f"{start:g}", int(count), int(start in marks)])


def read_schedule(path, K: int | None = None) -> ChangepointSchedule:
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["is_changepoint"]):
                points.append(float(row["bin_start_s"]))
    return ChangepointSchedule(points=tuple(points), K=K if K is not None else len(points))
