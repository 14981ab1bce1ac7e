"""Deterministic discrete-event grid-city simulation.

Each dispatch round (2 s cadence): maybe re-ensemble the online value,
match open orders to idle drivers, every C rounds reposition qualifying
idle drivers, build the round's transition outcome and take one online TD
step. Orders arrive from a replay file or a seeded synthetic process;
matched orders may cancel as a function of pickup distance. Every random
draw flows from named substreams of the run seed, so runs are bitwise
reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dispatch import baseline_match, build_problem, greedy_match, solve_matching
from .domain import (ConfigError, DataError, EngineConfig, GridMap, SpatioTemporalState,
                     travel_time, travel_time_array, substream)
from .offline_ope import TrajectoryRecord, slice_values
from .online_engine import (ChangepointSchedule, DispatchRoundOutcome, OnlineValue,
                            maybe_ensemble, online_update)
from .reposition import (ExpertMatrix, expert_reposition, greedy_reposition,
                         sample_reposition, walk_reposition)
from .valuefn import TabularValue, ValueNetwork

DISPATCH_POLICIES = ("v1d3", "baseline", "greedy")
REPOSITION_POLICIES = ("v1d3", "v1d3g", "expert", "none", "walk")

ST_OFFLINE, ST_IDLE, ST_TRIP, ST_REPO = 0, 1, 2, 3


@dataclass
class Hotspot:
    """A demand source: orders appear around center and head for the
    destination disk (or anywhere, when dest_center is None)."""

    center: tuple[int, int]
    radius: int
    rate_per_hour: float  # total arrivals across the hotspot's cells
    start_s: float
    end_s: float
    dest_center: tuple[int, int] | None = None
    dest_radius: int = 2


@dataclass
class OrderProcess:
    kind: str = "synthetic"  # synthetic | replay
    bin_s: float = 1800.0
    base_rate_per_cell_per_hour: float = 0.2
    fee_base: float = 2.0
    fee_per_s: float = 0.004
    hotspots: list[Hotspot] = field(default_factory=list)
    orders_path: str | None = None


@dataclass
class PerturbationSpec:
    kind: str  # add_drivers | add_orders
    cell: int
    start_round: int
    n_drivers: int = 50
    orders_per_pulse: int = 10
    pulse_period_s: float = 8.0
    total_orders: int = 300


@dataclass
class ScenarioConfig:
    grid: GridMap
    fleet_size: int
    managed_n: int = 0
    episode_start_s: float = 14400.0
    episode_horizon_s: float = 36000.0
    order_patience_rounds: int = 10
    order_process: OrderProcess = field(default_factory=OrderProcess)
    cancellation_curve: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])
    perturbation: PerturbationSpec | None = None
    roster_path: str | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.managed_n > self.fleet_size:
            raise ConfigError("managed_n cannot exceed fleet_size")
        probs = [p for _, p in self.cancellation_curve]
        if any(not 0 <= p <= 1 for p in probs) or any(b < a for a, b in zip(probs, probs[1:])):
            raise ConfigError("cancellation curve must be non-decreasing with probabilities in [0,1]")


@dataclass
class PolicyBundle:
    dispatch: str = "v1d3"
    reposition: str = "none"
    learner: bool = True
    ensemble: bool = True
    online_repr: str = "tabular"  # tabular | network | ope_table (frozen offline)
    include_pickup_in_dt: bool = True
    ensemble_at_start: bool = True
    strict_paper: bool = False
    value_scale: float = 1.0

    def __post_init__(self):
        if self.dispatch not in DISPATCH_POLICIES:
            raise ConfigError(f"unknown dispatch policy {self.dispatch!r}")
        if self.reposition not in REPOSITION_POLICIES:
            raise ConfigError(f"unknown reposition policy {self.reposition!r}")


@dataclass
class SimulationMetrics:
    dispatch_score: float
    answer_rate: float
    completion_rate: float
    reposition_score: float
    created: int
    matched: int
    completed: int
    cancelled: int
    expired: int
    open_at_end: int
    per_cell_value_trace: np.ndarray | None = None
    trace_times: np.ndarray | None = None


@dataclass
class OrderSet:
    origin: np.ndarray
    dest: np.ndarray
    created: np.ndarray
    fee: np.ndarray
    duration: np.ndarray

    def __len__(self) -> int:
        return len(self.origin)


@dataclass
class Roster:
    cell: np.ndarray
    online_s: np.ndarray
    offline_s: np.ndarray

    def __len__(self) -> int:
        return len(self.cell)


@dataclass
class EpisodeResult:
    metrics: SimulationMetrics
    trajectories: list[TrajectoryRecord] = field(default_factory=list)
    ring_trace: np.ndarray | None = None       # (n_rounds, n_radii) ring-mean values
    assignment_rows: list[tuple] = field(default_factory=list)
    reposition_rows: list[tuple] = field(default_factory=list)
    online_loss: float = 0.0


# ---------------------------------------------------------------------------
# scenario serialization

def scenario_to_dict(sc: ScenarioConfig) -> dict:
    d = {
        "name": sc.name,
        "grid": {"width": sc.grid.width, "height": sc.grid.height,
                 "cell_edge_m": sc.grid.cell_edge_m, "speed_mps": sc.grid.speed_mps},
        "fleet_size": sc.fleet_size,
        "managed_n": sc.managed_n,
        "episode_start_s": sc.episode_start_s,
        "episode_horizon_s": sc.episode_horizon_s,
        "order_patience_rounds": sc.order_patience_rounds,
        "cancellation_curve": [list(k) for k in sc.cancellation_curve],
        "order_process": {
            "kind": sc.order_process.kind,
            "bin_s": sc.order_process.bin_s,
            "base_rate_per_cell_per_hour": sc.order_process.base_rate_per_cell_per_hour,
            "fee_base": sc.order_process.fee_base,
            "fee_per_s": sc.order_process.fee_per_s,
            "orders_path": sc.order_process.orders_path,
            "hotspots": [
                {"center": list(h.center), "radius": h.radius, "rate_per_hour": h.rate_per_hour,
                 "start_s": h.start_s, "end_s": h.end_s,
                 "dest_center": list(h.dest_center) if h.dest_center else None,
                 "dest_radius": h.dest_radius}
                for h in sc.order_process.hotspots
            ],
        },
        "roster_path": sc.roster_path,
        "perturbation": None,
    }
    if sc.perturbation is not None:
        p = sc.perturbation
        d["perturbation"] = {"kind": p.kind, "cell": p.cell, "start_round": p.start_round,
                             "n_drivers": p.n_drivers, "orders_per_pulse": p.orders_per_pulse,
                             "pulse_period_s": p.pulse_period_s, "total_orders": p.total_orders}
    return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    op = d.get("order_process", {})
    hotspots = [Hotspot(center=tuple(h["center"]), radius=h["radius"],
                        rate_per_hour=h["rate_per_hour"], start_s=h["start_s"], end_s=h["end_s"],
                        dest_center=tuple(h["dest_center"]) if h.get("dest_center") else None,
                        dest_radius=h.get("dest_radius", 2))
                for h in op.get("hotspots", [])]
    pert = None
    if d.get("perturbation"):
        pert = PerturbationSpec(**d["perturbation"])
    return ScenarioConfig(
        grid=GridMap(**d["grid"]),
        fleet_size=d["fleet_size"],
        managed_n=d.get("managed_n", 0),
        episode_start_s=d.get("episode_start_s", 14400.0),
        episode_horizon_s=d.get("episode_horizon_s", 36000.0),
        order_patience_rounds=d.get("order_patience_rounds", 10),
        order_process=OrderProcess(
            kind=op.get("kind", "synthetic"),
            bin_s=op.get("bin_s", 1800.0),
            base_rate_per_cell_per_hour=op.get("base_rate_per_cell_per_hour", 0.2),
            fee_base=op.get("fee_base", 2.0),
            fee_per_s=op.get("fee_per_s", 0.004),
            hotspots=hotspots,
            orders_path=op.get("orders_path"),
        ),
        cancellation_curve=[tuple(k) for k in d.get("cancellation_curve", [[0.0, 0.0]])],
        perturbation=pert,
        roster_path=d.get("roster_path"),
        name=d.get("name", "scenario"),
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        return scenario_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: bad scenario file: {exc}") from exc


def save_scenario(sc: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic data

def _disk(grid: GridMap, center: tuple[int, int], radius: int) -> np.ndarray:
    return np.array(grid.neighborhood(grid.cell(*center), radius), dtype=np.int64)


def generate_synthetic(scenario: ScenarioConfig, seed: int) -> tuple[OrderSet, Roster]:
    """Poisson order arrivals per (cell, bin) plus the driver roster,
    deterministic per seed."""
    if scenario.order_process.kind != "synthetic":
        raise ConfigError("generate_synthetic needs a synthetic order process")
    grid = scenario.grid
    op = scenario.order_process
    rng = substream(seed, "orders")
    horizon = scenario.episode_horizon_s
    n_bins = int(math.ceil(horizon / op.bin_s))
    all_cells = np.arange(grid.n_cells, dtype=np.int64)

    origins, dests, createds = [], [], []

    def emit(cells: np.ndarray, lam: np.ndarray, t0: float, t1: float, dest_disk: np.ndarray | None):
        counts = rng.poisson(lam)
        total = int(counts.sum())
        if total == 0:
            return
        origin = np.repeat(cells, counts)
        created = t0 + rng.random(total) * (t1 - t0)
        if dest_disk is None:
            dest = all_cells[rng.integers(0, grid.n_cells, size=total)]
        else:
            dest = dest_disk[rng.integers(0, len(dest_disk), size=total)]
        same = dest == origin
        if np.any(same):
            pool = dest_disk if dest_disk is not None else all_cells
            bump = pool[(np.searchsorted(pool, dest[same]) + 1) % len(pool)]
            bump = np.where(bump == origin[same], pool[0], bump)
            dest[same] = bump
        still = dest == origin
        if np.any(still):  # single-cell destination disk equal to the origin
            dest[still] = (origin[still] + 1) % grid.n_cells
        origins.append(origin)
        dests.append(dest)
        createds.append(created)

    for b in range(n_bins):
        t0, t1 = b * op.bin_s, min((b + 1) * op.bin_s, horizon)
        if op.base_rate_per_cell_per_hour > 0:
            lam = np.full(grid.n_cells, op.base_rate_per_cell_per_hour * (t1 - t0) / 3600.0)
            emit(all_cells, lam, t0, t1, None)
        for h in op.hotspots:
            lo, hi = max(t0, h.start_s), min(t1, h.end_s)
            if hi <= lo:
                continue
            cells = _disk(grid, h.center, h.radius)
            lam = np.full(len(cells), h.rate_per_hour / len(cells) * (hi - lo) / 3600.0)
            dest_disk = _disk(grid, h.dest_center, h.dest_radius) if h.dest_center else None
            emit(cells, lam, lo, hi, dest_disk)

    if origins:
        origin = np.concatenate(origins)
        dest = np.concatenate(dests)
        created = np.concatenate(createds)
    else:
        origin = dest = np.empty(0, dtype=np.int64)
        created = np.empty(0)
    order = np.argsort(created, kind="stable")
    origin, dest, created = origin[order], dest[order], created[order]
    ox, oy = origin % grid.width, origin // grid.width
    dxy = np.maximum(np.abs(ox - dest % grid.width), np.abs(oy - dest // grid.width))
    duration = travel_time_array(dxy, grid).astype(np.float64)
    fee = op.fee_base + op.fee_per_s * duration
    orders = OrderSet(origin, dest, created, fee, duration)

    rr = substream(seed, "roster")
    cells = rr.integers(0, grid.n_cells, size=scenario.fleet_size)
    online = np.zeros(scenario.fleet_size)
    offline = np.full(scenario.fleet_size, horizon)
    part_time = rr.random(scenario.fleet_size) < 0.2
    online[part_time] = rr.random(part_time.sum()) * 0.25 * horizon
    offline[part_time] = (0.75 + 0.25 * rr.random(part_time.sum())) * horizon
    return orders, Roster(cells.astype(np.int64), online, offline)


ORDER_CSV_FIELDS = ("order_id", "origin_cell", "dest_cell", "created_at_s", "fee", "trip_duration_s")


def save_orders(orders: OrderSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ORDER_CSV_FIELDS)
        for i in range(len(orders)):
            w.writerow([i, int(orders.origin[i]), int(orders.dest[i]),
                        repr(float(orders.created[i])), repr(float(orders.fee[i])),
                        repr(float(orders.duration[i]))])


def load_orders(path) -> OrderSet:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ORDER_CSV_FIELDS:
            raise DataError(f"{path}: expected header {','.join(ORDER_CSV_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[1]), int(row[2]), float(row[3]), float(row[4]), float(row[5])))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed order line: {exc}") from exc
    if not rows:
        return OrderSet(*(np.empty(0, dtype=np.int64),) * 2, np.empty(0), np.empty(0), np.empty(0))
    cols = list(zip(*rows))
    return OrderSet(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                    np.array(cols[2]), np.array(cols[3]), np.array(cols[4]))


def save_roster(roster: Roster, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["driver_id", "cell", "online_s", "offline_s"])
        for i in range(len(roster)):
            w.writerow([i, int(roster.cell[i]), repr(float(roster.online_s[i])),
                        repr(float(roster.offline_s[i]))])


def load_roster(path) -> Roster:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["cell"]), float(row["online_s"]), float(row["offline_s"])))
    cols = list(zip(*rows))
    return Roster(np.array(cols[0], dtype=np.int64), np.array(cols[1]), np.array(cols[2]))


# ---------------------------------------------------------------------------
# episode engine

def step_cancellation(pickup_distance_cells: float, curve: list[tuple[float, float]],
                      draw: float) -> bool:
    """True when the matched order cancels: draw < curve(distance)."""
    xs = [k[0] for k in curve]
    ps = [k[1] for k in curve]
    return draw < float(np.interp(pickup_distance_cells, xs, ps))


def make_offline_table(ope_net: ValueNetwork, grid: GridMap, horizon_s: float,
                       episode_start_s: float, slice_s: float = 600.0) -> TabularValue:
    """Freeze the offline network into a (cell, slice) table over the episode."""
    n_slices = int(math.ceil(horizon_s / slice_s))
    tab = TabularValue(grid.n_cells, n_slices, slice_s)
    for k in range(n_slices):
        tab.table[:, k] = slice_values(ope_net, episode_start_s + k * slice_s)
    return tab


class _Engine:
    """Mutable episode state; struct-of-arrays over drivers and orders."""

    def __init__(self, scenario: ScenarioConfig, bundle: PolicyBundle, cfg: EngineConfig,
                 seed: int, orders: OrderSet, roster: Roster,
                 ope_net: ValueNetwork | None, schedule: ChangepointSchedule | None,
                 expert: ExpertMatrix | None, perturb: bool):
        self.sc = scenario
        self.bundle = bundle
        self.cfg = cfg
        self.seed = seed
        self.grid = scenario.grid
        self.ope_net = ope_net
        self.schedule = schedule
        self.expert = expert
        self.perturb = perturb and scenario.perturbation is not None

        if bundle.ensemble and ope_net is None:
            raise ConfigError("ensemble enabled but no offline snapshot provided")
        if bundle.reposition == "expert" and expert is None:
            raise ConfigError("expert reposition requires a transition matrix")

        n = len(roster)
        self.cell = roster.cell.copy()
        self.status = np.full(n, ST_OFFLINE, dtype=np.int8)
        self.busy_until = np.zeros(n)
        self.busy_dest = np.zeros(n, dtype=np.int64)
        self.pending_fee = np.zeros(n)
        self.pending_order = np.full(n, -1, dtype=np.int64)
        self.idle_since = np.zeros(n)
        self.online_s = roster.online_s.copy()
        self.offline_s = roster.offline_s.copy()
        self.income = np.zeros(n)
        self.managed = np.zeros(n, dtype=bool)
        self.managed[:scenario.managed_n] = True

        self.orders = orders
        m = len(orders)
        self.o_origin = orders.origin.copy()
        self.o_dest = orders.dest.copy()
        self.o_created = orders.created.copy()
        self.o_fee = orders.fee.copy()
        self.o_duration = orders.duration.copy()
        self.o_matched = np.zeros(m, dtype=bool)
        self.o_completed = np.zeros(m, dtype=bool)
        self.o_cancelled = np.zeros(m, dtype=bool)
        self.o_expired = np.zeros(m, dtype=bool)
        self.open_ids = np.empty(0, dtype=np.int64)
        self.next_arrival = 0

        self.round_s = cfg.dispatch_round_s
        self.horizon = scenario.episode_horizon_s
        self.n_rounds = int(self.horizon // self.round_s)

        self.rng_cancel = substream(seed, "cancellation")
        self.rng_repo = substream(seed, "reposition")
        self.rng_perturb = substream(seed, "perturb")

        repr_ = self._make_value_repr()
        self.V = OnlineValue(repr_, alpha=cfg.online_lr_alpha)
        points = list(schedule.points) if (bundle.ensemble and schedule) else []
        if bundle.ensemble and bundle.ensemble_at_start and not bundle.strict_paper \
                and 0.0 not in points:
            points = [0.0] + points
        self.ensemble_points = sorted(points)
        self.next_point = 0
        self.full_schedule = ChangepointSchedule(tuple(self.ensemble_points),
                                                 K=len(self.ensemble_points))

        self.radius = None if bundle.strict_paper else cfg.pickup_radius_cells
        self.include_pickup = bundle.include_pickup_in_dt and not bundle.strict_paper

        self.trajectories: list[TrajectoryRecord] = []
        self.collect_traj = False
        self.collect_dumps = False
        self.episode_id = f"{scenario.name}-{seed}"
        self.online_loss = 0.0
        self.assignment_rows: list[tuple] = []
        self.reposition_rows: list[tuple] = []

    def _make_value_repr(self):
        slice_s = self.cfg.discount_time_unit_s
        if self.bundle.online_repr == "ope_table":
            if self.ope_net is None:
                raise ConfigError("frozen offline table requires an offline snapshot")
            return make_offline_table(self.ope_net, self.grid, self.horizon,
                                      self.sc.episode_start_s, slice_s)
        n_slices = int(math.ceil(self.horizon / slice_s))
        if self.bundle.online_repr == "tabular":
            return TabularValue(self.grid.n_cells, n_slices, slice_s)
        if self.bundle.online_repr == "network":
            from .valuefn import NetworkSpec
            spec = NetworkSpec(grid_width=self.grid.width, grid_height=self.grid.height,
                               uses_time_input=False, slice_s=slice_s)
            return ValueNetwork.random_init(spec, substream(self.seed, "init"))
        raise ConfigError(f"unknown online representation {self.bundle.online_repr!r}")

    # -- trajectory logging ------------------------------------------------

    def _log(self, driver: int, from_cell: int, start_clock: float, kind: str,
             reward: float, to_cell: int, duration: float) -> None:
        if not self.collect_traj or duration <= 0:
            return
        self.trajectories.append(TrajectoryRecord(
            episode_id=self.episode_id, driver_id=driver, from_cell=int(from_cell),
            abs_time_s=self.sc.episode_start_s + start_clock, kind=kind, reward=float(reward),
            to_cell=int(to_cell), duration_s=float(duration)))

    def _end_idle_stretch(self, driver: int, clock: float) -> None:
        self._log(driver, self.cell[driver], self.idle_since[driver], "idle", 0.0,
                  self.cell[driver], clock - self.idle_since[driver])

    # -- per-round steps ---------------------------------------------------

    def _advance_fleet(self, clock: float) -> None:
        done = (self.status == ST_TRIP) & (self.busy_until <= clock)
        if np.any(done):
            ids = np.nonzero(done)[0]
            self.cell[ids] = self.busy_dest[ids]
            self.income[ids] += self.pending_fee[ids]
            self.o_completed[self.pending_order[ids]] = True
            self.pending_fee[ids] = 0.0
            self.pending_order[ids] = -1
            self.status[ids] = ST_IDLE
            self.idle_since[ids] = self.busy_until[ids]
        done = (self.status == ST_REPO) & (self.busy_until <= clock)
        if np.any(done):
            ids = np.nonzero(done)[0]
            self.cell[ids] = self.busy_dest[ids]
            self.status[ids] = ST_IDLE
            self.idle_since[ids] = self.busy_until[ids]
        fresh = (self.status == ST_OFFLINE) & (self.online_s <= clock) & (clock < self.offline_s) \
            & (self.busy_until <= clock)
        if np.any(fresh):
            ids = np.nonzero(fresh)[0]
            self.status[ids] = ST_IDLE
            self.idle_since[ids] = clock
            self.busy_until[ids] = clock + 1.0  # sentinel: no re-activation this shift
        tired = (self.status == ST_IDLE) & (clock >= self.offline_s)
        if np.any(tired):
            ids = np.nonzero(tired)[0]
            for d in ids:
                self._end_idle_stretch(int(d), clock)
            self.status[ids] = ST_OFFLINE
            self.busy_until[ids] = np.inf

    def _inject(self, round_idx: int, clock: float) -> None:
        spec = self.sc.perturbation
        if spec is None or not self.perturb:
            return
        if spec.kind == "add_drivers":
            if round_idx == spec.start_round and spec.n_drivers > 0:
                k = spec.n_drivers
                self.cell = np.concatenate([self.cell, np.full(k, spec.cell, dtype=np.int64)])
                self.status = np.concatenate([self.status, np.full(k, ST_IDLE, dtype=np.int8)])
                self.busy_until = np.concatenate([self.busy_until, np.full(k, clock + 1.0)])
                self.busy_dest = np.concatenate([self.busy_dest, np.zeros(k, dtype=np.int64)])
                self.pending_fee = np.concatenate([self.pending_fee, np.zeros(k)])
                self.pending_order = np.concatenate([self.pending_order, np.full(k, -1, dtype=np.int64)])
                self.idle_since = np.concatenate([self.idle_since, np.full(k, clock)])
                self.online_s = np.concatenate([self.online_s, np.full(k, clock)])
                self.offline_s = np.concatenate([self.offline_s, np.full(k, self.horizon)])
                self.income = np.concatenate([self.income, np.zeros(k)])
                self.managed = np.concatenate([self.managed, np.zeros(k, dtype=bool)])
            return
        # add_orders: pulses of orders at the injection cell
        period_rounds = max(1, int(round(spec.pulse_period_s / self.round_s)))
        n_pulses = int(math.ceil(spec.total_orders / spec.orders_per_pulse))
        last_round = spec.start_round + (n_pulses - 1) * period_rounds
        if round_idx < spec.start_round or round_idx > last_round:
            return
        if (round_idx - spec.start_round) % period_rounds != 0:
            return
        pulse_idx = (round_idx - spec.start_round) // period_rounds
        k = min(spec.orders_per_pulse, spec.total_orders - pulse_idx * spec.orders_per_pulse)
        if k <= 0:
            return
        dest = self.rng_perturb.integers(0, self.grid.n_cells, size=k)
        dest = np.where(dest == spec.cell, (dest + 1) % self.grid.n_cells, dest).astype(np.int64)
        origin = np.full(k, spec.cell, dtype=np.int64)
        dxy = np.maximum(np.abs(origin % self.grid.width - dest % self.grid.width),
                         np.abs(origin // self.grid.width - dest // self.grid.width))
        duration = travel_time_array(dxy, self.grid).astype(np.float64)
        fee = self.sc.order_process.fee_base + self.sc.order_process.fee_per_s * duration
        base = len(self.o_origin)
        self.o_origin = np.concatenate([self.o_origin, origin])
        self.o_dest = np.concatenate([self.o_dest, dest])
        self.o_created = np.concatenate([self.o_created, np.full(k, clock)])
        self.o_fee = np.concatenate([self.o_fee, fee])
        self.o_duration = np.concatenate([self.o_duration, duration])
        for arr_name in ("o_matched", "o_completed", "o_cancelled", "o_expired"):
            setattr(self, arr_name, np.concatenate([getattr(self, arr_name), np.zeros(k, dtype=bool)]))
        self.open_ids = np.concatenate([self.open_ids, np.arange(base, base + k, dtype=np.int64)])

    def _arrivals_and_expiry(self, clock: float) -> None:
        n = len(self.orders)
        if self.next_arrival < n:
            j = int(np.searchsorted(self.o_created[:n], clock, side="right"))
            if j > self.next_arrival:
                self.open_ids = np.concatenate(
                    [self.open_ids, np.arange(self.next_arrival, j, dtype=np.int64)])
                self.next_arrival = j
        if len(self.open_ids):
            alive = clock < self.o_created[self.open_ids] + self.sc.order_patience_rounds * self.round_s
            dead = self.open_ids[~alive]
            self.o_expired[dead] = True
            self.open_ids = self.open_ids[alive]

    def _maybe_ensemble(self, clock: float) -> None:
        while (self.next_point < len(self.ensemble_points)
               and self.ensemble_points[self.next_point] <= clock):
            t = self.ensemble_points[self.next_point]
            maybe_ensemble(t, self.V, self.ope_net, self.full_schedule, self.cfg,
                           episode_start_s=self.sc.episode_start_s, seed=self.seed)
            self.next_point += 1

    def _dispatch(self, round_idx: int, clock: float):
        idle_ids = np.nonzero(self.status == ST_IDLE)[0]
        if len(idle_ids) == 0 or len(self.open_ids) == 0:
            return idle_ids, [], []
        oid = self.open_ids
        use_value = self.bundle.dispatch == "v1d3"
        problem = build_problem(self.cell[idle_ids], clock, self.o_origin[oid],
                                self.o_dest[oid], self.o_fee[oid], self.o_duration[oid],
                                self.V if use_value else None, self.cfg, self.grid,
                                include_pickup=self.include_pickup, radius=self.radius)
        if self.bundle.dispatch == "v1d3":
            sol = solve_matching(problem)
        elif self.bundle.dispatch == "baseline":
            sol = baseline_match(problem)
        else:
            sol = greedy_match(problem)
        if not sol.pairs:
            return idle_ids, [], []
        draws = self.rng_cancel.random(len(sol.edges))
        kept, cancelled = [], []
        xs = [k[0] for k in self.sc.cancellation_curve]
        ps = [k[1] for k in self.sc.cancellation_curve]
        p_cancel = np.interp(problem.distance[sol.edges], xs, ps)
        for e, u, pc in zip(sol.edges, draws, p_cancel):
            di = int(problem.edge_driver[e])
            oj = int(problem.edge_order[e])
            if u < pc:
                cancelled.append((di, oj))
            else:
                kept.append((di, oj, float(problem.distance[e]), float(problem.utility[e])))
        matched_rows = []
        for di, oj, d, rho in kept:
            driver = int(idle_ids[di])
            order = int(oid[oj])
            pickup = travel_time(int(self.cell[driver]), int(self.o_origin[order]), self.grid)
            dt = pickup + self.o_duration[order]
            self._end_idle_stretch(driver, clock)
            self._log(driver, self.cell[driver], clock, "trip", self.o_fee[order],
                      self.o_dest[order], dt)
            self.status[driver] = ST_TRIP
            self.busy_until[driver] = clock + dt
            self.busy_dest[driver] = self.o_dest[order]
            self.pending_fee[driver] = self.o_fee[order]
            self.pending_order[driver] = order
            self.o_matched[order] = True
            matched_rows.append((driver, order, dt))
            if self.collect_dumps:
                self.assignment_rows.append((round_idx, driver, order, rho, d))
        for di, oj in cancelled:
            order = int(oid[oj])
            self.o_matched[order] = True
            self.o_cancelled[order] = True
        keep_mask = np.ones(len(oid), dtype=bool)
        keep_mask[[oj for _, oj in sol.pairs]] = False
        self.open_ids = oid[keep_mask]
        return idle_ids, matched_rows, [int(idle_ids[di]) for di, _ in cancelled]

    def _reposition(self, round_idx: int, clock: float) -> list[tuple[int, int, float]]:
        policy = self.bundle.reposition
        if policy == "none":
            return []
        thresh = self.cfg.reposition_threshold_C * self.round_s
        qual = (self.status == ST_IDLE) & (clock - self.idle_since >= thresh)
        if policy != "walk":
            qual &= self.managed
        ids = np.nonzero(qual)[0]
        if len(ids) == 0:
            return []
        drivers = [(int(d), SpatioTemporalState(int(self.cell[d]), clock)) for d in ids]
        if policy == "v1d3":
            chosen = sample_reposition(drivers, self.V, self.cfg, self.grid, self.rng_repo,
                                       value_scale=self.bundle.value_scale)
        elif policy == "v1d3g":
            chosen = greedy_reposition(drivers, self.V, self.cfg, self.grid, self.rng_repo)
        elif policy == "expert":
            chosen = expert_reposition(drivers, self.expert, self.sc.episode_start_s + clock,
                                       self.grid, self.rng_repo)
        else:
            chosen = walk_reposition(drivers, self.grid, self.rng_repo)
        moves = []
        for driver, dest in chosen:
            if dest == self.cell[driver]:
                continue
            tt = travel_time(int(self.cell[driver]), dest, self.grid)
            self._end_idle_stretch(driver, clock)
            self._log(driver, self.cell[driver], clock, "idle", 0.0, dest, tt)
            if self.collect_dumps:
                self.reposition_rows.append((round_idx, driver, int(self.cell[driver]), dest, policy))
            self.status[driver] = ST_REPO
            self.busy_until[driver] = clock + tt
            self.busy_dest[driver] = dest
            moves.append((driver, dest, float(tt)))
        return moves

    def _build_outcome(self, idle_ids: np.ndarray, matched_rows, clock: float,
                       repo_moves) -> DispatchRoundOutcome:
        out = DispatchRoundOutcome()
        if matched_rows:
            drivers = np.array([m[0] for m in matched_rows], dtype=np.int64)
            orders = np.array([m[1] for m in matched_rows], dtype=np.int64)
            out.matched_cell = self.cell[drivers].copy()
            out.matched_clock = np.full(len(drivers), clock)
            out.matched_reward = self.o_fee[orders]
            out.matched_dest = self.o_dest[orders]
            out.matched_duration = np.array([m[2] for m in matched_rows])
        matched_set = {m[0] for m in matched_rows}
        repo_of = {d: (dest, tt) for d, dest, tt in repo_moves}
        idle = [int(d) for d in idle_ids if int(d) not in matched_set]
        if idle:
            cells, dests, durs = [], [], []
            for d in idle:
                cells.append(int(self.cell[d]))  # reposition updates cell only on arrival
                if d in repo_of:
                    dest, tt = repo_of[d]
                    dests.append(dest)
                    durs.append(tt)
                else:
                    dests.append(int(self.cell[d]))
                    durs.append(self.round_s)
            out.idle_cell = np.array(cells, dtype=np.int64)
            out.idle_clock = np.full(len(idle), clock)
            out.idle_dest = np.array(dests, dtype=np.int64)
            out.idle_duration = np.array(durs)
        return out

    def finalize(self, collect_traj: bool) -> None:
        """Drain in-flight trips past the horizon and close idle stretches."""
        busy = self.status == ST_TRIP
        if np.any(busy):
            ids = np.nonzero(busy)[0]
            self.income[ids] += self.pending_fee[ids]
            self.o_completed[self.pending_order[ids]] = True
            self.pending_fee[ids] = 0.0
        if collect_traj:
            for d in np.nonzero(self.status == ST_IDLE)[0]:
                self._end_idle_stretch(int(d), self.horizon)

    def metrics(self) -> SimulationMetrics:
        created = len(self.o_origin)
        matched = int(self.o_matched.sum())
        completed = int(self.o_completed.sum())
        cancelled = int(self.o_cancelled.sum())
        expired = int(self.o_expired.sum())
        open_at_end = int((~self.o_matched & ~self.o_expired).sum())
        online_time = np.minimum(self.offline_s, self.horizon) - self.online_s
        man = self.managed & (online_time > 0)
        repo_score = float((self.income[man] / online_time[man]).mean()) if np.any(man) else 0.0
        return SimulationMetrics(
            dispatch_score=float(self.income.sum()),
            answer_rate=matched / created if created else 1.0,
            completion_rate=completed / created if created else 1.0,
            reposition_score=repo_score,
            created=created, matched=matched, completed=completed,
            cancelled=cancelled, expired=expired, open_at_end=open_at_end,
        )


def run_episode(scenario: ScenarioConfig, bundle: PolicyBundle, cfg: EngineConfig, seed: int, *,
                orders: OrderSet | None = None, roster: Roster | None = None,
                ope_net: ValueNetwork | None = None,
                schedule: ChangepointSchedule | None = None,
                expert: ExpertMatrix | None = None,
                collect_trajectories: bool = False,
                collect_dumps: bool = False,
                trace_rings_center: int | None = None,
                trace_cells: bool = False,
                trace_every_s: float = 120.0,
                perturb: bool = True) -> EpisodeResult:
    """Execute one full episode; bitwise-reproducible per seed."""
    if orders is None or roster is None:
        if scenario.order_process.kind == "replay":
            if orders is None:
                if not scenario.order_process.orders_path:
                    raise ConfigError("replay scenario needs order_process.orders_path")
                orders = load_orders(scenario.order_process.orders_path)
            if roster is None:
                if not scenario.roster_path:
                    raise ConfigError("replay scenario needs roster_path")
                roster = load_roster(scenario.roster_path)
        else:
            gen_orders, gen_roster = generate_synthetic(scenario, seed)
            orders = orders if orders is not None else gen_orders
            roster = roster if roster is not None else gen_roster

    eng = _Engine(scenario, bundle, cfg, seed, orders, roster, ope_net, schedule, expert, perturb)
    eng.collect_traj = collect_trajectories
    eng.collect_dumps = collect_dumps

    rings = None
    ring_cells = None
    if trace_rings_center is not None:
        grid = scenario.grid
        cx, cy = grid.xy(trace_rings_center)
        xs, ys = grid.cell_xy_arrays()
        dist = np.maximum(np.abs(xs - cx), np.abs(ys - cy))
        ring_cells = [np.nonzero(dist == r)[0] for r in range(3)]
        rings = np.zeros((eng.n_rounds, 3))
    cell_trace = [] if trace_cells else None
    trace_times = []
    trace_every = max(1, int(trace_every_s / eng.round_s))

    loss_total = 0.0
    for round_idx in range(eng.n_rounds):
        clock = round_idx * eng.round_s
        eng._advance_fleet(clock)
        eng._inject(round_idx, clock)
        eng._arrivals_and_expiry(clock)
        if bundle.ensemble:
            eng._maybe_ensemble(clock)
        idle_ids, matched_rows, _ = eng._dispatch(round_idx, clock)
        repo_moves = []
        if round_idx > 0 and round_idx % cfg.reposition_threshold_C == 0:
            repo_moves = eng._reposition(round_idx, clock)
        if bundle.learner:
            outcome = eng._build_outcome(idle_ids, matched_rows, clock, repo_moves)
            loss_total += online_update(outcome, eng.V, cfg)
        if rings is not None:
            for r in range(3):
                rings[round_idx, r] = float(eng.V.lookup(
                    ring_cells[r], np.full(len(ring_cells[r]), clock)).mean())
        if cell_trace is not None and round_idx % trace_every == 0:
            cells = np.arange(scenario.grid.n_cells, dtype=np.int64)
            cell_trace.append(eng.V.lookup(cells, np.full(len(cells), clock)))
            trace_times.append(clock)

    eng.finalize(collect_trajectories)
    metrics = eng.metrics()
    if cell_trace is not None:
        metrics.per_cell_value_trace = np.array(cell_trace)
        metrics.trace_times = np.array(trace_times)
    eng.trajectories.sort(key=lambda r: (r.driver_id, r.abs_time_s))
    return EpisodeResult(metrics=metrics, trajectories=eng.trajectories, ring_trace=rings,
                         assignment_rows=eng.assignment_rows, reposition_rows=eng.reposition_rows,
                         online_loss=loss_total)


@dataclass
class PerturbationResult:
    rounds: np.ndarray             # round indices
    delta_by_radius: np.ndarray    # (n_rounds, 3) perturbed minus control ring means
    control_rings: np.ndarray
    perturbed_rings: np.ndarray
    start_round: int


def run_perturbation_experiment(scenario: ScenarioConfig, bundle: PolicyBundle,
                                cfg: EngineConfig, seed: int, *,
                                ope_net=None, schedule=None, expert=None) -> PerturbationResult:
    """Paired perturbed/control runs under identical seeds; per-round value
    deltas for rings at radius 0, 1, 2 around the injection cell."""
    if scenario.perturbation is None:
        raise ConfigError("scenario carries no perturbation spec")
    if not bundle.learner:
        raise ConfigError("perturbation tracing requires the online learner")
    center = scenario.perturbation.cell
    control = run_episode(scenario, bundle, cfg, seed, ope_net=ope_net, schedule=schedule,
                          expert=expert, trace_rings_center=center, perturb=False)
    perturbed = run_episode(scenario, bundle, cfg, seed, ope_net=ope_net, schedule=schedule,
                            expert=expert, trace_rings_center=center, perturb=True)
    delta = perturbed.ring_trace - control.ring_trace
    return PerturbationResult(
        rounds=np.arange(delta.shape[0]),
        delta_by_radius=delta,
        control_rings=control.ring_trace,
        perturbed_rings=perturbed.ring_trace,
        start_round=scenario.perturbation.start_round,
    )


@dataclass
class AblationRow:
    dispatch_policy: str
    reposition_policy: str
    seeds: list[int]
    dispatch_scores: list[float]
    answer_rates: list[float]
    completion_rates: list[float]
    reposition_scores: list[float]

    def mean_std(self, values: list[float]) -> tuple[float, float]:
        a = np.asarray(values)
        return float(a.mean()), float(a.std())


ABLATION_DISPATCH = ("v1d3", "online_only", "offline_only", "baseline", "greedy")


def bundle_for(dispatch_policy: str, reposition_policy: str,
               base: PolicyBundle | None = None) -> PolicyBundle:
    """Translate an ablation label into a policy bundle."""
    base = base or PolicyBundle()
    if dispatch_policy == "v1d3":
        return replace(base, dispatch="v1d3", learner=True, ensemble=True,
                       online_repr="tabular", reposition=reposition_policy)
    if dispatch_policy == "online_only":
        return replace(base, dispatch="v1d3", learner=True, ensemble=False,
                       online_repr="tabular", reposition=reposition_policy)
    if dispatch_policy == "offline_only":
        return replace(base, dispatch="v1d3", learner=False, ensemble=False,
                       online_repr="ope_table", reposition=reposition_policy)
    if dispatch_policy in ("baseline", "greedy"):
        return replace(base, dispatch=dispatch_policy, learner=False, ensemble=False,
                       online_repr="tabular", reposition=reposition_policy)
    raise ConfigError(f"unknown ablation dispatch policy {dispatch_policy!r}")


def run_ablation_suite(scenario: ScenarioConfig, cfg: EngineConfig, seeds: list[int], *,
                       dispatch_policies=ABLATION_DISPATCH,
                       reposition_policies=("none",),
                       ope_net=None, schedule=None, expert=None,
                       base_bundle: PolicyBundle | None = None) -> list[AblationRow]:
    """Cross dispatch x reposition policies over the seed set; one row per
    configuration with per-seed metrics."""
    if len(seeds) < 1:
        raise ConfigError("ablation needs at least one seed")
    rows = []
    for dp in dispatch_policies:
        for rp in reposition_policies:
            row = AblationRow(dp, rp, list(seeds), [], [], [], [])
            for seed in seeds:
                bundle = bundle_for(dp, rp, base_bundle)
                need_ope = bundle.ensemble or bundle.online_repr == "ope_table"
                res = run_episode(scenario, bundle, cfg, seed,
                                  ope_net=ope_net if need_ope else None,
                                  schedule=schedule, expert=expert)
                m = res.metrics
                row.dispatch_scores.append(m.dispatch_score)
                row.answer_rates.append(m.answer_rate)
                row.completion_rates.append(m.completion_rate)
                row.reposition_scores.append(m.reposition_score)
            rows.append(row)
    return rows


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P[Binomial(n, 1/2) >= wins]."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def write_metrics_csv(rows: list[tuple[str, str, str, int, SimulationMetrics]], path) -> None:
    """One row per (scenario, dispatch policy, reposition policy, seed)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "dispatch_policy", "reposition_policy", "seed",
                    "dispatch_score", "answer_rate", "completion_rate", "reposition_score",
                    "created", "matched", "completed", "cancelled", "expired", "open_at_end"])
        for name, dp, rp, seed, m in rows:
            w.writerow([name, dp, rp, seed,
                        repr(m.dispatch_score), repr(m.answer_rate), repr(m.completion_rate),
                        repr(m.reposition_score), m.created, m.matched, m.completed,
                        m.cancelled, m.expired, m.open_at_end])
