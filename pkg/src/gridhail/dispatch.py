"""Per-round order-driver assignment.

Edge utility is the advantage of serving an order over staying put:
fee + gamma^dt * V(destination at arrival) - V(driver now), with dt covering
pickup travel plus the trip itself (pickup inclusion is switchable). The
value-based policy maximizes total utility by exact max-weight matching;
Baseline maximizes match count then minimizes pickup distance; Greedy takes
pairs in fee order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import max_weight_assign
from .domain import EngineConfig, GridMap, Order, SpatioTemporalState, travel_time, travel_time_array
from .online_engine import OnlineValue


@dataclass
class DispatchProblem:
    """Sparse eligible driver-order edges for one round."""

    n_drivers: int
    n_orders: int
    edge_driver: np.ndarray  # (E,) driver indices
    edge_order: np.ndarray   # (E,) order indices
    utility: np.ndarray      # (E,) advantage rho
    distance: np.ndarray     # (E,) pickup distance in cells
    fee: np.ndarray          # (E,) order fee

    @property
    def n_edges(self) -> int:
        return len(self.edge_driver)


@dataclass
class MatchingSolution:
    pairs: list[tuple[int, int]]
    total_utility: float
    total_distance: float = 0.0
    edges: np.ndarray = None  # indices into the problem's edge arrays

    def __post_init__(self):
        if self.edges is None:
            self.edges = np.empty(0, dtype=np.int64)


def utility(driver_state: SpatioTemporalState, order: Order, V: OnlineValue,
            cfg: EngineConfig, grid: GridMap, include_pickup: bool = True) -> float:
    """Advantage of assigning one order to one driver."""
    pickup = travel_time(driver_state.cell, order.origin, grid) if include_pickup else 0
    dt = pickup + order.trip_duration
    v_dest = float(V.lookup([order.destination], [driver_state.clock + dt])[0])
    v_here = float(V.lookup([driver_state.cell], [driver_state.clock])[0])
    return order.fee + cfg.gamma ** (dt / cfg.discount_time_unit_s) * v_dest - v_here


def build_problem(driver_cells: np.ndarray, clock: float, order_origin: np.ndarray,
                  order_dest: np.ndarray, order_fee: np.ndarray, order_duration: np.ndarray,
                  V: OnlineValue | None, cfg: EngineConfig, grid: GridMap,
                  include_pickup: bool = True, radius: int | None = None) -> DispatchProblem:
    """Vectorized edge construction for one round.

    Eligibility prunes pairs beyond the pickup radius (None = unlimited).
    V may be None, in which case utilities are the bare fees.
    """
    nd, no = len(driver_cells), len(order_origin)
    if nd == 0 or no == 0:
        empty = np.empty(0)
        return DispatchProblem(nd, no, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                               empty, empty.copy(), empty.copy())
    driver_cells = np.asarray(driver_cells, dtype=np.int64)
    order_origin = np.asarray(order_origin, dtype=np.int64)
    dx = (driver_cells % grid.width)[:, None] - (order_origin % grid.width)[None, :]
    dy = (driver_cells // grid.width)[:, None] - (order_origin // grid.width)[None, :]
    dist = np.maximum(np.abs(dx), np.abs(dy))
    if radius is None:
        di, oi = np.nonzero(np.ones_like(dist, dtype=bool))
    else:
        di, oi = np.nonzero(dist <= radius)
    d = dist[di, oi].astype(np.float64)
    fee = np.asarray(order_fee, dtype=np.float64)[oi]
    if V is None:
        rho = fee.copy()
    else:
        dt = np.asarray(order_duration, dtype=np.float64)[oi]
        if include_pickup:
            dt = dt + travel_time_array(d, grid)
        v_dest = V.lookup(np.asarray(order_dest, dtype=np.int64)[oi], clock + dt)
        v_here = V.lookup(driver_cells[di], np.full(len(di), float(clock)))
        rho = fee + cfg.gamma ** (dt / cfg.discount_time_unit_s) * v_dest - v_here
    return DispatchProblem(nd, no, di.astype(np.int64), oi.astype(np.int64), rho, d, fee)


def _assign_edges(problem: DispatchProblem, weights: np.ndarray) -> np.ndarray:
    """Exact max-weight matching over the problem's edges with the given
    weights; non-positive edges never match. Returns indices of the matched
    edges. The smaller side becomes the kernel's row set."""
    keep = np.nonzero(weights > 0)[0]
    if len(keep) == 0:
        return np.empty(0, dtype=np.int64)
    ed = problem.edge_driver[keep]
    eo = problem.edge_order[keep]
    wv = weights[keep]
    drivers = np.unique(ed)
    orders = np.unique(eo)
    dpos = np.searchsorted(drivers, ed)
    opos = np.searchsorted(orders, eo)
    transpose = len(drivers) > len(orders)
    if transpose:
        rows, cols, rpos, cpos = orders, drivers, opos, dpos
    else:
        rows, cols, rpos, cpos = drivers, orders, dpos, opos
    mat = np.zeros((len(rows), len(cols)))
    mat[rpos, cpos] = wv
    rm = max_weight_assign(mat)
    matched_rows = np.nonzero(rm >= 0)[0]
    if len(matched_rows) == 0:
        return np.empty(0, dtype=np.int64)
    # map matched (row, col) cells back to edge indices
    edge_key = rpos.astype(np.int64) * len(cols) + cpos
    order_of = np.argsort(edge_key, kind="stable")
    sought = matched_rows.astype(np.int64) * len(cols) + rm[matched_rows]
    at = np.searchsorted(edge_key[order_of], sought)
    return np.sort(keep[order_of[at]])


def _solution(problem: DispatchProblem, edges: np.ndarray) -> MatchingSolution:
    pairs = sorted(zip(problem.edge_driver[edges].tolist(), problem.edge_order[edges].tolist()))
    return MatchingSolution(
        pairs=pairs,
        total_utility=float(problem.utility[edges].sum()),
        total_distance=float(problem.distance[edges].sum()),
        edges=edges,
    )


def solve_matching(problem: DispatchProblem) -> MatchingSolution:
    """Maximize total utility; edges with rho <= 0 stay unmatched."""
    return _solution(problem, _assign_edges(problem, problem.utility))


def baseline_match(problem: DispatchProblem) -> MatchingSolution:
    """Maximize match count, then minimize total pickup distance: max-weight
    matching with weight B - distance, B past any distance times the largest
    possible matching size."""
    if problem.n_edges == 0:
        return _solution(problem, np.empty(0, dtype=np.int64))
    d_max = float(problem.distance.max())
    b = d_max * min(problem.n_drivers, problem.n_orders) + 1.0
    return _solution(problem, _assign_edges(problem, b - problem.distance))


def greedy_match(problem: DispatchProblem) -> MatchingSolution:
    """Accept eligible pairs in fee order (ties by lowest edge index) under
    the one-order-per-driver, one-driver-per-order constraints."""
    scan = np.lexsort((np.arange(problem.n_edges), -problem.fee))
    taken_driver = set()
    taken_order = set()
    edges = []
    for e in scan:
        d = int(problem.edge_driver[e])
        o = int(problem.edge_order[e])
        if d in taken_driver or o in taken_order:
            continue
        taken_driver.add(d)
        taken_order.add(o)
        edges.append(int(e))
    return _solution(problem, np.array(sorted(edges), dtype=np.int64))
