"""Value-function representations.

Two interchangeable forms:

* ``TabularValue`` -- exact values over (cell, time-slice) keys, dense-backed,
  unvisited keys read as zero.
* ``ValueNetwork`` -- a cerebellar (CMAC-style) embedding feeding a small
  ReLU MLP, with analytic gradients, a frozen target shadow, and an
  infinity-norm Lipschitz penalty used as a training regularizer.

Dense layer weights are stored ``(out, in)`` so that the max absolute
row-sum of each matrix is exactly its infinity operator norm; the product of
those norms bounds the network's Lipschitz constant w.r.t. the embedding.

Parameters live in one flat float64 vector. Layout, in order: embedding
memory (A x m, row-major), then per dense layer its weight matrix
(out x in, row-major) followed by its bias. Snapshots serialize this vector
verbatim.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import DataError, SpatioTemporalState

_HASH_C0 = 0x9E3779B97F4A7C15
_HASH_C1 = 0xC2B2AE3D27D4EB4F
_HASH_C2 = 0x165667B19E3779F9
_HASH_C3 = 0x27D4EB2F165667C5
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


class TabularValue:
    """Dense (cell, time-slice) value table. Keys never stored still read 0."""

    def __init__(self, n_cells: int, n_slices: int, slice_s: float = 600.0):
        self.n_cells = n_cells
        self.n_slices = n_slices
        self.slice_s = float(slice_s)
        self.table = np.zeros((n_cells, n_slices), dtype=np.float64)

    def slice_of(self, clock_s) -> np.ndarray:
        return np.floor_divide(np.asarray(clock_s, dtype=np.float64), self.slice_s).astype(np.int64)

    def lookup(self, cells, clock_s) -> np.ndarray:
        """Values at (cell, clock). Clocks at or past the table horizon read 0
        (episode end has no remaining value)."""
        cells = np.asarray(cells, dtype=np.int64)
        sl = self.slice_of(clock_s)
        inside = (sl >= 0) & (sl < self.n_slices)
        out = np.zeros(cells.shape, dtype=np.float64)
        out[inside] = self.table[cells[inside], sl[inside]]
        return out

    def __getitem__(self, key: tuple[int, int]) -> float:
        cell, sl = key
        if 0 <= sl < self.n_slices:
            return float(self.table[cell, sl])
        return 0.0

    def __setitem__(self, key: tuple[int, int], value: float) -> None:
        cell, sl = key
        if not np.isfinite(value):
            raise ValueError(f"refusing to store non-finite value {value} at {key}")
        self.table[cell, sl] = value

    def copy(self) -> "TabularValue":
        out = TabularValue(self.n_cells, self.n_slices, self.slice_s)
        out.table[:] = self.table
        return out


def ensemble_tabular(online: TabularValue, offline_slice: np.ndarray, omega: float) -> TabularValue:
    """Blend a tabular value with a per-cell offline slice:
    new[(cell, k)] = omega * online[(cell, k)] + (1 - omega) * offline[cell]."""
    if not (0 <= omega <= 1):
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    offline = np.asarray(offline_slice, dtype=np.float64)
    if offline.shape != (online.n_cells,):
        raise ValueError(f"offline slice has shape {offline.shape}, expected ({online.n_cells},)")
    out = online.copy()
    if omega == 1.0:
        return out
    if omega == 0.0:
        out.table[:] = offline[:, None]
        return out
    out.table[:] = omega * online.table + (1.0 - omega) * offline[:, None]
    return out


@dataclass
class CerebellarEmbedding:
    """Staggered-lattice quantizers addressing a shared memory matrix.

    Quantizer i bins (x, y, time/slice_s), each coordinate offset by i/n of
    one lattice step; the hashed (quantizer, bin-triple) key selects a memory
    row. A state's embedding is the mean of its n selected rows (hash
    collisions accumulate).
    """

    n_quantizers: int = 3
    memory_size: int = 20000
    embed_dim: int = 50
    slice_s: float = 600.0
    grid_width: int = 1
    use_abs_time: bool = False
    memory: np.ndarray = None  # (memory_size, embed_dim)

    def __post_init__(self):
        if self.memory is None:
            self.memory = np.zeros((self.memory_size, self.embed_dim), dtype=np.float64)
        if self.memory.shape != (self.memory_size, self.embed_dim):
            raise ValueError("memory shape does not match (memory_size, embed_dim)")

    def row_indices(self, x, y, time_s) -> np.ndarray:
        """Memory row per quantizer for each state: shape (B, n_quantizers)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        t = np.asarray(time_s, dtype=np.float64) / self.slice_s
        n = self.n_quantizers
        offs = np.arange(n, dtype=np.float64) / n
        qx = np.floor(x[:, None] + offs).astype(np.int64)
        qy = np.floor(y[:, None] + offs).astype(np.int64)
        qt = np.floor(t[:, None] + offs).astype(np.int64)
        return _hash_rows(np.arange(n, dtype=np.int64), qx, qy, qt, self.memory_size)

    def time_of(self, state: SpatioTemporalState) -> float:
        if self.use_abs_time:
            if state.abs_time is None:
                raise ValueError("state lacks abs_time but this representation requires it")
            return state.abs_time
        return state.clock

    def state_coords(self, state: SpatioTemporalState) -> tuple[int, int, float]:
        return state.cell % self.grid_width, state.cell // self.grid_width, self.time_of(state)

    def embed_batch(self, x, y, time_s) -> np.ndarray:
        rows = self.row_indices(x, y, time_s)
        return self.memory[rows].mean(axis=1)


def _hash_rows(quantizer_ids: np.ndarray, qx: np.ndarray, qy: np.ndarray, qt: np.ndarray,
               memory_size: int) -> np.ndarray:
    """Multiplicative 64-bit hash of (quantizer, qx, qy, qt), reduced mod A."""
    with np.errstate(over="ignore"):
        h = (quantizer_ids[None, :].astype(np.uint64) + np.uint64(1)) * np.uint64(_HASH_C0)
        h = (h + qx.astype(np.uint64) * np.uint64(_HASH_C1)) & _MASK
        h = (h + qy.astype(np.uint64) * np.uint64(_HASH_C2)) & _MASK
        h = (h + qt.astype(np.uint64) * np.uint64(_HASH_C3)) & _MASK
        # splitmix64 finalizer
        h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        h = h ^ (h >> np.uint64(31))
    return (h % np.uint64(memory_size)).astype(np.int64)


def embed(state: SpatioTemporalState, emb: CerebellarEmbedding) -> np.ndarray:
    """Embedding of a single state: mean of its selected memory rows."""
    x, y, t = emb.state_coords(state)
    return emb.embed_batch([x], [y], [t])[0]


@dataclass(frozen=True)
class NetworkSpec:
    grid_width: int
    grid_height: int
    n_quantizers: int = 3
    memory_size: int = 20000
    embed_dim: int = 50
    hidden: tuple[int, ...] = (32, 128, 32)
    uses_time_input: bool = False
    slice_s: float = 600.0

    @property
    def n_cells(self) -> int:
        return self.grid_width * self.grid_height

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) for every dense layer including the scalar head."""
        widths = [self.embed_dim, *self.hidden, 1]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    def n_params(self) -> int:
        total = self.memory_size * self.embed_dim
        for out, inp in self.layer_dims():
            total += out * inp + out
        return total


class ValueNetwork:
    """Cerebellar embedding + ReLU MLP over one flat parameter vector."""

    def __init__(self, spec: NetworkSpec, params: np.ndarray | None = None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.n_params(), dtype=np.float64)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (spec.n_params(),):
            raise ValueError(f"expected {spec.n_params()} parameters, got {params.shape}")
        self.params = params
        self._build_views()

    def _build_views(self):
        spec = self.spec
        off = spec.memory_size * spec.embed_dim
        memory = self.params[:off].reshape(spec.memory_size, spec.embed_dim)
        self.embedding = CerebellarEmbedding(
            n_quantizers=spec.n_quantizers,
            memory_size=spec.memory_size,
            embed_dim=spec.embed_dim,
            slice_s=spec.slice_s,
            grid_width=spec.grid_width,
            use_abs_time=spec.uses_time_input,
            memory=memory,
        )
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for out, inp in spec.layer_dims():
            self.weights.append(self.params[off:off + out * inp].reshape(out, inp))
            off += out * inp
            self.biases.append(self.params[off:off + out])
            off += out

    @classmethod
    def random_init(cls, spec: NetworkSpec, rng: np.random.Generator) -> "ValueNetwork":
        net = cls(spec)
        net.embedding.memory[:] = rng.normal(0.0, 0.5, net.embedding.memory.shape)
        for w, b in zip(net.weights, net.biases):
            fan_in = w.shape[1]
            w[:] = rng.normal(0.0, math.sqrt(2.0 / fan_in), w.shape)
            # small random bias keeps pre-activations off the ReLU kink
            b[:] = rng.normal(0.0, 0.01, b.shape)
        return net

    def copy(self) -> "ValueNetwork":
        return ValueNetwork(self.spec, self.params.copy())

    def _features(self, cells, time_s):
        cells = np.asarray(cells, dtype=np.int64)
        x = cells % self.spec.grid_width
        y = cells // self.spec.grid_width
        return x, y, np.asarray(time_s, dtype=np.float64)

    def forward(self, cells, time_s) -> np.ndarray:
        x, y, t = self._features(cells, time_s)
        a = self.embedding.embed_batch(x, y, t)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if i != last:
                np.maximum(a, 0.0, out=a)
        return a[:, 0]

    def forward_cached(self, cells, time_s):
        """Forward pass keeping activations for the backward pass."""
        x, y, t = self._features(cells, time_s)
        rows = self.embedding.row_indices(x, y, t)
        emb = self.embedding.memory[rows].mean(axis=1)
        acts = [emb]
        a = emb
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if i != last:
                a = np.maximum(a, 0.0)
            acts.append(a)
        return a[:, 0], {"rows": rows, "acts": acts}

    def backward(self, cache: dict, dvalue: np.ndarray) -> np.ndarray:
        """Gradient of sum_i dvalue[i] * V(s_i) w.r.t. the flat parameters."""
        grad = np.zeros_like(self.params)
        gnet = ValueNetwork(self.spec, grad)
        acts = cache["acts"]
        delta = dvalue[:, None]  # (B, 1) at the linear head
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = acts[i]
            gnet.weights[i] += delta.T @ a_prev
            gnet.biases[i] += delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * (acts[i] > 0.0)
            else:
                demb = delta @ self.weights[0]
        rows = cache["rows"]
        n = self.spec.n_quantizers
        contrib = np.repeat(demb / n, n, axis=0)
        np.add.at(gnet.embedding.memory, rows.reshape(-1), contrib)
        return grad


def value(state: SpatioTemporalState, net: ValueNetwork) -> float:
    """Scalar V(s)."""
    t = net.embedding.time_of(state)
    return float(net.forward([state.cell], [t])[0])


def value_gradient(state: SpatioTemporalState, net: ValueNetwork) -> np.ndarray:
    """dV(s)/dparams as a flat vector in the documented parameter order."""
    t = net.embedding.time_of(state)
    _, cache = net.forward_cached([state.cell], [t])
    return net.backward(cache, np.ones(1))


def lipschitz_penalty(net: ValueNetwork) -> float:
    """Infinity-norm budget: max row-sum of the embedding memory plus the sum
    of every dense layer's infinity norm."""
    total = float(np.abs(net.embedding.memory).sum(axis=1).max())
    for w in net.weights:
        total += float(np.abs(w).sum(axis=1).max())
    return total


def lipschitz_penalty_grad(net: ValueNetwork) -> np.ndarray:
    """Subgradient of the penalty; ties resolved to the lowest-index row."""
    grad = np.zeros_like(net.params)
    gnet = ValueNetwork(net.spec, grad)
    r = int(np.argmax(np.abs(net.embedding.memory).sum(axis=1)))
    gnet.embedding.memory[r] = np.sign(net.embedding.memory[r])
    for w, gw in zip(net.weights, gnet.weights):
        r = int(np.argmax(np.abs(w).sum(axis=1)))
        gw[r] = np.sign(w[r])
    return grad


def dense_lipschitz_bound(net: ValueNetwork) -> float:
    """Product of dense-layer infinity norms: Lipschitz constant of the MLP
    w.r.t. the embedding vector under the max norm."""
    bound = 1.0
    for w in net.weights:
        bound *= float(np.abs(w).sum(axis=1).max())
    return bound


class TargetShadow:
    """Frozen parameter snapshot; constant between explicit syncs."""

    def __init__(self, net: ValueNetwork, sync_period: int = 100):
        self.sync_period = sync_period
        self._net = ValueNetwork(net.spec, net.params.copy())

    def sync(self, net: ValueNetwork) -> None:
        self._net.params[:] = net.params

    def forward(self, cells, time_s) -> np.ndarray:
        return self._net.forward(cells, time_s)

    @property
    def frozen_params(self) -> np.ndarray:
        return self._net.params


class Adam:
    """Adam with the conventional constants; operates on one flat vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m += (1.0 - self.beta1) * (grad - self.m)
        self.v += (1.0 - self.beta2) * (grad * grad - self.v)
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def distill(student: ValueNetwork, targets: list[tuple[SpatioTemporalState, float]],
            steps: int, lr: float = 1e-3) -> ValueNetwork:
    """Pull the student toward (state, value) targets by full-batch Adam on
    the mean squared error. Mutates and returns the student."""
    if not targets:
        raise DataError("distillation needs at least one target")
    values = np.array([v for _, v in targets], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError("distillation targets must be finite")
    cells = np.array([s.cell for s, _ in targets], dtype=np.int64)
    times = np.array([student.embedding.time_of(s) for s, _ in targets], dtype=np.float64)
    opt = Adam(student.params.size, lr)
    n = len(targets)
    for _ in range(steps):
        pred, cache = student.forward_cached(cells, times)
        grad = student.backward(cache, 2.0 * (pred - values) / n)
        opt.step(student.params, grad)
    return student


def distill_mse(student: ValueNetwork, targets: list[tuple[SpatioTemporalState, float]]) -> float:
    values = np.array([v for _, v in targets], dtype=np.float64)
    cells = np.array([s.cell for s, _ in targets], dtype=np.int64)
    times = np.array([student.embedding.time_of(s) for s, _ in targets], dtype=np.float64)
    pred = student.forward(cells, times)
    return float(np.mean((pred - values) ** 2))


def save_snapshot(net: ValueNetwork, path, gamma: float, discount_time_unit_s: float) -> None:
    """Write a self-describing snapshot: spec, flat float64 parameters in the
    documented order, training-time discount convention, sha256 checksum."""
    spec = net.spec
    meta = {
        "grid_width": spec.grid_width,
        "grid_height": spec.grid_height,
        "n_quantizers": spec.n_quantizers,
        "memory_size": spec.memory_size,
        "embed_dim": spec.embed_dim,
        "hidden": list(spec.hidden),
        "uses_time_input": spec.uses_time_input,
        "slice_s": spec.slice_s,
        "gamma": gamma,
        "discount_time_unit_s": discount_time_unit_s,
        "param_order": "memory, then per dense layer weight (out,in) and bias",
        "checksum": hashlib.sha256(net.params.tobytes()).hexdigest(),
    }
    np.savez(path, params=net.params, meta=json.dumps(meta))


def load_snapshot(path) -> tuple[ValueNetwork, dict]:
    with np.load(path, allow_pickle=False) as data:
        if "params" not in data or "meta" not in data:
            raise DataError(f"{path}: not a value snapshot")
        params = np.asarray(data["params"], dtype=np.float64)
        meta = json.loads(str(data["meta"]))
    if hashlib.sha256(params.tobytes()).hexdigest() != meta["checksum"]:
        raise DataError(f"{path}: checksum mismatch, snapshot corrupted")
    spec = NetworkSpec(
        grid_width=meta["grid_width"],
        grid_height=meta["grid_height"],
        n_quantizers=meta["n_quantizers"],
        memory_size=meta["memory_size"],
        embed_dim=meta["embed_dim"],
        hidden=tuple(meta["hidden"]),
        uses_time_input=meta["uses_time_input"],
        slice_s=meta["slice_s"],
    )
    if params.shape != (spec.n_params(),):
        raise DataError(f"{path}: parameter count {params.size} does not match spec")
    return ValueNetwork(spec, params), meta
