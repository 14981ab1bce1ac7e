import numpy as np
import pytest

from gridhail.domain import SpatioTemporalState, substream
from gridhail.valuefn import (CerebellarEmbedding, NetworkSpec, TabularValue, TargetShadow,
                              ValueNetwork, dense_lipschitz_bound, distill, distill_mse, embed,
                              ensemble_tabular, lipschitz_penalty, lipschitz_penalty_grad,
                              load_snapshot, save_snapshot, value, value_gradient)

MINI = NetworkSpec(grid_width=6, grid_height=6, n_quantizers=3, memory_size=64,
                   embed_dim=4, hidden=(3, 3), slice_s=600.0)


def mini_net(seed=0, **overrides) -> ValueNetwork:
    spec = MINI if not overrides else NetworkSpec(**{**MINI.__dict__, **overrides})
    return ValueNetwork.random_init(spec, substream(seed, "init"))


def finite_difference(net: ValueNetwork, fn, h=1e-5) -> np.ndarray:
    grad = np.empty_like(net.params)
    for i in range(net.params.size):
        orig = net.params[i]
        net.params[i] = orig + h
        hi = fn(net)
        net.params[i] = orig - h
        lo = fn(net)
        net.params[i] = orig
        grad[i] = (hi - lo) / (2 * h)
    return grad


# --- embedding --------------------------------------------------------------

def test_embed_single_quantizer_selects_one_row():
    emb = CerebellarEmbedding(n_quantizers=1, memory_size=16, embed_dim=3, grid_width=4)
    emb.memory[:] = np.arange(48).reshape(16, 3)
    s = SpatioTemporalState(cell=5, clock=100.0)
    rows = emb.row_indices([5 % 4], [5 // 4], [100.0])
    assert rows.shape == (1, 1)
    assert np.array_equal(embed(s, emb), emb.memory[rows[0, 0]])


def test_embed_collision_accumulates_to_single_row():
    emb = CerebellarEmbedding(n_quantizers=3, memory_size=1, embed_dim=4, grid_width=4)
    emb.memory[0] = [1.0, 2.0, 3.0, 4.0]
    s = SpatioTemporalState(cell=1, clock=0.0)
    # every quantizer hashes into the only row: c(s) accumulates 3 there
    assert np.allclose(embed(s, emb), emb.memory[0])


def test_embed_is_mean_of_selected_rows():
    emb = CerebellarEmbedding(n_quantizers=3, memory_size=128, embed_dim=5, grid_width=8)
    rng = np.random.default_rng(3)
    emb.memory[:] = rng.normal(size=emb.memory.shape)
    s = SpatioTemporalState(cell=13, clock=750.0)
    rows = emb.row_indices([13 % 8], [13 // 8], [750.0])[0]
    # explicit sparse activation-vector product
    c = np.zeros(128)
    for r in rows:
        c[r] += 1.0
    expected = c @ emb.memory / 3
    assert np.allclose(embed(s, emb), expected, rtol=1e-12)


def test_embed_depends_only_on_quantized_key():
    emb = CerebellarEmbedding(n_quantizers=3, memory_size=256, embed_dim=4,
                              slice_s=600.0, grid_width=8)
    rng = np.random.default_rng(4)
    emb.memory[:] = rng.normal(size=emb.memory.shape)
    # clocks within the same lattice bucket for every staggered quantizer
    a = embed(SpatioTemporalState(cell=10, clock=10.0), emb)
    b = embed(SpatioTemporalState(cell=10, clock=190.0), emb)
    assert np.array_equal(a, b)
    # crossing a sub-lattice boundary changes at least one quantizer bin
    c = embed(SpatioTemporalState(cell=10, clock=210.0), emb)
    assert not np.array_equal(a, c)


# --- forward value ----------------------------------------------------------

def test_value_zero_params_is_zero_everywhere():
    net = ValueNetwork(MINI)
    for cell in range(MINI.n_cells):
        assert value(SpatioTemporalState(cell=cell, clock=42.0), net) == 0.0


def test_value_deterministic_across_calls():
    net = mini_net(seed=9)
    s = SpatioTemporalState(cell=7, clock=1234.0)
    first = value(s, net)
    assert all(value(s, net) == first for _ in range(100))


def test_value_requires_abs_time_when_time_indexed():
    net = mini_net(uses_time_input=True)
    with pytest.raises(ValueError, match="abs_time"):
        value(SpatioTemporalState(cell=1, clock=5.0), net)
    assert np.isfinite(value(SpatioTemporalState(cell=1, clock=5.0, abs_time=30000.0), net))


def test_value_final_layer_weight_perturbation():
    net = mini_net(seed=2)
    s = SpatioTemporalState(cell=9, clock=500.0)
    base = value(s, net)
    # activation feeding the scalar head
    _, cache = net.forward_cached([s.cell], [s.clock])
    act = cache["acts"][-2][0]
    eps = 1e-6
    j = int(np.argmax(np.abs(act)))
    net.weights[-1][0, j] += eps
    bumped = value(s, net)
    assert (bumped - base) / eps == pytest.approx(act[j], rel=1e-4)


# --- gradients --------------------------------------------------------------

def test_value_gradient_matches_central_differences():
    net = mini_net(seed=5)
    s = SpatioTemporalState(cell=17, clock=900.0)
    analytic = value_gradient(s, net)
    numeric = finite_difference(net, lambda n: value(s, n))
    denom = np.maximum(np.abs(numeric), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < 1e-4


def test_value_gradient_zero_below_dead_relu():
    net = mini_net(seed=6)
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        w[:] = 0.0
        b[:] = -1.0  # every hidden unit dead
    s = SpatioTemporalState(cell=3, clock=100.0)
    g = ValueNetwork(net.spec, value_gradient(s, net))
    assert np.all(g.embedding.memory == 0.0)
    assert np.all(g.weights[0] == 0.0)


def test_value_gradient_memory_sparsity():
    net = mini_net(seed=7)
    s = SpatioTemporalState(cell=11, clock=333.0)
    rows = set(net.embedding.row_indices([11 % 6], [11 // 6], [333.0])[0].tolist())
    g = ValueNetwork(net.spec, value_gradient(s, net))
    nonzero = set(np.nonzero(np.abs(g.embedding.memory).sum(axis=1))[0].tolist())
    assert nonzero <= rows


# --- lipschitz penalty -------------------------------------------------------

def test_lipschitz_penalty_zero_params():
    assert lipschitz_penalty(ValueNetwork(MINI)) == 0.0


def test_lipschitz_penalty_single_ones_row():
    net = ValueNetwork(MINI)
    net.embedding.memory[5] = 1.0
    assert lipschitz_penalty(net) == MINI.embed_dim


def test_lipschitz_penalty_positive_homogeneous():
    net = mini_net(seed=8)
    before = lipschitz_penalty(net)
    net.params *= 2.0
    assert lipschitz_penalty(net) == pytest.approx(2 * before, rel=1e-12)


def test_lipschitz_penalty_subgradient_matches_fd():
    net = mini_net(seed=11)
    analytic = lipschitz_penalty_grad(net)
    numeric = finite_difference(net, lipschitz_penalty)
    assert np.abs(analytic - numeric).max() < 1e-5


def test_network_lipschitz_bound_empirical():
    net = mini_net(seed=12)
    bound = dense_lipschitz_bound(net)
    rng = np.random.default_rng(12)
    cells = rng.integers(0, MINI.n_cells, size=(1000, 2))
    clocks = rng.random((1000, 2)) * 30000
    va = net.forward(cells[:, 0], clocks[:, 0])
    vb = net.forward(cells[:, 1], clocks[:, 1])
    ea = net.embedding.embed_batch(cells[:, 0] % 6, cells[:, 0] // 6, clocks[:, 0])
    eb = net.embedding.embed_batch(cells[:, 1] % 6, cells[:, 1] // 6, clocks[:, 1])
    gap = np.abs(ea - eb).max(axis=1)
    assert np.all(np.abs(va - vb) <= bound * gap + 1e-9)


# --- target shadow ----------------------------------------------------------

def test_target_shadow_constant_between_syncs():
    net = mini_net(seed=13)
    shadow = TargetShadow(net)
    cells = np.arange(10)
    clocks = np.full(10, 100.0)
    before = shadow.forward(cells, clocks)
    net.params += 0.5
    assert np.array_equal(shadow.forward(cells, clocks), before)
    shadow.sync(net)
    after = shadow.forward(cells, clocks)
    assert np.array_equal(after, net.forward(cells, clocks))
    assert not np.array_equal(after, before)


# --- tabular + ensemble -----------------------------------------------------

def test_tabular_unvisited_reads_zero_and_rejects_nonfinite():
    tab = TabularValue(9, 4, 600.0)
    assert tab[(3, 2)] == 0.0
    tab[(3, 2)] = 1.5
    assert tab[(3, 2)] == 1.5
    with pytest.raises(ValueError):
        tab[(1, 1)] = float("nan")


def test_tabular_lookup_past_horizon_is_zero():
    tab = TabularValue(4, 3, 600.0)
    tab.table[:] = 7.0
    vals = tab.lookup([0, 1, 2], [0.0, 1799.0, 1800.0])
    assert vals[0] == 7.0 and vals[1] == 7.0 and vals[2] == 0.0


def test_ensemble_omega_one_is_bitwise_noop():
    tab = TabularValue(5, 3)
    tab.table[:] = np.random.default_rng(1).normal(size=tab.table.shape)
    offline = np.random.default_rng(2).normal(size=5)
    out = ensemble_tabular(tab, offline, 1.0)
    assert np.array_equal(out.table, tab.table)


def test_ensemble_omega_zero_reproduces_offline_slice():
    tab = TabularValue(5, 3)
    tab.table[:] = 9.0
    offline = np.arange(5.0)
    out = ensemble_tabular(tab, offline, 0.0)
    for cell in range(5):
        assert np.all(out.table[cell] == offline[cell])


def test_ensemble_scalar_arithmetic():
    tab = TabularValue(1, 1)
    tab.table[0, 0] = 10.0
    out = ensemble_tabular(tab, np.array([5.0]), 0.2)
    assert out.table[0, 0] == pytest.approx(0.2 * 10 + 0.8 * 5, abs=1e-15)
    assert out.table[0, 0] == pytest.approx(6.0)


def test_ensemble_then_identity_composes():
    tab = TabularValue(3, 2)
    tab.table[:] = np.random.default_rng(3).normal(size=tab.table.shape)
    offline = np.random.default_rng(4).normal(size=3)
    once = ensemble_tabular(tab, offline, 0.3)
    twice = ensemble_tabular(once, offline, 1.0)
    assert np.array_equal(once.table, twice.table)


# --- distillation -----------------------------------------------------------

def test_distill_fixed_point_keeps_mse_zero():
    net = mini_net(seed=14)
    states = [SpatioTemporalState(cell=c, clock=60.0 * c) for c in range(8)]
    outputs = net.forward(np.array([s.cell for s in states]),
                          np.array([s.clock for s in states]))
    targets = list(zip(states, outputs.tolist()))
    assert distill_mse(net, targets) == 0.0
    distill(net, targets, steps=20)
    assert distill_mse(net, targets) < 1e-10


def test_distill_single_target_converges_to_least_squares_solution():
    spec = NetworkSpec(grid_width=2, grid_height=1, n_quantizers=1, memory_size=1,
                       embed_dim=1, hidden=(), slice_s=600.0)
    net = ValueNetwork(spec)
    net.embedding.memory[0, 0] = 1.0
    net.weights[0][0, 0] = 0.5
    s = SpatioTemporalState(cell=0, clock=0.0)
    distill(net, [(s, 3.0)], steps=4000, lr=1e-2)
    assert value(s, net) == pytest.approx(3.0, abs=1e-4)


def test_distill_reduces_mse_on_random_targets():
    net = mini_net(seed=15)
    rng = np.random.default_rng(15)
    states = [SpatioTemporalState(cell=int(rng.integers(0, MINI.n_cells)),
                                  clock=float(rng.random() * 20000)) for _ in range(100)]
    targets = [(s, float(rng.normal(5.0, 1.0))) for s in states]
    before = distill_mse(net, targets)
    distill(net, targets, steps=200)
    assert distill_mse(net, targets) < before


def test_distill_rejects_nonfinite_targets():
    net = mini_net(seed=16)
    s = SpatioTemporalState(cell=0, clock=0.0)
    with pytest.raises(Exception, match="finite"):
        distill(net, [(s, float("inf"))], steps=1)


# --- snapshots ---------------------------------------------------------------

def test_snapshot_roundtrip_and_checksum(tmp_path):
    net = mini_net(seed=17, uses_time_input=True)
    path = tmp_path / "snap.npz"
    save_snapshot(net, path, gamma=0.9, discount_time_unit_s=600.0)
    loaded, meta = load_snapshot(path)
    assert np.array_equal(loaded.params, net.params)
    assert loaded.spec == net.spec
    assert meta["gamma"] == 0.9
    cells = np.arange(10)
    times = np.full(10, 20000.0)
    assert np.array_equal(loaded.forward(cells, times), net.forward(cells, times))


def test_snapshot_corruption_detected(tmp_path):
    net = mini_net(seed=18)
    path = tmp_path / "snap.npz"
    save_snapshot(net, path, 0.9, 600.0)
    import numpy as _np
    import json as _json
    with _np.load(path) as data:
        params = data["params"].copy()
        meta = str(data["meta"])
    params[0] += 1.0
    _np.savez(path, params=params, meta=meta)
    with pytest.raises(Exception, match="checksum"):
        load_snapshot(path)
