import numpy as np
import pytest

from gridhail.domain import DataError, EngineConfig, substream
from gridhail.offline_ope import (OpeTrainer, TrajectoryDataset, TrajectoryRecord,
                                  extract_transitions, load_trajectories, save_trajectories,
                                  slice_values, smdp_reward, ope_step, train_ope)
from gridhail.valuefn import NetworkSpec, ValueNetwork, lipschitz_penalty

CFG = EngineConfig()


def rec(eid, did, frm, t, kind, r, to, dur):
    return TrajectoryRecord(eid, did, frm, t, kind, r, to, dur)


def small_trainer(seed=0, lam=0.0, lr=3e-4, iters=50, width=4, height=4, **spec_overrides):
    spec = NetworkSpec(grid_width=width, grid_height=height, n_quantizers=3,
                       memory_size=128, embed_dim=4, hidden=(3, 3),
                       uses_time_input=True, **spec_overrides)
    net = ValueNetwork.random_init(spec, substream(seed, "init"))
    return OpeTrainer(net=net, lr=lr, lipschitz_lambda=lam, batch_size=16, max_iters=iters)


# --- extraction ---------------------------------------------------------------

def test_extract_single_trip_gives_one_transition():
    ds = extract_transitions([rec("e", 1, 0, 15000.0, "trip", 8.0, 5, 900.0)], CFG)
    assert len(ds) == 1
    assert ds.to_abs[0] == 15900.0
    assert ds.k_units[0] == 2.0  # ceil(900/600)


def test_extract_three_trips_two_idles():
    records = [
        rec("e", 1, 0, 14400.0, "trip", 5.0, 1, 600.0),
        rec("e", 1, 1, 15000.0, "idle", 0.0, 1, 300.0),
        rec("e", 1, 1, 15300.0, "trip", 7.0, 2, 1200.0),
        rec("e", 1, 2, 16500.0, "idle", 0.0, 3, 100.0),
        rec("e", 1, 3, 16600.0, "trip", 2.0, 0, 650.0),
    ]
    ds = extract_transitions(records, CFG)
    assert len(ds) == 5
    assert ds.rejected == []


def test_extract_empty_log():
    ds = extract_transitions([], CFG)
    assert len(ds) == 0


def test_extract_rejects_non_monotone_episode():
    good = [rec("a", 1, 0, 15000.0, "trip", 5.0, 1, 600.0)]
    bad = [rec("b", 2, 0, 16000.0, "trip", 5.0, 1, 600.0),
           rec("b", 2, 1, 15000.0, "idle", 0.0, 1, 60.0)]
    ds = extract_transitions(good + bad, CFG)
    assert len(ds) == 1
    assert len(ds.rejected) == 1
    assert "driver 2" in ds.rejected[0]


def test_extract_min_one_unit():
    ds = extract_transitions([rec("e", 1, 0, 15000.0, "idle", 0.0, 0, 2.0)], CFG)
    assert ds.k_units[0] == 1.0


def test_trajectory_csv_roundtrip(tmp_path):
    records = [rec("e", 3, 7, 14402.0, "trip", 5.25, 9, 333.0),
               rec("e", 3, 9, 14735.0, "idle", 0.0, 9, 900.0)]
    path = tmp_path / "traj.csv"
    save_trajectories(records, path)
    again = load_trajectories(path)
    assert again == records


def test_trajectory_malformed_line_reports_lineno(tmp_path):
    path = tmp_path / "traj.csv"
    path.write_text("episode_id,driver_id,from_cell,abs_time_s,kind,reward,to_cell,duration_s\n"
                    "e,1,0,100,trip,5.0,2,60\n"
                    "e,1,not_a_cell,100,trip,5.0,2,60\n")
    with pytest.raises(DataError, match=":3"):
        load_trajectories(path)


# --- smdp reward ---------------------------------------------------------------

def test_smdp_reward_single_unit_collapses():
    assert smdp_reward(7.5, 1, 0.9) == pytest.approx(7.5, rel=1e-15)


def test_smdp_reward_two_units():
    assert smdp_reward(10.0, 2, 0.9) == pytest.approx(9.5, rel=1e-12)


def test_smdp_reward_matches_geometric_sum():
    for gamma in (0.5, 0.9, 0.99):
        for R in (0.1, 1.0, 10.0):
            for k in range(1, 51):
                oracle = sum(gamma ** j * (R / k) for j in range(k))
                assert smdp_reward(R, k, gamma) == pytest.approx(oracle, rel=1e-12)


def test_smdp_reward_gamma_one_limit():
    assert smdp_reward(4.0, 7, 1.0) == 4.0


def test_smdp_reward_monotone_in_k():
    vals = [smdp_reward(10.0, k, 0.9) for k in range(1, 20)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_smdp_reward_rejects_k_below_one():
    with pytest.raises(ValueError):
        smdp_reward(1.0, 0, 0.9)


# --- ope step -------------------------------------------------------------------

def one_transition_dataset(R=10.0, k=1.0):
    return TrajectoryDataset(
        from_cell=np.array([0]), from_abs=np.array([15000.0]),
        to_cell=np.array([5]), to_abs=np.array([15000.0 + k * 600.0]),
        reward=np.array([R]), k_units=np.array([k]))


def test_ope_step_zero_net_single_transition_loss():
    trainer = small_trainer(lam=0.0)
    trainer.net.params[:] = 0.0
    trainer.target.sync(trainer.net)
    loss = ope_step(trainer, one_transition_dataset(R=10.0, k=1.0))
    assert loss == pytest.approx(100.0, rel=1e-12)


def test_ope_step_fixed_point_zero_gradient():
    trainer = small_trainer(lam=0.0)
    ds = one_transition_dataset(R=0.0, k=1.0)
    # reward 0 and gamma^k * V(s') == V(s) when the net is identically zero
    trainer.net.params[:] = 0.0
    trainer.target.sync(trainer.net)
    before = trainer.net.params.copy()
    loss = ope_step(trainer, ds)
    assert loss == 0.0
    assert np.array_equal(trainer.net.params, before)


def test_ope_gradient_matches_finite_differences():
    trainer = small_trainer(seed=4, lam=1e-4)
    rng = np.random.default_rng(4)
    n = 6
    ds = TrajectoryDataset(
        from_cell=rng.integers(0, 16, n), from_abs=rng.random(n) * 40000 + 14400,
        to_cell=rng.integers(0, 16, n), to_abs=rng.random(n) * 40000 + 54400,
        reward=rng.random(n) * 8, k_units=rng.integers(1, 5, n).astype(float))
    net = trainer.net
    gamma = trainer.gamma
    frozen = trainer.target

    def loss_fn(net_):
        spread = smdp_reward(ds.reward, ds.k_units, gamma)
        boot = frozen.forward(ds.to_cell, ds.to_abs)
        target = spread + gamma ** ds.k_units * boot
        pred = net_.forward(ds.from_cell, ds.from_abs)
        return float((pred - target) @ (pred - target)) + 1e-4 * lipschitz_penalty(net_)

    from gridhail.valuefn import lipschitz_penalty_grad
    pred, cache = net.forward_cached(ds.from_cell, ds.from_abs)
    spread = smdp_reward(ds.reward, ds.k_units, gamma)
    target = spread + gamma ** ds.k_units * frozen.forward(ds.to_cell, ds.to_abs)
    analytic = net.backward(cache, 2.0 * (pred - target)) + 1e-4 * lipschitz_penalty_grad(net)

    h = 1e-5
    numeric = np.empty_like(net.params)
    for i in range(net.params.size):
        orig = net.params[i]
        net.params[i] = orig + h
        hi = loss_fn(net)
        net.params[i] = orig - h
        lo = loss_fn(net)
        net.params[i] = orig
        numeric[i] = (hi - lo) / (2 * h)
    denom = np.maximum(np.abs(numeric), 1e-6)
    assert (np.abs(analytic - numeric) / denom).max() < 1e-4


def test_lambda_regularization_shrinks_penalty():
    rng = np.random.default_rng(11)
    n = 200
    ds = TrajectoryDataset(
        from_cell=rng.integers(0, 16, n), from_abs=rng.random(n) * 40000 + 14400,
        to_cell=rng.integers(0, 16, n), to_abs=rng.random(n) * 40000 + 54400,
        reward=rng.random(n) * 8, k_units=rng.integers(1, 5, n).astype(float))
    runs = {}
    for lam in (0.0, 0.05):
        trainer = small_trainer(seed=11, lam=lam, iters=300)
        train_ope(ds, trainer, seed=11)
        runs[lam] = lipschitz_penalty(trainer.net)
    assert runs[0.05] < runs[0.0]


# --- full training ---------------------------------------------------------------

def test_train_ope_zero_iters_returns_net_unchanged():
    trainer = small_trainer(iters=0)
    before = trainer.net.params.copy()
    curve = train_ope(one_transition_dataset(), trainer, seed=0)
    assert curve == []
    assert np.array_equal(trainer.net.params, before)


def test_train_ope_empty_dataset_rejected():
    trainer = small_trainer()
    empty = TrajectoryDataset(*(np.empty(0),) * 6)
    with pytest.raises(DataError):
        train_ope(empty, trainer, seed=0)


def toy_hotcell_dataset(rng, n=600):
    """4x4 city; trips into cell 0 pay well early in the day, nothing else
    pays. States near the hot cell at early times should be worth more."""
    from_cell = rng.integers(0, 16, n)
    early = rng.random(n) < 0.5
    from_abs = np.where(early, 16000.0, 70000.0) + rng.random(n) * 1000
    to_hot = (from_cell != 0) & early & (rng.random(n) < 0.7)
    to_cell = np.where(to_hot, 0, rng.integers(0, 16, n))
    reward = np.where(to_hot, 10.0, 0.0)
    dur = rng.integers(1, 3, n).astype(float)
    return TrajectoryDataset(from_cell=from_cell, from_abs=from_abs, to_cell=to_cell,
                             to_abs=from_abs + dur * 600.0, reward=reward, k_units=dur)


def test_train_ope_directional_values_on_toy_city():
    rng = np.random.default_rng(21)
    ds = toy_hotcell_dataset(rng)
    trainer = small_trainer(seed=21, lam=1e-4, lr=3e-3, iters=1500)
    train_ope(ds, trainer, seed=21)
    early = 16500.0
    v_hot = float(trainer.net.forward([0], [early])[0])
    v_late_hot = float(trainer.net.forward([0], [70500.0])[0])
    assert v_hot > v_late_hot


def test_train_ope_loss_decreases():
    rng = np.random.default_rng(22)
    ds = toy_hotcell_dataset(rng)
    trainer = small_trainer(seed=22, lam=1e-4, lr=3e-3, iters=800)
    curve = train_ope(ds, trainer, seed=22)
    head = np.mean(curve[: len(curve) // 10])
    tail = np.mean(curve[-len(curve) // 10:])
    assert tail < head


def test_train_ope_bitwise_reproducible():
    rng = np.random.default_rng(23)
    ds = toy_hotcell_dataset(rng, n=200)
    params = []
    for _ in range(2):
        trainer = small_trainer(seed=23, lam=1e-4, iters=120)
        train_ope(ds, trainer, seed=23)
        params.append(trainer.net.params.copy())
    assert np.array_equal(params[0], params[1])


# --- slices -----------------------------------------------------------------------

def test_slice_deterministic_and_matches_direct_eval():
    trainer = small_trainer(seed=31)
    net = trainer.net
    t = 30000.0
    s1 = slice_values(net, t)
    s2 = slice_values(net, t)
    assert np.array_equal(s1, s2)
    direct = net.forward(np.arange(16), np.full(16, t))
    assert np.array_equal(s1, direct)


def test_slice_differs_across_times_after_time_varying_training():
    rng = np.random.default_rng(32)
    ds = toy_hotcell_dataset(rng)
    trainer = small_trainer(seed=32, lam=1e-4, lr=3e-3, iters=1500)
    train_ope(ds, trainer, seed=32)
    morning = slice_values(trainer.net, 16500.0)
    evening = slice_values(trainer.net, 70500.0)
    assert np.any(morning != evening)


def test_slice_requires_time_indexed_net():
    net = ValueNetwork(NetworkSpec(grid_width=2, grid_height=2, memory_size=8, embed_dim=2,
                                   hidden=(2,), uses_time_input=False))
    with pytest.raises(ValueError):
        slice_values(net, 20000.0)
