"""Operator entry points: data generation, offline training, segmentation,
simulation, ablations and perturbation experiments.

Every command takes --seed and --out, writes a run manifest next to its
outputs, and refuses to reuse an existing output directory without --force.
Engine-config keys may be overridden through GRIDHAIL_<KEY> environment
variables.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import BACKEND
from .domain import ConfigError, EngineConfig, EngineError, load_engine_config, substream
from .offline_ope import (OpeTrainer, extract_transitions, load_trajectories, save_trajectories,
                          train_ope, write_loss_curve)
from .online_engine import read_schedule, segment_orders, write_schedule
from .reposition import estimate_expert_matrix, load_expert_matrix, save_expert_matrix
from .simulator import (ABLATION_DISPATCH, PerturbationSpec, PolicyBundle, ScenarioConfig,
                        generate_synthetic, load_orders, load_scenario, run_ablation_suite,
                        run_episode, run_perturbation_experiment, save_orders, save_roster,
                        write_metrics_csv)
from .valuefn import NetworkSpec, ValueNetwork, load_snapshot, save_snapshot

ENV_PREFIX = "GRIDHAIL_"


def _engine_config(path: str | None) -> EngineConfig:
    cfg = load_engine_config(path) if path else EngineConfig()
    overrides = {}
    for f in fields(EngineConfig):
        raw = os.environ.get(ENV_PREFIX + f.name.upper())
        if raw is not None:
            overrides[f.name] = int(raw) if f.type == "int" else float(raw)
    return replace(cfg, **overrides) if overrides else cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"{out_dir} exists; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


class _Manifest:
    def __init__(self, command: str, args: argparse.Namespace, out_dir: Path):
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": getattr(args, "config", None),
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "outputs": [],
            "started_at": datetime.now(timezone.utc).isoformat(),
            "version": __version__,
            "kernel_backend": BACKEND,
        }
        self.out_dir = out_dir
        self.t0 = time.monotonic()

    def add_input(self, path) -> None:
        if path:
            p = Path(path)
            if p.exists():
                self.data["inputs"][str(p)] = _sha256(p)

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def write(self) -> None:
        self.data["finished_at"] = datetime.now(timezone.utc).isoformat()
        self.data["duration_s"] = round(time.monotonic() - self.t0, 3)
        (self.out_dir / "manifest.json").write_text(json.dumps(self.data, indent=2) + "\n")


def _parse_policies(values: list[str] | None) -> dict[str, str]:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--policy expects kind=name, got {item!r}")
        kind, name = item.split("=", 1)
        if kind not in ("dispatch", "reposition"):
            raise ConfigError(f"unknown policy kind {kind!r}")
        out[kind] = name
    return out


def _bundle_from_args(args) -> PolicyBundle:
    policies = _parse_policies(getattr(args, "policy", None))
    return PolicyBundle(
        dispatch=policies.get("dispatch", "v1d3"),
        reposition=policies.get("reposition", "none"),
        learner=not args.no_online,
        ensemble=not args.no_ensemble,
        strict_paper=args.strict_paper,
    )


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    scenario = load_scenario(args.scenario)
    cfg = _engine_config(args.config)
    out_dir = _prepare_out(args.out, args.force)
    manifest = _Manifest("gen-data", args, out_dir)
    manifest.add_input(args.scenario)
    manifest.add_input(args.config)

    orders, roster = generate_synthetic(scenario, args.seed)
    save_orders(orders, out_dir / "orders.csv")
    save_roster(roster, out_dir / "roster.csv")

    # bootstrap episode: myopic dispatch plus random-walk idling, providing
    # the historical option log and the expert transition statistics
    bundle = PolicyBundle(dispatch="baseline", reposition="walk", learner=False, ensemble=False)
    result = run_episode(scenario, bundle, cfg, args.seed, orders=orders, roster=roster,
                         collect_trajectories=True)
    save_trajectories(result.trajectories, out_dir / "trajectories.csv")
    moves = [(r.abs_time_s, r.from_cell, r.to_cell)
             for r in result.trajectories if r.kind == "idle" and r.to_cell != r.from_cell]
    matrix = estimate_expert_matrix(moves, scenario.grid)
    save_expert_matrix(matrix, out_dir / "expert_matrix.csv")

    for name in ("orders.csv", "roster.csv", "trajectories.csv", "expert_matrix.csv"):
        manifest.add_output(out_dir / name)
    manifest.write()
    print(f"gen-data: {len(orders)} orders, {len(roster)} drivers -> {out_dir}")
    return 0


def cmd_train_ope(args) -> int:
    scenario = load_scenario(args.scenario)
    cfg = _engine_config(args.config)
    out_dir = _prepare_out(args.out, args.force)
    manifest = _Manifest("train-ope", args, out_dir)
    for p in (args.trajectories, args.scenario, args.config):
        manifest.add_input(p)

    records = load_trajectories(args.trajectories)
    dataset = extract_transitions(records, cfg)
    for diag in dataset.rejected:
        print(f"warning: rejected {diag}", file=sys.stderr)
    spec = NetworkSpec(
        grid_width=scenario.grid.width, grid_height=scenario.grid.height,
        memory_size=args.memory_size, embed_dim=args.embed_dim,
        hidden=tuple(int(h) for h in args.hidden.split(",")) if args.hidden else (32, 128, 32),
        uses_time_input=True,
    )
    net = ValueNetwork.random_init(spec, substream(args.seed, "init"))
    trainer = OpeTrainer(net=net, lr=cfg.ope_lr, lipschitz_lambda=cfg.lipschitz_lambda,
                         batch_size=args.batch_size, max_iters=args.iters, gamma=cfg.gamma)
    curve = train_ope(dataset, trainer, seed=args.seed) if args.iters > 0 else []
    save_snapshot(net, out_dir / "snapshot.npz", cfg.gamma, cfg.discount_time_unit_s)
    write_loss_curve(curve, out_dir / "loss_curve.csv")
    manifest.add_output(out_dir / "snapshot.npz")
    manifest.add_output(out_dir / "loss_curve.csv")
    manifest.write()
    tail = f", final loss {curve[-1]:.3f}" if curve else ""
    print(f"train-ope: {len(dataset)} transitions, {args.iters} iters{tail} -> {out_dir}")
    return 0


def cmd_segment(args) -> int:
    cfg = _engine_config(args.config)
    out_dir = _prepare_out(args.out, args.force)
    manifest = _Manifest("segment", args, out_dir)
    manifest.add_input(args.orders)
    manifest.add_input(args.config)

    orders = load_orders(args.orders)
    bin_s = args.bin_s if args.bin_s else cfg.segment_bin_s
    k = args.k if args.k is not None else cfg.K_changepoints
    horizon = args.horizon if args.horizon else (float(orders.created.max()) + bin_s if len(orders) else bin_s)
    n_bins = int(np.ceil(horizon / bin_s))
    series = np.bincount((orders.created // bin_s).astype(np.int64), minlength=n_bins)[:n_bins]
    schedule = segment_orders(series, k, bin_s=bin_s)
    write_schedule(series, schedule, bin_s, out_dir / "schedule.csv")
    manifest.add_output(out_dir / "schedule.csv")
    manifest.write()
    print(f"segment: {len(series)} bins, K={k} -> {[int(p) for p in schedule.points]}")
    return 0


def _load_run_inputs(args):
    ope_net = None
    if args.snapshot:
        ope_net, _ = load_snapshot(args.snapshot)
    schedule = read_schedule(args.schedule) if args.schedule else None
    expert = load_expert_matrix(args.expert) if args.expert else None
    return ope_net, schedule, expert


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    cfg = _engine_config(args.config)
    out_dir = _prepare_out(args.out, args.force)
    manifest = _Manifest("simulate", args, out_dir)
    for p in (args.scenario, args.config, args.snapshot, args.schedule, args.expert):
        manifest.add_input(p)

    bundle = _bundle_from_args(args)
    ope_net, schedule, expert = _load_run_inputs(args)
    result = run_episode(scenario, bundle, cfg, args.seed, ope_net=ope_net, schedule=schedule,
                         expert=expert, collect_trajectories=args.trajectories,
                         collect_dumps=args.dumps, trace_cells=args.trace_values)
    write_metrics_csv([(scenario.name, bundle.dispatch, bundle.reposition, args.seed,
                        result.metrics)], out_dir / "metrics.csv")
    manifest.add_output(out_dir / "metrics.csv")
    if args.trajectories:
        save_trajectories(result.trajectories, out_dir / "trajectories.csv")
        manifest.add_output(out_dir / "trajectories.csv")
    if args.dumps:
        with open(out_dir / "assignments.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "driver_id", "order_id", "rho", "pickup_distance_cells"])
            w.writerows(result.assignment_rows)
        with open(out_dir / "repositions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "driver_id", "from_cell", "to_cell", "policy"])
            w.writerows(result.reposition_rows)
        manifest.add_output(out_dir / "assignments.csv")
        manifest.add_output(out_dir / "repositions.csv")
    if args.trace_values and result.metrics.per_cell_value_trace is not None:
        with open(out_dir / "value_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "cell", "value"])
            trace = result.metrics.per_cell_value_trace
            times = result.metrics.trace_times
            for i in range(trace.shape[0]):
                rnd = int(times[i] // cfg.dispatch_round_s)
                for c in range(trace.shape[1]):
                    w.writerow([rnd, c, repr(float(trace[i, c]))])
        manifest.add_output(out_dir / "value_trace.csv")
    manifest.write()
    m = result.metrics
    print(f"simulate: score={m.dispatch_score:.2f} answer={m.answer_rate:.3f} "
          f"completion={m.completion_rate:.3f} reposition={m.reposition_score:.5f}")
    return 0


def cmd_experiment(args) -> int:
    scenario = load_scenario(args.scenario)
    cfg = _engine_config(args.config)
    out_dir = _prepare_out(args.out, args.force)
    manifest = _Manifest(f"experiment:{args.kind}", args, out_dir)
    for p in (args.scenario, args.config, args.snapshot, args.schedule, args.expert):
        manifest.add_input(p)
    seeds = [int(s) for s in args.seeds.split(",")]
    ope_net, schedule, expert = _load_run_inputs(args)

    if args.kind == "ablation":
        dps = args.dispatch_policies.split(",") if args.dispatch_policies else list(ABLATION_DISPATCH)
        rps = args.reposition_policies.split(",") if args.reposition_policies else ["none"]
        rows = run_ablation_suite(scenario, cfg, seeds, dispatch_policies=dps,
                                  reposition_policies=rps, ope_net=ope_net,
                                  schedule=schedule, expert=expert)
        path = out_dir / "ablation.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dispatch_policy", "reposition_policy",
                        "dispatch_score_mean", "dispatch_score_std",
                        "answer_rate_mean", "answer_rate_std",
                        "completion_rate_mean", "completion_rate_std",
                        "reposition_score_mean", "reposition_score_std",
                        "per_seed_dispatch_scores"])
            for row in rows:
                ds = row.mean_std(row.dispatch_scores)
                ar = row.mean_std(row.answer_rates)
                cr = row.mean_std(row.completion_rates)
                rs = row.mean_std(row.reposition_scores)
                w.writerow([row.dispatch_policy, row.reposition_policy,
                            repr(ds[0]), repr(ds[1]), repr(ar[0]), repr(ar[1]),
                            repr(cr[0]), repr(cr[1]), repr(rs[0]), repr(rs[1]),
                            ";".join(repr(s) for s in row.dispatch_scores)])
        manifest.add_output(path)
        print(f"ablation: {len(rows)} configurations x {len(seeds)} seeds -> {path}")
    else:
        kind = "add_drivers" if args.kind == "perturb-drivers" else "add_orders"
        if scenario.perturbation is None or scenario.perturbation.kind != kind:
            grid = scenario.grid
            center = grid.cell(grid.width // 2, grid.height // 2)
            n_rounds = int(scenario.episode_horizon_s // cfg.dispatch_round_s)
            spec = PerturbationSpec(kind=kind, cell=center, start_round=n_rounds // 3)
            scenario = replace(scenario, perturbation=spec)
        bundle = _bundle_from_args(args)
        deltas = []
        for seed in seeds:
            r = run_perturbation_experiment(scenario, bundle, cfg, seed, ope_net=ope_net,
                                            schedule=schedule, expert=expert)
            deltas.append(r.delta_by_radius)
        mean_delta = np.mean(deltas, axis=0)
        path = out_dir / "perturbation_deltas.csv"
        step_rounds = max(1, int(120.0 // cfg.dispatch_round_s))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "delta_radius0", "delta_radius1", "delta_radius2"])
            for i in range(0, mean_delta.shape[0], step_rounds):
                chunk = mean_delta[i:i + step_rounds].mean(axis=0)
                w.writerow([i, repr(float(chunk[0])), repr(float(chunk[1])), repr(float(chunk[2]))])
        manifest.add_output(path)
        print(f"{args.kind}: start_round={scenario.perturbation.start_round} -> {path}")
    manifest.write()
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridhail",
                                     description="grid-city ride-hailing marketplace engine")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", help="scenario JSON file")
        p.add_argument("--config", default=None, help="engine config JSON")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="synthesize orders, roster, bootstrap log, expert matrix")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ope", help="offline policy evaluation on an option log")
    common(p)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--iters", type=int, default=50_000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--memory-size", type=int, default=20_000)
    p.add_argument("--embed-dim", type=int, default=50)
    p.add_argument("--hidden", default=None, help="comma-separated layer widths")
    p.set_defaults(func=cmd_train_ope)

    p = sub.add_parser("segment", help="changepoint segmentation of an order series")
    p.add_argument("orders", help="orders CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--bin-s", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("simulate", help="run one episode")
    common(p)
    p.add_argument("--snapshot", default=None, help="offline value snapshot (.npz)")
    p.add_argument("--schedule", default=None, help="changepoint schedule CSV")
    p.add_argument("--expert", default=None, help="expert transition matrix CSV")
    p.add_argument("--policy", action="append", metavar="KIND=NAME",
                   help="dispatch=<v1d3|baseline|greedy> reposition=<v1d3|v1d3g|expert|none>")
    p.add_argument("--no-online", action="store_true", help="disable online learning")
    p.add_argument("--no-ensemble", action="store_true", help="disable the periodic ensemble")
    p.add_argument("--strict-paper", action="store_true",
                   help="unlimited pickup radius, trip-only discounting, no start ensemble")
    p.add_argument("--trajectories", action="store_true", help="write the option log")
    p.add_argument("--dumps", action="store_true", help="write assignment/reposition dumps")
    p.add_argument("--trace-values", action="store_true", help="write per-cell value trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="ablation table or perturbation traces")
    p.add_argument("kind", choices=["ablation", "perturb-drivers", "perturb-orders"])
    common(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--snapshot", default=None)
    p.add_argument("--schedule", default=None)
    p.add_argument("--expert", default=None)
    p.add_argument("--dispatch-policies", default=None)
    p.add_argument("--reposition-policies", default=None)
    p.add_argument("--policy", action="append", metavar="KIND=NAME")
    p.add_argument("--no-online", action="store_true")
    p.add_argument("--no-ensemble", action="store_true")
    p.add_argument("--strict-paper", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
