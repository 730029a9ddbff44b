"""Command-line front end: ``hiergn <subcommand> [options]``.

Every subcommand takes ``--config FILE`` (JSON experiment config), flag
overrides and ``--seed``. Failures exit nonzero and print one JSON line
``{"error": ..., "code": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import hierarchy as hier
from . import io
from .config import ExperimentConfig
from .errors import ConfigError, FormatError, InvalidInputError, SimulationOverflowError
from .models import GraphSpec, NBodyGN
from .sim import SimConfig, init_system, simulate_trajectory
from .training import LearnedSimulator, TrainConfig, evaluate, rollout, scaling_bench, train

log = logging.getLogger("hiergn")

DATA_ROOT_ENV = "HIERGN_DATA_ROOT"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_FORMAT = 4
EXIT_VERSION = 5
EXIT_INPUT = 6
EXIT_NUMERIC = 7
EXIT_CHECK_FAILED = 8


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


# --------------------------------------------------------------------------
# subcommands


def _simulate_one(args):
    n, cfg, seed = args
    return simulate_trajectory(init_system(n, cfg, seed), cfg, seed)


def _simulate_many(n: int, cfg: SimConfig, seeds: Sequence[int], jobs: int):
    work = [(n, cfg, s) for s in seeds]
    if jobs <= 1:
        return [_simulate_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_simulate_one, work))


def cmd_generate(ns, cfg: ExperimentConfig) -> int:
    sim_cfg = cfg.sim_config()
    if ns.steps is not None:
        sim_cfg = replace(sim_cfg, n_base_steps=ns.steps)
    out = Path(ns.out) if ns.out else _data_root()
    if ns.trajectories is not None:
        out.mkdir(parents=True, exist_ok=True)
        trajs = _simulate_many(cfg.n_particles, sim_cfg, [cfg.seed + i for i in range(ns.trajectories)], ns.jobs)
        for i, t in enumerate(trajs):
            io.save_trajectory(t, out / f"traj_{i:05d}{io.TRAJ_SUFFIX}")
            if ns.csv:
                io.export_trajectory_csv(t, out / f"traj_{i:05d}.csv")
        written = trajs
    else:
        splits = {}
        for k, name in enumerate(io.SPLITS):
            count = int(cfg.dataset.get(name, 0))
            base = cfg.seed + 1_000_000 * k
            splits[name] = _simulate_many(cfg.n_particles, sim_cfg, [base + i for i in range(count)], ns.jobs)
        io.save_dataset(out, splits)
        written = [t for v in splits.values() for t in v]
    failed = [t.status for t in written if not t.ok]
    print(json.dumps({"written": len(written), "failed": len(failed), "out": str(out)}))
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_build_graph(ns, cfg: ExperimentConfig) -> int:
    traj = io.load_trajectory(ns.input)
    if not 0 <= ns.step < len(traj):
        raise InvalidInputError(f"step {ns.step} outside 0..{len(traj) - 1}")
    sys_ = traj.snapshot(ns.step)
    depth = ns.depth if ns.depth is not None else hier.choose_depth(len(sys_))
    g = hier.build_hier_graph(sys_, depth, periodic=ns.periodic)
    out = Path(ns.out) if ns.out else Path("graph.json")
    io.save_graph_json(hier.graph_to_dict(g), out)
    print(json.dumps({"out": str(out), "depth": depth, **g.edge_counts()}))
    return EXIT_OK


def _train_split(path: Path) -> list:
    return io.load_split(path / "train" if (path / "train").is_dir() else path)


def cmd_train(ns, cfg: ExperimentConfig) -> int:
    data = Path(ns.data) if ns.data else _data_root()
    dataset = _train_split(data)
    spec = cfg.graph_spec()
    tcfg = cfg.train_config()
    if ns.steps is not None:
        tcfg = replace(tcfg, total_steps=ns.steps)
    model = NBodyGN(cfg.model, hierarchical=spec.kind == "hier", charged=cfg.charged, seed=cfg.seed)
    for t in dataset:
        if t.config.force_law != cfg.force_law:
            raise InvalidInputError(
                f"dataset holds {t.config.force_law} trajectories but the config asks for {cfg.force_law}"
            )
    result = train(LearnedSimulator(model, spec), dataset, tcfg)
    out = Path(ns.out) if ns.out else Path("checkpoint.bin")
    io.save_checkpoint(model, spec, out, extra={"config": cfg.to_dict(), "skipped_steps": result.skipped})
    if ns.loss_curve:
        io.write_loss_curve(result.curve, ns.loss_curve)
    final = result.curve[-1][1] if result.curve else None
    print(json.dumps({"checkpoint": str(out), "steps": tcfg.total_steps, "final_loss": final}))
    return EXIT_OK


def cmd_rollout(ns, cfg: ExperimentConfig) -> int:
    model, spec, _ = io.load_checkpoint(ns.checkpoint)
    truth = io.load_trajectory(ns.input)
    steps = ns.steps if ns.steps is not None else len(truth) - 1
    res = rollout(LearnedSimulator(model, spec), truth.snapshot(0), steps, truth.config.dt_base, truth.config)
    out = Path(ns.out) if ns.out else Path("rollout" + io.TRAJ_SUFFIX)
    io.save_trajectory(res.trajectory, out)
    print(json.dumps({"out": str(out), "status": res.status, "graph_builds": res.graph_builds}))
    return EXIT_OK if res.status == "ok" else EXIT_NUMERIC


def cmd_eval(ns, cfg: ExperimentConfig) -> int:
    model, spec, _ = io.load_checkpoint(ns.checkpoint)
    if ns.graph:
        spec = GraphSpec.parse(ns.graph)
    test = io.load_split(ns.test_dir)
    for t in test:
        if (t.charges is not None) != model.charged:
            raise InvalidInputError(f"{t.config.force_law} test data does not match a model with charged={model.charged}")
    taus = tuple(ns.tau) if ns.tau else cfg.taus
    taus = tuple(t for t in taus if t < min(len(t_) for t_ in test)) or (min(len(t_) for t_ in test) - 1,)
    report = evaluate(LearnedSimulator(model, spec), test, taus, seed=cfg.seed, config=cfg.to_dict())
    stem = Path(ns.out) if ns.out else Path("metrics")
    csv_path, json_path = io.write_metrics(report, stem)
    print(json.dumps({"csv": str(csv_path), "json": str(json_path), **report.summary_row()}, default=float))
    return EXIT_OK


def cmd_bench(ns, cfg: ExperimentConfig) -> int:
    variant = ns.variant or cfg.graph
    sizes = [ns.n] if ns.n is not None else ns.sizes
    rows = scaling_bench(variant, sizes, repeats=ns.repeats, seed=cfg.seed)
    if ns.out:
        io.write_csv(rows, ns.out)
    for r in rows:
        print(json.dumps(r, default=float))
    return EXIT_OK


def cmd_coverage_check(ns, cfg: ExperimentConfig) -> int:
    n = ns.n if ns.n is not None else cfg.n_particles
    system = init_system(n, cfg.sim_config(), cfg.seed)
    depth = ns.depth if ns.depth is not None else hier.choose_depth(n)
    g = hier.build_hier_graph(system, depth, periodic=ns.periodic)
    report = hier.interaction_coverage_check(g)
    print(str(report))
    return EXIT_OK if report.ok else EXIT_CHECK_FAILED


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--force", choices=("gravity", "coulomb"), help="force law")
    common.add_argument("--n", type=int, help="particle count")
    common.add_argument("--model", choices=("delta", "hogn"))
    common.add_argument("--graph", help="full | knn:<k> | hier[:<depth>][:open]")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hiergn", description="Hierarchical graph networks for particle simulation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="simulate trajectories")
    g.add_argument("--trajectories", type=int, help="write this many files to --out (else train/valid/test)")
    g.add_argument("--steps", type=int, help="base steps per trajectory")
    g.add_argument("--out", help=f"output directory (default ${DATA_ROOT_ENV} or ./data)")
    g.add_argument("--csv", action="store_true", help="also export CSV copies")
    g.set_defaults(fn=cmd_generate)

    b = sub.add_parser("build-graph", parents=[common], help="dump the hierarchy of one snapshot")
    b.add_argument("--input", required=True)
    b.add_argument("--step", type=int, default=0)
    b.add_argument("--depth", type=int)
    b.add_argument("--periodic", action=argparse.BooleanOptionalAction, default=True)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_build_graph)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset root or directory of trajectory files")
    t.add_argument("--steps", type=int, help="total optimisation steps")
    t.add_argument("--out", help="checkpoint path (default checkpoint.bin)")
    t.add_argument("--loss-curve", help="CSV of (step, loss, lr)")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("rollout", parents=[common], help="autoregressive rollout from a trajectory's first state")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--steps", type=int)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_rollout)

    e = sub.add_parser("eval", parents=[common], help="rollout metrics on a test directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-dir", required=True)
    e.add_argument("--tau", type=int, action="append", help="horizon (repeatable)")
    e.add_argument("--out", help="output stem for .csv/.json (default ./metrics)")
    e.set_defaults(fn=cmd_eval)

    k = sub.add_parser("bench", parents=[common], help="time graph builds and forward passes")
    k.add_argument("--variant", help="graph spec to time (default: config graph)")
    k.add_argument("--sizes", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096], help="particle counts")
    k.add_argument("--repeats", type=int, default=3)
    k.add_argument("--out")
    k.set_defaults(fn=cmd_bench)

    c = sub.add_parser("coverage-check", parents=[common], help="verify every pair is covered once")
    c.add_argument("--depth", type=int)
    c.add_argument("--periodic", action=argparse.BooleanOptionalAction, default=True)
    c.set_defaults(fn=cmd_coverage_check)
    return p


def _resolve_config(ns) -> ExperimentConfig:
    cfg = ExperimentConfig.load(ns.config) if ns.config else ExperimentConfig()
    changes = {"seed": ns.seed, "force_law": ns.force, "model": ns.model, "graph": ns.graph}
    if ns.n is not None:
        changes["n_particles"] = ns.n
    try:
        return cfg.override(**changes)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, CliError):
        return exc.code, exc.kind
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, io.VersionError):
        return EXIT_VERSION, "version"
    if isinstance(exc, FormatError):
        return EXIT_FORMAT, "format"
    if isinstance(exc, (InvalidInputError, FileNotFoundError)):
        return EXIT_INPUT, "input"
    if isinstance(exc, (SimulationOverflowError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric"
    return EXIT_ERROR, type(exc).__name__


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if ns.jobs < 1:
            raise CliError(EXIT_USAGE, "usage", "--jobs must be at least 1")
        cfg = _resolve_config(ns)
        return ns.fn(ns, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        code, kind = _classify(exc)
        print(json.dumps({"error": kind, "code": code, "message": str(exc)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
