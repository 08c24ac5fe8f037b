"""Command line: ``crillab {gen-demos,train,sweep,evaluate,report}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import corpus, evalkit, taskforge
from .config import OUTPUT_ROOT_ENV, ExperimentConfig, load_config
from .errors import ConfigError, CrilError, InvalidArgument
from .replay import StrategyKind

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _out(args, cfg: ExperimentConfig, leaf: str) -> Path:
    return Path(args.out) if args.out else cfg.resolved_output_root() / leaf


def cmd_gen_demos(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg, "demos")
    suite = cfg.suite.build()
    out.mkdir(parents=True, exist_ok=True)
    taskforge.save_suite(suite, out / "suite.yaml")
    seed = args.seed if args.seed is not None else cfg.train.seed
    train_seed = 10 * seed + 1  # the same split run_continual collects with
    for task in suite:
        tdir = corpus.task_dir(out, task.task_id)
        if tdir.exists():
            shutil.rmtree(tdir)  # stale trajectories from a larger m would survive otherwise
        demos = corpus.collect_demos(task, cfg.train.m, train_seed)
        corpus.save_dataset(demos, out)
        print(f"task {task.task_id}: {len(demos)} trajectories, mean length {demos.mean_length:.1f} -> {tdir}")
    return EXIT_OK


def _demo_source(demo_dir: Path, suite):
    saved = taskforge.load_suite(demo_dir / "suite.yaml")
    if saved != suite:
        raise ConfigError(f"{demo_dir / 'suite.yaml'} does not match the configured suite", "suite")

    def load(task):
        return corpus.load_dataset(corpus.task_dir(demo_dir, task.task_id))
    return load


def _print_summary(record) -> None:
    n = record.n_tasks
    for i in range(1, n + 1):
        accs = " ".join(f"{record.accuracy[(i, j)]:.3f}" for j in range(1, i + 1))
        succ = sum(record.success[(i, j)] for j in range(1, i + 1)) / i
        print(f"after task {i}: accuracy [{accs}]  mean success {succ:.3f}")
    if n >= 2:
        om = record.omega()
        print(f"omega_base {om.omega_base:.3f}  omega_new {om.omega_new:.3f}  omega_all {om.omega_all:.3f}")


def _run_one(cfg: ExperimentConfig, method: str, seed: int, out: Path, demos=None):
    from .loop import run_continual

    suite = cfg.suite.build()
    source = _demo_source(Path(demos), suite) if demos else None
    train = cfg.train_config(method, seed)
    record = run_continual(suite, train, out, demo_source=source)
    print(f"{method} seed {seed} -> {out}")
    _print_summary(record)
    return record


def _parse_method(name: str) -> str:
    try:
        return StrategyKind.parse(name).value
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _config(args)
    method = _parse_method(args.method)
    seed = args.seed if args.seed is not None else cfg.train.seed
    out = _out(args, cfg, f"{method}_seed{seed}")
    _run_one(cfg, method, seed, out, args.demos)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    root = Path(args.out) if args.out else cfg.resolved_output_root()
    dirs = []
    for method in cfg.strategies:
        for seed in cfg.seeds:
            out = root / f"{method}_seed{seed}"
            _run_one(cfg, method, seed, out)
            dirs.append(out)
    if not args.no_report:
        from .report import build_report
        made = build_report(dirs, root / "report")
        print(f"report: {made['omega_md']}")
    return EXIT_OK


def _alpha_ideal(args) -> float:
    try:
        return evalkit.set_alpha_ideal(args.alpha_mode, args.joint_accuracy)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None


def cmd_evaluate(args) -> int:
    from .report import load_run, omega_markdown, omega_rows

    ideal = _alpha_ideal(args)
    runs = [load_run(d) for d in args.run_dirs]
    for run in runs:
        print(f"{run.path}: {run.method} seed {run.seed}, {run.n_tasks} tasks")
        for i in range(1, run.n_tasks + 1):
            print(f"  after task {i}: " + " ".join(f"{run.accuracy[(i, j)]:.3f}" for j in range(1, i + 1)))
    if min(r.n_tasks for r in runs) >= 2:
        print(omega_markdown(omega_rows(runs, ideal)))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report

    made = build_report(args.run_dirs, args.out, _alpha_ideal(args))
    for name, path in made.items():
        print(f"{name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crillab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="collect expert demonstrations for every task")
    g.add_argument("config", nargs="?", help="experiment YAML (defaults when omitted)")
    g.add_argument("--out", help=f"output directory (default: $"
                                 f"{OUTPUT_ROOT_ENV}/demos or runs/demos)")
    g.add_argument("--seed", type=int, help="collection seed (default: train.seed)")
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="run the continual loop for one method and seed")
    t.add_argument("config", nargs="?")
    t.add_argument("--method", required=True, help="; ".join(k.value for k in StrategyKind))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (default: <output_root>/<method>_seed<S>)")
    t.add_argument("--demos", help="directory written by gen-demos to train from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train every configured method and seed, then report")
    s.add_argument("config", nargs="?")
    s.add_argument("--out", help="root for run directories (default: output_root)")
    s.add_argument("--no-report", action="store_true")
    s.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("evaluate", cmd_evaluate, "print accuracy matrices and Omega scores"),
                                 ("report", cmd_report, "write CSV tables, markdown and plots")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("run_dirs", nargs="+")
        e.add_argument("--alpha-mode", default="unit", choices=("unit", "joint_oracle"))
        e.add_argument("--joint-accuracy", type=float)
        if name == "report":
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"crillab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"crillab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CrilError, FileNotFoundError) as exc:
        print(f"crillab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
