"""
Unified Command-Line Interface.

Training (single runs and seed-indexed pools), cross-play evaluation,
ablation sweeps, report rendering and the planner oracle in a single entry
point.
"""

import argparse
import os
import sys
from pathlib import Path

from logger import setup_logger

logger = setup_logger(__name__)

# Add project root to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config
from cookgrid import CookGrid
from errors import MopSanError
from evaluation import ABLATION_AXES, ablate, crossplay, diversity_probe, load_pair, load_pool, summarize, train_pool
from models import METHODS
from planner import PlannedPolicy, RoleScript, SoupPlanner, play_scripted
from report import FORMATS, emit_report, format_result, load_results, save_result
from trainer import Trainer
from utils import load_run_config, resolve_seed


def _overrides(pairs) -> dict:
    """Turns repeated `--set key=value` options into a flat override dict."""
    flat = {}
    for item in pairs or []:
        if "=" not in item:
            logger.error(f"--set expects key=value, got '{item}'")
            sys.exit(1)
        key, value = item.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def _run_config(args, snapshot: Path = None):
    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "layout", None):
        overrides["env.layout"] = args.layout
    if getattr(args, "steps", None):
        overrides["train.total_steps"] = str(args.steps)
    path = args.config or snapshot
    return load_run_config(path, overrides=overrides, method=getattr(args, "method", None))


def _environment(cfg=None, layout=None) -> CookGrid:
    layout = layout or (cfg.env.layout if cfg is not None else None)
    horizon = cfg.env.horizon if cfg is not None else None
    return CookGrid.from_file(layout, horizon=horizon)


def train_command(args):
    """Trains one pair, or continues the run given with --resume."""
    snapshot = Path(args.resume) / "config.snapshot" if args.resume else None
    cfg = _run_config(args, snapshot=snapshot)
    seed = resolve_seed(args.seed, cfg)
    cfg.train.seed = seed
    run_dir = Path(args.resume or args.out or config.RUNS_DIR / f"{cfg.method}-{seed}")
    trainer = Trainer(cfg, run_dir, seed, env=_environment(cfg))
    metrics = trainer.train(resume=bool(args.resume))
    logger.info(f"Run directory: {run_dir} (metrics: {metrics.name})")


def pool_command(args):
    """Trains the seed-indexed pool (A..E) of one method."""
    cfg = _run_config(args)
    seed = resolve_seed(args.seed, cfg)
    names = args.names.split(",") if args.names else list(config.POOL_NAMES)
    method_dir = train_pool(cfg, args.out, _environment(cfg), base_seed=seed, names=names)
    logger.info(f"Pool written to {method_dir}")


def crossplay_command(args):
    env = _environment(layout=args.layout)
    pool = load_pool(args.pool, env, method=args.method)
    seed = resolve_seed(args.seed)
    matrix = crossplay(pool, env, episodes=args.episodes, seed=seed, workers=args.workers)
    print(format_result(matrix))
    summary = summarize(matrix)
    logger.info(f"Learning {summary['learning']:.2f} +/- {summary['learning_std']:.2f}; "
                f"generalization {summary['generalization']:.2f} +/- {summary['generalization_std']:.2f}")
    out = Path(args.out)
    save_result(matrix, out)
    for fmt in FORMATS:
        emit_report(matrix, fmt, out)


def ablate_command(args):
    cfg = _run_config(args)
    seed = resolve_seed(args.seed, cfg)
    values = None
    if args.values:
        allowed = {str(v): v for v in ABLATION_AXES.get(args.axis, ())}
        values = [allowed.get(v, v) for v in args.values.split(",")]
    env = _environment(cfg)
    tables = ablate(args.axis, cfg, Path(args.out) / "runs", env, values=values, seeds=args.seeds,
                    steps=args.steps, episodes=args.episodes, base_seed=seed)
    for table in tables:
        print(format_result(table))
        save_result(table, args.out)
        for fmt in FORMATS:
            emit_report(table, fmt, args.out)


def report_command(args):
    out = args.out or args.input
    for result in load_results(args.input):
        print(format_result(result))
        emit_report(result, args.format, out)


def plan_command(args):
    """Optimal soup count of a layout next to the role-based scripted pair."""
    env = CookGrid.from_file(args.layout, horizon=args.horizon)
    script = play_scripted(env, RoleScript(env, carrier=args.carrier))
    logger.info(f"Role script serves {script} soups in {env.horizon} steps")
    if args.skip_oracle:
        return
    planner = SoupPlanner(env)
    states = planner.enumerate_states()
    optimum = planner.solve()
    replay = play_scripted(env, PlannedPolicy(planner))
    logger.info(f"Planner: {states} counter-free joint states, optimum {optimum} soups (replay {replay})")


def probe_command(args):
    """Personality diversity of a trained MoP run."""
    env = _environment(layout=args.layout)
    pair = load_pair(args.run, env)
    divergence = diversity_probe(pair, env, states=args.states, seed=resolve_seed(args.seed))
    logger.info(f"Mean pairwise JS divergence over {args.states} states: {divergence:.4f}")


def _add_config_options(sub, method_default=None):
    sub.add_argument('--config', help='Flat key = value config file (e.g. configs/desk.cfg)')
    sub.add_argument('--method', choices=METHODS, default=method_default, help='Method preset applied on top of the config')
    sub.add_argument('--seed', type=int, help='Seed (falls back to train.seed, then $MOPSAN_SEED)')
    sub.add_argument('--layout', help='Layout file (default: layouts/simple.layout)')
    sub.add_argument('--steps', type=int, help='Override train.total_steps')
    sub.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override any config key (repeatable)')


def main():
    parser = argparse.ArgumentParser(description="MoP-SAN cooperative cooking laboratory")
    subparsers = parser.add_subparsers(dest='command', help='Command to run')

    # Train
    train_parser = subparsers.add_parser('train', help='Train one ego/partner pair')
    _add_config_options(train_parser)
    train_parser.add_argument('--out', help='Run directory (default: runs/<method>-<seed>)')
    train_parser.add_argument('--resume', metavar='RUN_DIR', help='Continue the run stored in RUN_DIR')
    train_parser.set_defaults(func=train_command)

    # Pool
    pool_parser = subparsers.add_parser('pool', help='Train the seed-indexed pool of one method')
    _add_config_options(pool_parser)
    pool_parser.add_argument('--out', required=True, help='Pool directory')
    pool_parser.add_argument('--names', help='Comma-separated pool names (default: A,B,C,D,E)')
    pool_parser.set_defaults(func=pool_command)

    # Cross-play
    cross_parser = subparsers.add_parser('crossplay', help='Evaluate every ego agent with every partner')
    cross_parser.add_argument('--pool', required=True, help='Pool directory (or its method subdirectory)')
    cross_parser.add_argument('--method', choices=METHODS, help='Method subdirectory of the pool')
    cross_parser.add_argument('--episodes', type=int, default=config.EPISODES_PER_CELL, help='Episodes per cell')
    cross_parser.add_argument('--workers', type=int, default=1, help='Parallel cell workers')
    cross_parser.add_argument('--seed', type=int, help='Evaluation seed')
    cross_parser.add_argument('--layout', help='Layout file (default: layouts/simple.layout)')
    cross_parser.add_argument('--out', default=str(config.REPORTS_DIR), help='Report directory')
    cross_parser.set_defaults(func=crossplay_command)

    # Ablate
    ablate_parser = subparsers.add_parser('ablate', help='Sweep one ablation axis')
    _add_config_options(ablate_parser)
    ablate_parser.add_argument('--axis', required=True, help=f"One of {', '.join(ABLATION_AXES)}")
    ablate_parser.add_argument('--values', help='Comma-separated subset of the axis values')
    ablate_parser.add_argument('--seeds', type=int, help='Seeds per value (default: eval.seeds)')
    ablate_parser.add_argument('--episodes', type=int, help='Episodes per cross-play cell')
    ablate_parser.add_argument('--out', default=str(config.REPORTS_DIR), help='Report directory')
    ablate_parser.set_defaults(func=ablate_command)

    # Report
    report_parser = subparsers.add_parser('report', help='Render saved results')
    report_parser.add_argument('--in', dest='input', required=True, help='Directory of saved results')
    report_parser.add_argument('--format', choices=FORMATS, default='csv', help='Output format')
    report_parser.add_argument('--out', help='Output directory (default: the input directory)')
    report_parser.set_defaults(func=report_command)

    # Plan
    plan_parser = subparsers.add_parser('plan', help='Planner oracle and scripted pair on a layout')
    plan_parser.add_argument('--layout', help='Layout file (default: layouts/simple.layout)')
    plan_parser.add_argument('--horizon', type=int, help='Override the layout horizon')
    plan_parser.add_argument('--carrier', type=int, choices=(0, 1), default=0, help='Seat of the onion carrier')
    plan_parser.add_argument('--skip-oracle', action='store_true', help='Only run the scripted pair')
    plan_parser.set_defaults(func=plan_command)

    # Probe
    probe_parser = subparsers.add_parser('probe', help='Personality diversity of a trained MoP run')
    probe_parser.add_argument('--run', required=True, help='Run directory')
    probe_parser.add_argument('--states', type=int, default=1000, help='States to sample')
    probe_parser.add_argument('--seed', type=int, help='Sampling seed')
    probe_parser.add_argument('--layout', help='Layout file (default: layouts/simple.layout)')
    probe_parser.set_defaults(func=probe_command)

    if len(sys.argv) == 1:
        parser.print_help()
        sys.exit(0)

    args = parser.parse_args()
    if not args.command:
        parser.print_help()
        return
    try:
        args.func(args)
    except MopSanError as e:
        logger.error(str(e))
        sys.exit(1)


if __name__ == "__main__":
    main()
