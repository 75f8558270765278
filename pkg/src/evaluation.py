"""
Cross-Play and Ablation Harness.

A pool is a directory `<pool>/<method>/<name>/` of training runs, one per
seed-indexed name (A..E). Cross-play pairs every ego agent with every
partner: the ego agent keeps its own MoP guidance, fed with the live history
of the partner it is actually playing with, while the partner acts from its
own frozen policy. The diagonal holds the learning-phase pairs, the
off-diagonal cells are zero-shot.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import config
from agents import AgentPair
from cookgrid import CookGrid
from dpp import personality_divergence
from errors import ConfigError, InvalidAxisError, MopSanError
from logger import setup_logger
from models import CrossPlayMatrix, RunConfig, ScoreTable
from trainer import Trainer
from utils import (build_run_config, ensure_dir, flatten_run_config, load_run_config, parallel_map,
                   parameter_hash, sample_action)

logger = setup_logger(__name__)

ABLATION_AXES: Dict[str, Tuple] = {
    "personality_k": (6, 8, 10, 12),
    "context_size": (0, 1, 3, 5),
    "dpp": ("on", "off"),
    "context_encoder": ("on", "off"),
}


@dataclass
class AgentPool:
    method: str
    names: List[str]
    pairs: List[AgentPair]
    run_dirs: List[Path] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"pool names must be unique, got {self.names}")
        if len(self.names) != len(self.pairs):
            raise ConfigError("pool names and pairs differ in length")

    def __len__(self):
        return len(self.names)

    def modules(self) -> Dict[str, object]:
        return {f"{name}/{part}": module
                for name, pair in zip(self.names, self.pairs)
                for part, module in pair.components().items()}


# --- Loading ---

def load_pair(run_dir, env: CookGrid, step: Optional[int] = None) -> AgentPair:
    """Rebuilds a pair from `<run>/config.snapshot` and its checkpoint set."""
    run_dir = Path(run_dir)
    snapshot = run_dir / "config.snapshot"
    if not snapshot.exists():
        raise ConfigError(f"missing config snapshot in {run_dir}")
    cfg = load_run_config(snapshot)
    pair = AgentPair(cfg, env.obs_dim, seed=cfg.train.seed or 0)
    pair.load(run_dir, step)
    return pair


def load_pool(pool_dir, env: CookGrid, method: Optional[str] = None) -> AgentPool:
    """
    Loads every run directory of one method. `pool_dir` may be the method
    directory itself or its parent (then `method` picks the subdirectory).
    """
    root = Path(pool_dir)
    if method is not None and (root / method).is_dir():
        root = root / method
    run_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "config.snapshot").exists()) \
        if root.is_dir() else []
    if not run_dirs:
        raise ConfigError(f"no trained runs found under {root}")
    pairs = [load_pair(d, env) for d in run_dirs]
    methods = {p.cfg.method for p in pairs}
    if len(methods) != 1:
        raise ConfigError(f"pool mixes methods {sorted(methods)}")
    logger.info(f"Loaded pool of {len(pairs)} '{methods.pop()}' pairs from {root}")
    return AgentPool(method=pairs[0].cfg.method, names=[d.name for d in run_dirs], pairs=pairs, run_dirs=run_dirs)


# --- Playing ---

def play_episode(env: CookGrid, ego: AgentPair, partner: AgentPair, rng: np.random.Generator) -> float:
    """
    One evaluation episode: ego plays seat 0, `partner`'s own partner policy
    plays seat 1. Both histories start empty and record the partner's moves.
    """
    state, (obs1, obs2) = env.reset()
    ego_history = ego.new_history()
    partner_history = partner.new_history()
    score = 0.0
    done = False
    while not done:
        guidance = ego.guidance(obs1, ego_history)
        action1, _ = sample_action(ego.ego_distribution(obs1, guidance), rng)
        action2, _ = sample_action(partner.partner_distribution(obs2, partner_history), rng)
        state, reward, done, _ = env.step(state, (action1, action2))
        ego_history.append(obs2, action2)
        partner_history.append(obs2, action2)
        score += reward
        obs1, obs2 = env.observe(state)
    return score


def _cell_job(job) -> List[float]:
    env, ego, partner, episodes, seed_seq = job
    rng = np.random.default_rng(seed_seq)
    return [play_episode(env, ego, partner, rng) for _ in range(episodes)]


def crossplay(pool: AgentPool, env: CookGrid, episodes: int = config.EPISODES_PER_CELL, seed: int = 0,
              workers: int = 1) -> CrossPlayMatrix:
    """Fills the ego x partner score matrix; every cell gets its own seed stream."""
    if episodes < 1:
        raise ConfigError(f"episodes per cell must be positive, got {episodes}")
    n = len(pool)
    before = parameter_hash(pool.modules())
    streams = np.random.SeedSequence(seed).spawn(n * n)
    jobs = [(env, pool.pairs[i], pool.pairs[j], episodes, streams[i * n + j]) for i in range(n) for j in range(n)]
    logger.info(f"Cross-play of {n}x{n} '{pool.method}' cells, {episodes} episodes each")
    if workers > 1:
        results = parallel_map(_cell_job, jobs, workers=workers)
    else:
        results = [_cell_job(job) for job in tqdm(jobs, desc=f"crossplay {pool.method}", unit="cell")]
    after = parameter_hash(pool.modules())
    if before != after:
        raise MopSanError("parameters changed during cross-play evaluation")

    mean = [[0.0] * n for _ in range(n)]
    std = [[0.0] * n for _ in range(n)]
    counts = [[0] * n for _ in range(n)]
    for cell, scores in enumerate(results):
        i, j = divmod(cell, n)
        mean[i][j] = float(np.mean(scores))
        std[i][j] = float(np.std(scores))
        counts[i][j] = len(scores)
    return CrossPlayMatrix(method=pool.method, names=list(pool.names), mean=mean, std=std,
                           episodes=counts, parameter_hash=after)


# --- Summaries ---

def summarize(matrix: CrossPlayMatrix) -> Dict[str, object]:
    diagonal = matrix.diagonal()
    rows = matrix.row_generalization()
    return {
        "method": matrix.method,
        "learning": matrix.learning_score(),
        "learning_std": float(np.std(diagonal)),
        "generalization": matrix.generalization_score(),
        "generalization_std": float(np.std(rows)),
        "diagonal": diagonal,
        "row_generalization": rows,
    }


def compare(matrices: Dict[str, CrossPlayMatrix]) -> Tuple[ScoreTable, ScoreTable]:
    """Method tables for the learning phase and the zero-shot phase."""
    if not matrices:
        raise ConfigError("nothing to compare")
    names = next(iter(matrices.values())).names
    if len(names) < 2:
        raise ConfigError("generalization needs at least two pool members")
    for method, matrix in matrices.items():
        if matrix.names != names:
            raise ConfigError(f"pool of '{method}' is named {matrix.names}, expected {names}")
    methods = list(matrices)
    learning = ScoreTable(title="learning", rows=methods, columns=list(names),
                          scores=[matrices[m].diagonal() for m in methods])
    generalization = ScoreTable(title="generalization", rows=methods, columns=list(names),
                                scores=[matrices[m].row_generalization() for m in methods])
    return learning, generalization


def diversity_probe(pair: AgentPair, env: CookGrid, states: int = 1000, seed: int = 0) -> float:
    """Mean pairwise JS divergence among personalities over states visited by random play."""
    if not pair.uses_mop:
        raise ConfigError(f"method '{pair.cfg.method}' has no personality bank")
    rng = np.random.default_rng(seed)
    observations = []
    state, (obs1, obs2) = env.reset()
    while len(observations) < states:
        observations.append(obs2)
        joint = rng.integers(0, config.NUM_ACTIONS, size=2)
        state, _, done, _ = env.step(state, joint)
        if done:
            state, (obs1, obs2) = env.reset()
        else:
            obs1, obs2 = env.observe(state)
    pers = pair.mop.mop.personality_forward(np.stack(observations))
    return personality_divergence(pers)


# --- Pools and ablations ---

def train_pool(cfg: RunConfig, pool_dir, env: CookGrid, base_seed: int = 0,
               names: Sequence[str] = config.POOL_NAMES) -> Path:
    """Trains one pair per name (seed base_seed + index) into `<pool>/<method>/<name>/`."""
    method_dir = ensure_dir(Path(pool_dir) / cfg.method)
    for index, name in enumerate(names):
        seed = base_seed + index
        run_cfg = cfg.model_copy(update={"name": name}, deep=True)
        run_cfg.train.seed = seed
        logger.info(f"Pool member {name}: method {cfg.method}, seed {seed}")
        Trainer(run_cfg, method_dir / name, seed, env=env).train()
    return method_dir


def axis_overrides(axis: str, value, base: RunConfig) -> Dict[str, str]:
    if axis not in ABLATION_AXES:
        raise InvalidAxisError(f"unknown ablation axis '{axis}'; choose from {sorted(ABLATION_AXES)}")
    if value not in ABLATION_AXES[axis]:
        raise InvalidAxisError(f"value {value!r} is not on axis '{axis}' {ABLATION_AXES[axis]}")
    if axis == "personality_k":
        return {"mop.k": str(value), "dpp.feature_dim": str(max(base.dpp.feature_dim, value))}
    if axis == "context_size":
        return {"context.size": str(value)}
    if axis == "dpp":
        beta = base.dpp.beta if base.dpp.beta > 0 else config.DPP_BETA
        return {"dpp.beta": str(beta) if value == "on" else "0.0"}
    return {"context.encoder": "true" if value == "on" else "false"}


def ablate(axis: str, base: RunConfig, out_dir, env: CookGrid, values: Optional[Sequence] = None,
           seeds: Optional[int] = None, steps: Optional[int] = None, episodes: Optional[int] = None,
           base_seed: int = 0) -> Tuple[ScoreTable, ScoreTable]:
    """
    Trains a seed-indexed pool per axis value (MoP-SAN, desk-scale step count),
    cross-plays it and returns the learning and generalization tables, one
    row per value and one column per seed.
    """
    if axis not in ABLATION_AXES:
        raise InvalidAxisError(f"unknown ablation axis '{axis}'; choose from {sorted(ABLATION_AXES)}")
    values = list(values) if values is not None else list(ABLATION_AXES[axis])
    seeds = seeds or base.eval.seeds
    steps = steps or base.eval.ablation_steps
    episodes = episodes or base.eval.episodes
    names = list(config.POOL_NAMES[:seeds])
    learning, generalization = [], []
    for value in values:
        flat = flatten_run_config(base)
        flat.update({"method": "mop-san", "mop.enabled": "true", "dpp.enabled": "true",
                     "train.total_steps": str(steps), "name": f"{axis}-{value}"})
        flat.update(axis_overrides(axis, value, base))
        cfg = build_run_config(flat)
        pool_dir = Path(out_dir) / axis / str(value)
        train_pool(cfg, pool_dir, env, base_seed=base_seed, names=names)
        matrix = crossplay(load_pool(pool_dir, env, method=cfg.method), env, episodes=episodes,
                           seed=base_seed, workers=base.eval.workers)
        learning.append(matrix.diagonal())
        generalization.append(matrix.row_generalization() if len(names) > 1 else matrix.diagonal())
        logger.info(f"{axis}={value}: learning {np.mean(learning[-1]):.1f}, "
                    f"generalization {np.mean(generalization[-1]):.1f}")
    rows = [str(v) for v in values]
    return (ScoreTable(title=f"{axis} learning", rows=rows, columns=names, scores=learning),
            ScoreTable(title=f"{axis} generalization", rows=rows, columns=names, scores=generalization))
