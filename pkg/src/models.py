"""
Pydantic Data Models.

Defines the run configuration sections (validated on load), the per-rollout
metrics record written to the metrics log, and the evaluation results
(cross-play matrix, score tables) consumed by the report layer.
"""

from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

import config

Method = Literal["dnn", "san", "mop-san", "mop-san-no-dpp", "mop-san-no-context"]
METHODS = ("dnn", "san", "mop-san", "mop-san-no-dpp", "mop-san-no-context")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# --- Run configuration sections ---

class LifConfig(_Section):
    tau: float = config.LIF_TAU
    dt: float = config.LIF_DT
    v_th: float = config.LIF_V_TH
    v_reset: float = config.LIF_V_RESET
    refractory: int = config.LIF_REFRACTORY
    T: int = config.LIF_TIMESTEPS

    @model_validator(mode="after")
    def _check(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.dt <= self.tau:
            raise ValueError("dt must lie in (0, tau]")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.v_th <= self.v_reset:
            raise ValueError("v_th must exceed v_reset")
        if self.refractory < 0:
            raise ValueError("refractory must be non-negative")
        return self


class SanConfig(_Section):
    spiking: bool = True
    hidden: List[int] = list(config.HIDDEN_SIZES)
    tau: float = config.LIF_TAU
    dt: float = config.LIF_DT
    v_th: float = config.LIF_V_TH
    v_reset: float = config.LIF_V_RESET
    refractory: int = config.LIF_REFRACTORY
    T: int = config.LIF_TIMESTEPS
    surrogate_width: float = config.SURROGATE_WIDTH

    @field_validator("hidden")
    @classmethod
    def _two_layers(cls, v):
        if len(v) != 2 or min(v) < 1:
            raise ValueError("san.hidden must list two positive widths")
        return v

    @model_validator(mode="after")
    def _check(self):
        try:
            self.lif()
        except Exception as exc:
            raise ValueError(f"invalid LIF constants: {exc}") from None
        if self.surrogate_width <= 0:
            raise ValueError("surrogate_width must be positive")
        return self

    def lif(self) -> LifConfig:
        return LifConfig(tau=self.tau, dt=self.dt, v_th=self.v_th, v_reset=self.v_reset,
                         refractory=self.refractory, T=self.T)


class ContextConfig(_Section):
    size: int = config.CONTEXT_SIZE
    token_dim: int = config.TOKEN_DIM
    heads: int = config.ATTENTION_HEADS
    head_dim: int = config.HEAD_DIM
    inner_dim: int = config.FFN_INNER_DIM
    encoder: bool = True  # False: masked mean pooling of tokens instead of attention

    @model_validator(mode="after")
    def _check(self):
        if self.size < 0:
            raise ValueError("context.size must be non-negative")
        if min(self.token_dim, self.heads, self.head_dim, self.inner_dim) < 1:
            raise ValueError("context widths must be positive")
        return self


class MopConfig(_Section):
    enabled: bool = True
    k: int = config.PERSONALITY_COUNT
    hidden: int = config.PERSONALITY_HIDDEN
    noise_enabled: bool = True

    @field_validator("k")
    @classmethod
    def _positive_k(cls, v):
        if v < 1:
            raise ValueError("mop.k must be at least 1")
        return v


class DppConfig(_Section):
    enabled: bool = True
    feature_dim: int = config.DPP_FEATURE_DIM
    hidden: int = 32
    jitter: float = config.DPP_JITTER
    beta: float = config.DPP_BETA
    meta_samples: int = config.DPP_META_SAMPLES
    outer_return: Literal["mix", "ex"] = "mix"
    direct_coef: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if self.beta < 0 or self.direct_coef < 0:
            raise ValueError("dpp.beta and dpp.direct_coef must be non-negative")
        if self.jitter < 0:
            raise ValueError("dpp.jitter must be non-negative")
        if self.meta_samples < 1:
            raise ValueError("dpp.meta_samples must be positive")
        return self


class TrainConfig(_Section):
    gamma: float = config.GAMMA
    lr: float = config.LEARNING_RATE
    batch_size: int = config.BATCH_SIZE
    rollout_length: int = config.ROLLOUT_LENGTH
    entropy_coef: float = config.ENTROPY_COEF
    value_coef: float = config.VALUE_COEF
    ppo_clip: float = config.PPO_CLIP
    epochs: int = config.PPO_EPOCHS
    clip_norm: float = config.CLIP_NORM
    normalize_advantages: bool = True
    gae_lambda: float = 1.0
    shaping: float = 0.0
    shaping_horizon: int = 0
    eta_period: int = config.ETA_UPDATE_PERIOD
    total_steps: int = 50_000
    checkpoint_interval: int = config.CHECKPOINT_INTERVAL
    max_nan_retries: int = config.MAX_NAN_RETRIES
    workers: int = 1
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("train.gamma must lie in [0, 1)")
        if self.batch_size < 1 or self.rollout_length % self.batch_size != 0:
            raise ValueError("train.batch_size must divide train.rollout_length")
        if self.rollout_length > config.ROLLOUT_LENGTH:
            raise ValueError(f"train.rollout_length is capped at {config.ROLLOUT_LENGTH}")
        if self.workers < 1 or self.rollout_length % self.workers != 0:
            raise ValueError("train.workers must divide train.rollout_length")
        if min(self.epochs, self.eta_period, self.checkpoint_interval) < 1:
            raise ValueError("epochs, eta_period and checkpoint_interval must be positive")
        if self.lr <= 0:
            raise ValueError("train.lr must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("train.gae_lambda must lie in [0, 1]")
        if self.shaping < 0 or self.shaping_horizon < 0:
            raise ValueError("train.shaping and train.shaping_horizon must be non-negative")
        return self

    def shaping_factor(self, step: int) -> float:
        """Subgoal-reward weight at `step`, annealed linearly to 0 over `shaping_horizon` steps (0 keeps it fixed)."""
        if not self.shaping_horizon:
            return self.shaping
        return self.shaping * max(0.0, 1.0 - step / self.shaping_horizon)


class EnvConfig(_Section):
    layout: Optional[str] = None
    horizon: Optional[int] = None

    @field_validator("horizon")
    @classmethod
    def _positive(cls, v):
        if v is not None and v < 1:
            raise ValueError("env.horizon must be positive")
        return v


class EvalConfig(_Section):
    episodes: int = config.EPISODES_PER_CELL
    workers: int = 1
    ablation_steps: int = config.ABLATION_STEPS
    seeds: int = config.ABLATION_SEEDS
    probe_states: int = 1000

    @model_validator(mode="after")
    def _check(self):
        if self.workers < 1:
            raise ValueError("eval.workers must be positive")
        if not 1 <= self.seeds <= len(config.POOL_NAMES):
            raise ValueError(f"eval.seeds must lie in [1, {len(config.POOL_NAMES)}]")
        return self


class RunConfig(_Section):
    name: str = "run"
    method: Method = "mop-san"
    env: EnvConfig = EnvConfig()
    san: SanConfig = SanConfig()
    context: ContextConfig = ContextConfig()
    mop: MopConfig = MopConfig()
    dpp: DppConfig = DppConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.mop.enabled and self.dpp.enabled and self.dpp.feature_dim < self.mop.k:
            raise ValueError("dpp.feature_dim must be at least mop.k")
        return self

    @property
    def dpp_active(self) -> bool:
        return self.mop.enabled and self.dpp.enabled and self.dpp.beta > 0


# Flat overrides applied on top of a config file by `--method`.
METHOD_PRESETS: Dict[str, Dict[str, str]] = {
    "dnn": {"san.spiking": "false", "mop.enabled": "false", "dpp.enabled": "false"},
    "san": {"san.spiking": "true", "mop.enabled": "false", "dpp.enabled": "false"},
    "mop-san": {"san.spiking": "true", "mop.enabled": "true", "dpp.enabled": "true",
                "context.encoder": "true"},
    "mop-san-no-dpp": {"san.spiking": "true", "mop.enabled": "true", "dpp.enabled": "true",
                       "dpp.beta": "0.0", "context.encoder": "true"},
    "mop-san-no-context": {"san.spiking": "true", "mop.enabled": "true", "dpp.enabled": "true",
                           "context.encoder": "false"},
}


# --- Training records ---

class RolloutMetrics(BaseModel):
    """One line of `metrics.jsonl`."""
    rollout: int
    step: int
    episodes: int
    mean_ep_reward: Optional[float] = None
    entropy: float
    partner_entropy: float
    dpp_reward_mean: float
    policy_loss: float
    value_loss: float
    partner_policy_loss: float
    partner_value_loss: float
    eta_grad_norm: Optional[float] = None
    kept_fraction: Optional[float] = None
    personality_usage: Optional[List[float]] = None
    shaping: float = 0.0
    recovered: bool = False


# --- Evaluation results ---

class CrossPlayMatrix(BaseModel):
    """Rows are ego agents, columns are partners (same name order)."""
    method: str
    names: List[str]
    mean: List[List[float]]
    std: List[List[float]]
    episodes: List[List[int]]
    parameter_hash: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        n = len(self.names)
        if len(set(self.names)) != n:
            raise ValueError("pool names must be unique")
        for grid in (self.mean, self.std, self.episodes):
            if len(grid) != n or any(len(row) != n for row in grid):
                raise ValueError(f"matrix must be {n}x{n}")
        if not np.all(np.isfinite(np.asarray(self.mean, dtype=float))):
            raise ValueError("scores must be finite")
        return self

    def diagonal(self) -> List[float]:
        return [self.mean[i][i] for i in range(len(self.names))]

    def row_generalization(self) -> List[float]:
        """Mean over the unseen partners of each ego agent."""
        n = len(self.names)
        if n < 2:
            return [float("nan")] * n
        return [float(np.mean([self.mean[i][j] for j in range(n) if j != i])) for i in range(n)]

    def learning_score(self) -> float:
        return float(np.mean(self.diagonal()))

    def generalization_score(self) -> float:
        return float(np.mean(self.row_generalization()))


class ScoreTable(BaseModel):
    """Rows (methods or ablation values) by seed-indexed columns."""
    title: str
    rows: List[str]
    columns: List[str]
    scores: List[List[float]]

    @model_validator(mode="after")
    def _check(self):
        if any(len(r) != len(self.columns) for r in self.scores) or len(self.scores) != len(self.rows):
            raise ValueError("table shape does not match its labels")
        return self

    def averages(self) -> List[float]:
        return [float(np.mean(r)) for r in self.scores]

    def deviations(self) -> List[float]:
        return [float(np.std(r)) for r in self.scores]
