"""
Rollout Collection and Returns.

A `RolloutCollector` owns one environment, the running episode and the
partner history, so consecutive rollouts continue the same episode stream.
Every step records both observations, the guidance fed to the ego actor,
both actions with their log-probabilities, the extrinsic, diversity and
mixture rewards, both value estimates and the partner-history snapshot and
noise draw needed to re-evaluate the partner policy during the update.

The extrinsic reward used for training adds `shaping` times the subgoal
reward reported by the environment; finished-episode scores stay sparse.
"""
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from agents import AgentPair
from cookgrid import CookGrid
from errors import MopSanError
from utils import parallel_map


@dataclass
class RolloutBatch:
    obs1: np.ndarray
    obs2: np.ndarray
    guidance: np.ndarray
    actions1: np.ndarray
    actions2: np.ndarray
    logp1: np.ndarray
    logp2: np.ndarray
    probs1: np.ndarray
    probs2: np.ndarray
    rew_ex: np.ndarray
    rew_dpp: np.ndarray
    rew_mix: np.ndarray
    values1: np.ndarray
    values2: np.ndarray
    dones: np.ndarray
    hist_obs: np.ndarray
    hist_actions: np.ndarray
    hist_len: np.ndarray
    noise: np.ndarray
    pers2: np.ndarray
    profiles: np.ndarray
    segment_end: np.ndarray
    bootstrap1: np.ndarray
    bootstrap2: np.ndarray
    returns_ex: Optional[np.ndarray] = None
    returns_mix: Optional[np.ndarray] = None
    adv_ex: Optional[np.ndarray] = None
    adv_mix: Optional[np.ndarray] = None
    episode_rewards: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.rew_ex)

    @classmethod
    def concat(cls, batches: Sequence["RolloutBatch"]) -> "RolloutBatch":
        values = {}
        for f in fields(cls):
            parts = [getattr(b, f.name) for b in batches]
            if f.name == "episode_rewards":
                values[f.name] = [r for part in parts for r in part]
            elif any(p is None for p in parts):
                values[f.name] = None
            else:
                values[f.name] = np.concatenate(parts, axis=0)
        return cls(**values)

    def minibatches(self, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]


def _discounted(rewards: np.ndarray, dones: np.ndarray, segment_end: np.ndarray,
                bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    returns = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if segment_end[t]:
            running = bootstrap[t]
        running = rewards[t] + gamma * running * (1.0 - dones[t])
        returns[t] = running
    return returns


def _gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, segment_end: np.ndarray,
         bootstrap: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    advantages = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if segment_end[t]:
            next_value, running = bootstrap[t], 0.0
        else:
            next_value = values[t + 1]
        alive = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * alive - values[t]
        running = delta + gamma * lam * alive * running
        advantages[t] = running
    return advantages


def compute_returns(batch: RolloutBatch, gamma: float = config.GAMMA, lam: float = 1.0) -> RolloutBatch:
    """
    Fills G^ex and G^mix, resetting at episode ends, and the advantages.

    With `lam` = 1 the advantages are G - V; below 1 they are the
    lambda-weighted sums of one-step TD errors. The critics always regress
    onto G.
    """
    batch.returns_ex = _discounted(batch.rew_ex, batch.dones, batch.segment_end, batch.bootstrap1, gamma)
    batch.returns_mix = _discounted(batch.rew_mix, batch.dones, batch.segment_end, batch.bootstrap2, gamma)
    if lam >= 1.0:
        batch.adv_ex = batch.returns_ex - batch.values1
        batch.adv_mix = batch.returns_mix - batch.values2
    else:
        ends = (batch.dones, batch.segment_end)
        batch.adv_ex = _gae(batch.rew_ex, batch.values1, *ends, batch.bootstrap1, gamma, lam)
        batch.adv_mix = _gae(batch.rew_mix, batch.values2, *ends, batch.bootstrap2, gamma, lam)
    return batch


def check_return_recursion(batch: RolloutBatch, gamma: float, tol: float = 1e-9):
    """Raises unless G_t = r_t + gamma * G_{t+1} * (1 - done_t) holds within segments."""
    for returns, rewards, boot in ((batch.returns_ex, batch.rew_ex, batch.bootstrap1),
                                   (batch.returns_mix, batch.rew_mix, batch.bootstrap2)):
        following = np.where(batch.segment_end, boot, np.append(returns[1:], 0.0))
        expected = rewards + gamma * following * (1.0 - batch.dones)
        gap = np.max(np.abs(returns - expected) / np.maximum(1.0, np.abs(expected))) if len(returns) else 0.0
        if gap > tol:
            raise MopSanError(f"return recursion violated (max relative gap {gap:.3e})")


class RolloutCollector:
    def __init__(self, env: CookGrid, pair: AgentPair, rng: np.random.Generator):
        self.env = env
        self.pair = pair
        self.rng = rng
        self.state, (self.obs1, self.obs2) = env.reset()
        self.history = pair.new_history()
        self.episode_reward = 0.0
        self.shaping = 0.0

    def collect(self, steps: int) -> RolloutBatch:
        env, pair, rng = self.env, self.pair, self.rng
        dim = env.obs_dim
        size = pair.context_size
        k = pair.mop.mop.k if pair.uses_mop else 0
        beta = pair.beta
        b = {
            "obs1": np.zeros((steps, dim)), "obs2": np.zeros((steps, dim)),
            "guidance": np.zeros((steps, config.NUM_ACTIONS)),
            "actions1": np.zeros(steps, dtype=np.int64), "actions2": np.zeros(steps, dtype=np.int64),
            "logp1": np.zeros(steps), "logp2": np.zeros(steps),
            "probs1": np.zeros((steps, config.NUM_ACTIONS)), "probs2": np.zeros((steps, config.NUM_ACTIONS)),
            "rew_ex": np.zeros(steps), "rew_dpp": np.zeros(steps), "rew_mix": np.zeros(steps),
            "values1": np.zeros(steps), "values2": np.zeros(steps), "dones": np.zeros(steps),
            "hist_obs": np.zeros((steps, size, dim)), "hist_actions": np.zeros((steps, size), dtype=np.int64),
            "hist_len": np.zeros(steps, dtype=np.int64), "noise": np.zeros((steps, k)),
            "pers2": np.zeros((steps, k, config.NUM_ACTIONS)), "profiles": np.zeros((steps, k)),
            "segment_end": np.zeros(steps, dtype=bool), "bootstrap1": np.zeros(steps), "bootstrap2": np.zeros(steps),
        }
        finished: List[float] = []
        for t in range(steps):
            b["obs1"][t], b["obs2"][t] = self.obs1, self.obs2
            if size:
                b["hist_obs"][t], b["hist_actions"][t], b["hist_len"][t] = self.history.arrays()
            out = pair.joint_step(self.obs1, self.obs2, self.history, rng)
            self.state, reward, done, info = env.step(self.state, (out.action1, out.action2))
            self.history.append(self.obs2, out.action2)

            b["guidance"][t] = out.guidance
            b["actions1"][t], b["actions2"][t] = out.action1, out.action2
            b["logp1"][t], b["logp2"][t] = out.logp1, out.logp2
            b["probs1"][t], b["probs2"][t] = out.probs1, out.probs2
            b["values1"][t], b["values2"][t] = out.value1, out.value2
            if out.profile is not None:
                b["profiles"][t] = out.profile
                b["pers2"][t] = out.pers2
                if out.noise is not None:
                    b["noise"][t] = out.noise
            b["rew_ex"][t] = reward + self.shaping * info["shaped"]
            b["rew_dpp"][t] = out.dpp_reward
            b["rew_mix"][t] = b["rew_ex"][t] + beta * out.dpp_reward
            b["dones"][t] = float(done)

            self.episode_reward += reward
            if done:
                finished.append(self.episode_reward)
                self.episode_reward = 0.0
                self.state, (self.obs1, self.obs2) = env.reset()
                self.history.clear()
            else:
                self.obs1, self.obs2 = env.observe(self.state)

        b["segment_end"][-1] = True
        if not b["dones"][-1]:
            b["bootstrap1"][-1], b["bootstrap2"][-1] = pair.values(self.obs1, self.obs2)
        return RolloutBatch(**b, episode_rewards=finished)


def collect_rollout(env: CookGrid, pair: AgentPair, steps: int, rng: np.random.Generator,
                    collector: Optional[RolloutCollector] = None) -> RolloutBatch:
    """Collects `steps` transitions (a fresh episode unless a collector is passed)."""
    collector = collector or RolloutCollector(env, pair, rng)
    return collector.collect(steps)


def _collect_job(job: Tuple[RolloutCollector, int]) -> Tuple[RolloutBatch, RolloutCollector]:
    collector, steps = job
    batch = collector.collect(steps)
    return batch, collector


def collect_parallel(collectors: List[RolloutCollector], steps: int, gamma: float,
                     workers: int, lam: float = 1.0) -> Tuple[RolloutBatch, List[RolloutCollector]]:
    """
    Splits `steps` evenly over the collectors (one per worker) and returns the
    concatenated batch with returns computed per segment.
    """
    share = steps // len(collectors)
    results = parallel_map(_collect_job, [(c, share) for c in collectors], workers=workers)
    batches = [compute_returns(batch, gamma, lam) for batch, _ in results]
    return RolloutBatch.concat(batches), [c for _, c in results]
