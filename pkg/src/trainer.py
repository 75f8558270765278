"""
Training Loop.

Per rollout: collect 2048 transitions, compute returns, update the ego agent
on the extrinsic return, update the partner (MoP on the mixture return, or
the baseline PPO partner), and every `train.eta_period` rollouts take one
meta-gradient step on the diversity feature map. The ego agent never sees
the diversity reward and the feature map never sees the ego loss: each
update only binds its own parameters onto the tape.
"""
import copy
import math
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

import autodiff as ad
import config
from agents import AgentPair, latest_checkpoint_step
from autodiff import Node, Tape
from cookgrid import CookGrid
from dpp import dpp_reward
from errors import MopSanError, NonFiniteError, NonFiniteLossError
from logger import attach_run_log, detach_run_log, setup_logger
from models import DppConfig, RolloutMetrics, RunConfig, TrainConfig
from mop import MixtureOfPersonality, mixture_policy
from optim import Adam
from rollout import RolloutBatch, RolloutCollector, check_return_recursion, collect_parallel
from utils import dump_run_config, ensure_dir, iter_jsonl, spawn_rngs

logger = setup_logger(__name__)


# --- Loss pieces ---

def _normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def _batch_stats(batch: RolloutBatch, idx: np.ndarray) -> Dict[str, float]:
    return {
        "rew_ex_mean": float(np.mean(batch.rew_ex[idx])),
        "rew_dpp_mean": float(np.mean(batch.rew_dpp[idx])),
        "adv_ex_std": float(np.std(batch.adv_ex[idx])),
        "adv_mix_std": float(np.std(batch.adv_mix[idx])),
        "obs_max": float(np.max(np.abs(batch.obs1[idx]))),
    }


def clipped_surrogate(logp_all: Node, actions: np.ndarray, old_logp: np.ndarray, adv: np.ndarray,
                      clip: float):
    """Returns (policy loss, mean entropy) for log-probabilities of shape (n, 6)."""
    logp = ad.pick(logp_all, actions)
    ratio = ad.exp(logp - old_logp)
    surrogate = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)
    policy_loss = -ad.mean(surrogate)
    entropy = -ad.mean(ad.sum(ad.exp(logp_all) * logp_all, axis=-1))
    return policy_loss, entropy


def _ensure_finite(loss: Node, what: str, batch: RolloutBatch, idx: np.ndarray):
    if not np.isfinite(loss.value):
        raise NonFiniteLossError(what, _batch_stats(batch, idx))


def _ppo_epochs(batch: RolloutBatch, cfg: TrainConfig, rng: np.random.Generator, optim: Adam,
                advantages: np.ndarray, loss_fn, what: str) -> Dict[str, float]:
    adv = _normalize(advantages) if cfg.normalize_advantages else advantages
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        for idx in batch.minibatches(cfg.batch_size, rng):
            tape = Tape()
            policy_loss, entropy, value_loss = loss_fn(tape, idx, adv[idx])
            loss = policy_loss - cfg.entropy_coef * entropy + cfg.value_coef * value_loss
            _ensure_finite(loss, what, batch, idx)
            optim.zero_grad()
            tape.backward(loss)
            optim.step()
            totals["policy_loss"] += float(policy_loss.value)
            totals["value_loss"] += float(value_loss.value)
            totals["entropy"] += float(entropy.value)
            count += 1
    return {key: value / max(count, 1) for key, value in totals.items()}


# --- Updates ---

def update_san(batch: RolloutBatch, pair: AgentPair, optim: Adam, cfg: TrainConfig,
               rng: np.random.Generator) -> Dict[str, float]:
    """Clipped-surrogate PPO on the ego actor and critic, extrinsic return only."""
    actor, critic = pair.ego.actor, pair.ego.critic

    def loss_fn(tape, idx, adv):
        logp_all = ad.log_softmax(actor.logits(tape, batch.obs1[idx], batch.guidance[idx]))
        policy_loss, entropy = clipped_surrogate(logp_all, batch.actions1[idx], batch.logp1[idx], adv, cfg.ppo_clip)
        value_loss = ad.mean(ad.square(critic(tape, batch.obs1[idx]) - batch.returns_ex[idx]))
        return policy_loss, entropy, value_loss

    return _ppo_epochs(batch, cfg, rng, optim, batch.adv_ex, loss_fn, "ego loss")


def partner_log_probs(tape: Tape, mop: MixtureOfPersonality, batch: RolloutBatch, idx: np.ndarray) -> Node:
    """log m(. | o2, c2) for the stored histories, reusing the stored noise draws."""
    noise = batch.noise[idx] if mop.noise_enabled else None
    p = mop.profile(tape, batch.hist_obs[idx], batch.hist_actions[idx], batch.hist_len[idx], noise=noise)
    mixed = mixture_policy(p, mop.bank(tape, batch.obs2[idx]))
    return ad.log(mixed)


def update_mop(batch: RolloutBatch, pair: AgentPair, optim: Adam, cfg: TrainConfig,
               rng: np.random.Generator, dpp_cfg: Optional[DppConfig] = None) -> Dict[str, float]:
    """
    PPO on the context encoder, estimator and bank, mixture return; value head b2 on o2.

    With `dpp.direct_coef` > 0 the loss also carries -direct_coef * beta *
    mean r_dpp of the bank at o2, the gradient of the diversity reward with
    respect to the bank itself. The feature map stays fixed here.
    """
    mop, critic = pair.mop.mop, pair.mop.critic
    feature_map = pair.feature_map
    direct = 0.0
    if dpp_cfg is not None and feature_map is not None:
        direct = dpp_cfg.direct_coef * pair.beta
    jitter = dpp_cfg.jitter if dpp_cfg is not None else config.DPP_JITTER

    def loss_fn(tape, idx, adv):
        logp_all = partner_log_probs(tape, mop, batch, idx)
        policy_loss, entropy = clipped_surrogate(logp_all, batch.actions2[idx], batch.logp2[idx], adv, cfg.ppo_clip)
        if direct:
            diversity = dpp_reward(tape, feature_map(tape, mop.bank(tape, batch.obs2[idx])), jitter)
            policy_loss = policy_loss - direct * ad.mean(diversity)
        value_loss = ad.mean(ad.square(critic(tape, batch.obs2[idx]) - batch.returns_mix[idx]))
        return policy_loss, entropy, value_loss

    stats = _ppo_epochs(batch, cfg, rng, optim, batch.adv_mix, loss_fn, "partner loss")
    if direct:
        feature_map.zero_grad()
    return stats


def update_partner(batch: RolloutBatch, pair: AgentPair, optim: Adam, cfg: TrainConfig,
                   rng: np.random.Generator) -> Dict[str, float]:
    """PPO on the baseline partner actor-critic."""
    actor, critic = pair.partner.actor, pair.partner.critic

    def loss_fn(tape, idx, adv):
        logp_all = actor.log_probs(tape, batch.obs2[idx])
        policy_loss, entropy = clipped_surrogate(logp_all, batch.actions2[idx], batch.logp2[idx], adv, cfg.ppo_clip)
        value_loss = ad.mean(ad.square(critic(tape, batch.obs2[idx]) - batch.returns_mix[idx]))
        return policy_loss, entropy, value_loss

    return _ppo_epochs(batch, cfg, rng, optim, batch.adv_mix, loss_fn, "partner loss")


def _chunks(indices: np.ndarray, size: int = 256):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def importance_ratios(batch: RolloutBatch, mop: MixtureOfPersonality) -> np.ndarray:
    """m_current(a2 | o2, c2) / m_behaviour(a2 | o2, c2) for every transition."""
    logp = np.zeros(len(batch))
    for idx in _chunks(np.arange(len(batch))):
        logp_all = partner_log_probs(Tape(record=False), mop, batch, idx)
        logp[idx] = logp_all.value[np.arange(len(idx)), batch.actions2[idx]]
    return np.exp(logp - batch.logp2)


def _flat_grads(params) -> List[np.ndarray]:
    return [p.grad.copy() for p in params]


def update_dpp_eta(batch: RolloutBatch, pair: AgentPair, old_mop_state: Dict[str, np.ndarray],
                   optim: Adam, cfg: RunConfig, rng: np.random.Generator) -> Dict[str, float]:
    """
    One meta-gradient step on the feature map parameters.

    g       = grad_phi' mean_t(ratio_t * G_t) over transitions with bounded ratios
    w_t     = g . grad_phi log m_phi_old(a2_t)           (subsample of transitions)
    c_s     = lr * beta / |S| * sum_{t <= s, same episode} w_t gamma^(s - t)
    grad_eta = sum_s c_s grad_eta r_dpp_s(eta)

    The feature map is moved along +grad_eta (towards higher extrinsic return).
    """
    mop_module = pair.mop
    feature_map = pair.feature_map
    mop = mop_module.mop
    beta = pair.beta
    returns = batch.returns_mix if cfg.dpp.outer_return == "mix" else batch.returns_ex
    ratios = importance_ratios(batch, mop)
    log_ratio = np.log(np.maximum(ratios, 1e-300))
    kept = np.flatnonzero(np.abs(log_ratio) <= config.IMPORTANCE_LOG_BOUND)
    metrics = {"eta_grad_norm": 0.0, "kept_fraction": len(kept) / max(len(batch), 1)}
    if beta == 0.0 or len(kept) == 0:
        for p in feature_map.parameters():
            p.zero_grad()
        return metrics

    params = mop.parameters()
    mop.zero_grad()
    for idx in _chunks(kept):
        tape = Tape()
        logp = ad.pick(partner_log_probs(tape, mop, batch, idx), batch.actions2[idx])
        objective = ad.sum(ad.exp(logp - batch.logp2[idx]) * returns[idx]) * (1.0 / len(kept))
        tape.backward(objective)
    outer = _flat_grads(params)
    mop.zero_grad()

    old = copy.deepcopy(mop)
    old.load_state_dict(old_mop_state)
    old_params = old.parameters()
    sample = np.sort(rng.choice(kept, size=min(cfg.dpp.meta_samples, len(kept)), replace=False))
    weights = np.zeros(len(sample))
    for n, t in enumerate(sample):
        old.zero_grad()
        tape = Tape()
        logp = ad.pick(partner_log_probs(tape, old, batch, np.array([t])), batch.actions2[[t]])
        tape.backward(ad.sum(logp))
        weights[n] = float(np.sum([np.sum(g * p.grad) for g, p in zip(outer, old_params)]))

    gamma = cfg.train.gamma
    coeffs = np.zeros(len(batch))
    for w, t in zip(weights, sample):
        discount = 1.0
        for s in range(t, len(batch)):
            coeffs[s] += w * discount
            if batch.dones[s] or batch.segment_end[s]:
                break
            discount *= gamma
    coeffs *= cfg.train.lr * beta / len(sample)

    feature_map.zero_grad()
    tape = Tape()
    rewards = dpp_reward(tape, feature_map(tape, batch.pers2), cfg.dpp.jitter)
    tape.backward(ad.sum(rewards * coeffs))
    for p in feature_map.parameters():
        p.grad = -p.grad
    metrics["eta_grad_norm"] = optim.step()
    metrics["meta_samples"] = len(sample)
    return metrics


# --- Loop ---

class Trainer:
    def __init__(self, cfg: RunConfig, run_dir, seed: int, env: Optional[CookGrid] = None):
        self.cfg = cfg
        self.run_dir = ensure_dir(run_dir)
        self.seed = seed
        self.env = env or CookGrid.from_file(cfg.env.layout, horizon=cfg.env.horizon)
        self.pair = AgentPair(cfg, self.env.obs_dim, seed)
        tc = cfg.train
        self.ego_optim = Adam(self.pair.ego.parameters(), lr=tc.lr, clip_norm=tc.clip_norm)
        self.partner_optim = Adam(self.pair.partner_module().parameters(), lr=tc.lr, clip_norm=tc.clip_norm)
        self.eta_optim = None
        if self.pair.feature_map is not None:
            self.eta_optim = Adam(self.pair.feature_map.parameters(), lr=tc.lr, clip_norm=tc.clip_norm)
        worker_rngs = spawn_rngs(seed + 1, tc.workers)
        self.collectors = [RolloutCollector(CookGrid(self.env.layout, self.env.horizon), self.pair, rng)
                           for rng in worker_rngs]
        self.rollout = 0
        self.step = 0

    def _rngs(self, rollout: int):
        return [np.random.default_rng([self.seed, rollout, stream]) for stream in range(2)]

    def _optimizers(self) -> Dict[str, Adam]:
        opts = {"ego": self.ego_optim, "partner": self.partner_optim}
        if self.eta_optim is not None:
            opts["eta"] = self.eta_optim
        return opts

    def _snapshot(self):
        return self.pair.state_dict(), {name: opt.state_dict() for name, opt in self._optimizers().items()}

    def _restore(self, snapshot):
        weights, moments = snapshot
        self.pair.load_state_dict(weights)
        for name, opt in self._optimizers().items():
            opt.load_state_dict(moments[name])

    def resume(self) -> int:
        step = latest_checkpoint_step(self.run_dir)
        self.pair.load(self.run_dir, step)
        self.step = step
        self.rollout = step // self.cfg.train.rollout_length
        metrics_path = self.run_dir / "metrics.jsonl"
        if metrics_path.exists():
            # Records past the checkpoint get replayed
            kept = [line for line in iter_jsonl(metrics_path)
                    if RolloutMetrics.model_validate_json(line).step <= step]
            metrics_path.write_text("".join(kept), encoding="utf-8")
        logger.info(f"Resuming {self.run_dir} from step {step} (rollout {self.rollout})")
        return step

    def run_rollout(self) -> RolloutMetrics:
        tc = self.cfg.train
        update_rng, meta_rng = self._rngs(self.rollout)
        shaping = tc.shaping_factor(self.step)
        for collector in self.collectors:
            collector.pair = self.pair
            collector.shaping = shaping
        batch, self.collectors = collect_parallel(self.collectors, tc.rollout_length, tc.gamma, tc.workers,
                                                  tc.gae_lambda)
        check_return_recursion(batch, tc.gamma)

        eta_due = self.eta_optim is not None and (self.rollout + 1) % tc.eta_period == 0
        old_mop_state = self.pair.mop.mop.state_dict() if eta_due else None

        ego = update_san(batch, self.pair, self.ego_optim, tc, update_rng)
        if self.pair.uses_mop:
            partner = update_mop(batch, self.pair, self.partner_optim, tc, update_rng, self.cfg.dpp)
        else:
            partner = update_partner(batch, self.pair, self.partner_optim, tc, update_rng)
        meta = {}
        if eta_due:
            meta = update_dpp_eta(batch, self.pair, old_mop_state, self.eta_optim, self.cfg, meta_rng)

        for name, module in self.pair.components().items():
            if not all(np.all(np.isfinite(p.value)) for p in module.parameters()):
                raise NonFiniteError(f"non-finite parameters in component '{name}'")

        self.step += len(batch)
        self.rollout += 1
        episodes = batch.episode_rewards
        return RolloutMetrics(
            rollout=self.rollout,
            step=self.step,
            episodes=len(episodes),
            mean_ep_reward=float(np.mean(episodes)) if episodes else None,
            entropy=ego["entropy"],
            partner_entropy=partner["entropy"],
            dpp_reward_mean=float(np.mean(batch.rew_dpp)),
            policy_loss=ego["policy_loss"],
            value_loss=ego["value_loss"],
            partner_policy_loss=partner["policy_loss"],
            partner_value_loss=partner["value_loss"],
            eta_grad_norm=meta.get("eta_grad_norm"),
            kept_fraction=meta.get("kept_fraction"),
            personality_usage=[float(x) for x in batch.profiles.mean(axis=0)] if self.pair.uses_mop else None,
            shaping=shaping,
        )

    def train(self, resume: bool = False) -> Path:
        """Runs to `train.total_steps`; returns the metrics log path."""
        tc = self.cfg.train
        (self.run_dir / "config.snapshot").write_text(dump_run_config(self.cfg), encoding="utf-8")
        metrics_path = self.run_dir / "metrics.jsonl"
        if resume:
            self.resume()
        elif metrics_path.exists():
            metrics_path.unlink()
        handler = attach_run_log(self.run_dir / "train.log")
        total_rollouts = math.ceil(tc.total_steps / tc.rollout_length)
        logger.info(f"Training {self.cfg.method} (seed {self.seed}) for {total_rollouts} rollouts into {self.run_dir}")
        failures = 0
        try:
            with open(metrics_path, "a", encoding="utf-8") as log_file:
                progress = tqdm(total=total_rollouts, initial=self.rollout, desc=f"train {self.cfg.name}", unit="rollout")
                while self.rollout < total_rollouts:
                    snapshot = self._snapshot()
                    try:
                        record = self.run_rollout()
                    except NonFiniteError as exc:
                        failures += 1
                        self._restore(snapshot)
                        logger.warning(f"Rollout {self.rollout + 1}: {exc} (attempt {failures}/{tc.max_nan_retries})")
                        if failures >= tc.max_nan_retries:
                            self.pair.save(self.run_dir, self.step)
                            raise MopSanError(
                                f"aborting after {failures} consecutive non-finite updates; "
                                f"last good checkpoint at step {self.step}") from exc
                        continue
                    record.recovered = failures > 0
                    failures = 0
                    log_file.write(record.model_dump_json() + "\n")
                    log_file.flush()
                    progress.update(1)
                    if record.mean_ep_reward is not None:
                        progress.set_postfix(reward=f"{record.mean_ep_reward:.1f}")
                    if self.rollout % tc.checkpoint_interval == 0 or self.rollout == total_rollouts:
                        self.pair.save(self.run_dir, self.step)
                progress.close()
        finally:
            detach_run_log(handler)
        logger.info(f"Finished at step {self.step}; metrics in {metrics_path}")
        return metrics_path


def train(cfg: RunConfig, run_dir, seed: int, resume: bool = False, env: Optional[CookGrid] = None) -> Trainer:
    trainer = Trainer(cfg, run_dir, seed, env=env)
    trainer.train(resume=resume)
    return trainer
