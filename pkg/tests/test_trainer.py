import json
import math

import numpy as np
import pytest

import autodiff as ad
import config
import trainer as trainer_module
from agents import AgentPair
from autodiff import Tape
from conftest import tiny_config
from dpp import dpp_reward
from errors import MopSanError, NonFiniteError, NonFiniteLossError
from evaluation import play_episode
from models import RolloutMetrics
from optim import Adam
from rollout import RolloutBatch, collect_rollout, compute_returns
from trainer import (Trainer, clipped_surrogate, importance_ratios, partner_log_probs, update_dpp_eta, update_mop,
                     update_san)
from utils import load_run_config, parameter_hash, sample_action


def synthetic_batch(obs, actions, logp, returns, values=None):
    """Single-step episodes without a partner history."""
    n, dim = obs.shape
    zeros = np.zeros(n)
    values = zeros if values is None else values
    batch = RolloutBatch(
        obs1=obs, obs2=obs, guidance=np.zeros((n, 6)), actions1=actions, actions2=actions,
        logp1=logp, logp2=logp, probs1=np.zeros((n, 6)), probs2=np.zeros((n, 6)),
        rew_ex=returns, rew_dpp=zeros, rew_mix=returns, values1=values, values2=zeros, dones=np.ones(n),
        hist_obs=np.zeros((n, 0, dim)), hist_actions=np.zeros((n, 0), dtype=np.int64),
        hist_len=np.zeros(n, dtype=np.int64), noise=np.zeros((n, 0)), pers2=np.zeros((n, 0, 6)),
        profiles=np.zeros((n, 0)), segment_end=np.ones(n, dtype=bool), bootstrap1=zeros, bootstrap2=zeros,
    )
    batch.returns_ex = batch.returns_mix = returns
    batch.adv_ex = batch.adv_mix = returns - values
    return batch


def policy_entropy(pair, obs):
    probs = pair.ego.actor.distribution(Tape(record=False), obs, np.zeros((len(obs), 6))).value
    return float(np.mean(-(probs * np.log(probs)).sum(axis=-1)))


def sampled_batch(pair, obs, rng, reward_fn):
    guidance = np.zeros((len(obs), 6))
    probs = pair.ego.actor.distribution(Tape(record=False), obs, guidance).value
    actions = np.array([sample_action(p, rng)[0] for p in probs])
    values = pair.ego.critic(Tape(record=False), obs).value
    logp = np.log(probs[np.arange(len(obs)), actions])
    return synthetic_batch(obs, actions, logp, reward_fn(actions), values)


@pytest.fixture
def learned_batch(tiny_env, tiny_cfg):
    pair = AgentPair(tiny_cfg, tiny_env.obs_dim, seed=0)
    batch = compute_returns(collect_rollout(tiny_env, pair, 64, np.random.default_rng(0)), tiny_cfg.train.gamma)
    return pair, batch


def test_zero_advantage_surrogate_has_no_policy_gradient(rng):
    pair = AgentPair(tiny_config("dnn"), 4, seed=0)
    obs = rng.standard_normal((8, 4))
    tape = Tape()
    logp_all = pair.ego.actor.log_probs(tape, obs, np.zeros((8, 6)))
    actions = np.arange(8) % 6
    policy_loss, entropy = clipped_surrogate(logp_all, actions, logp_all.value[np.arange(8), actions],
                                             np.zeros(8), 0.2)
    assert float(policy_loss.value) == 0.0
    tape.backward(policy_loss)
    assert all(np.all(p.grad == 0.0) for p in pair.ego.actor.parameters())
    assert float(entropy.value) == pytest.approx(math.log(6), rel=0.05)


def test_entropy_bonus_alone_raises_entropy(rng):
    cfg = tiny_config("dnn", train__lr=1e-3)
    pair = AgentPair(cfg, 4, seed=0)
    pair.ego.actor.readout.bias.value[:] = [3.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    obs = rng.standard_normal((64, 4))
    before = policy_entropy(pair, obs)
    batch = sampled_batch(pair, obs, rng, lambda actions: np.zeros(len(actions)))
    batch.adv_ex = np.zeros(64)
    batch.returns_ex = batch.values1.copy()
    optim = Adam(pair.ego.parameters(), lr=cfg.train.lr, clip_norm=cfg.train.clip_norm)
    update_san(batch, pair, optim, cfg.train, rng)
    assert policy_entropy(pair, obs) > before


def test_bandit_learns_the_paying_action():
    cfg = tiny_config("san", train__lr=0.01)
    pair = AgentPair(cfg, 4, seed=0)
    optim = Adam(pair.ego.parameters(), lr=cfg.train.lr, clip_norm=cfg.train.clip_norm)
    rng = np.random.default_rng(0)
    obs = np.tile([1.0, 0.0, -1.0, 0.5], (64, 1))
    for _ in range(200):
        batch = sampled_batch(pair, obs, rng, lambda actions: (actions == 0).astype(np.float64))
        update_san(batch, pair, optim, cfg.train, rng)
    probs = pair.ego.actor.distribution(Tape(record=False), obs[:1], np.zeros((1, 6))).value[0]
    assert probs[0] > 0.9


def test_non_finite_loss_reports_batch_statistics(rng):
    cfg = tiny_config("dnn")
    pair = AgentPair(cfg, 4, seed=0)
    batch = sampled_batch(pair, rng.standard_normal((64, 4)), rng, lambda actions: np.zeros(len(actions)))
    batch.returns_ex = np.full(64, np.nan)
    with pytest.raises(NonFiniteLossError) as exc:
        update_san(batch, pair, Adam(pair.ego.parameters()), cfg.train, rng)
    assert set(exc.value.stats) >= {"rew_ex_mean", "adv_ex_std", "obs_max"}


def test_partner_update_raises_taken_action_log_probs(learned_batch):
    pair, batch = learned_batch
    cfg = tiny_config(train__normalize_advantages="false", train__entropy_coef=0.0, train__batch_size=64)
    batch.adv_mix = np.ones(len(batch))
    mop = pair.mop.mop
    idx = np.arange(len(batch))

    def taken_log_prob():
        logp_all = partner_log_probs(Tape(record=False), mop, batch, idx).value
        return float(np.mean(logp_all[idx, batch.actions2]))

    before = taken_log_prob()
    update_mop(batch, pair, Adam(pair.mop.parameters(), lr=cfg.train.lr), cfg.train, np.random.default_rng(0))
    assert taken_log_prob() > before


def test_partner_loss_reaches_every_mop_component(learned_batch):
    pair, batch = learned_batch
    mop = pair.mop.mop
    mop.zero_grad()
    pair.ego.zero_grad()
    tape = Tape()
    idx = np.arange(len(batch))
    tape.backward(ad.sum(ad.pick(partner_log_probs(tape, mop, batch, idx), batch.actions2)))
    for part in (mop.encoder, mop.estimator.personality_head, mop.estimator.noise_head, mop.bank):
        assert any(np.any(p.grad != 0.0) for p in part.parameters()), type(part).__name__
    assert all(np.all(p.grad == 0.0) for p in pair.ego.parameters())


def test_each_update_touches_only_its_own_parameters(learned_batch, tiny_cfg):
    pair, batch = learned_batch
    rng = np.random.default_rng(0)
    partner_and_dpp = {"mop": pair.mop, "dpp": pair.feature_map}
    before = parameter_hash(partner_and_dpp)
    update_san(batch, pair, Adam(pair.ego.parameters()), tiny_cfg.train, rng)
    assert parameter_hash(partner_and_dpp) == before

    ego_and_dpp = {"san": pair.ego, "dpp": pair.feature_map}
    before = parameter_hash(ego_and_dpp)
    update_mop(batch, pair, Adam(pair.mop.parameters()), tiny_cfg.train, rng)
    assert parameter_hash(ego_and_dpp) == before


def test_unchanged_partner_has_unit_importance_ratios(learned_batch):
    pair, batch = learned_batch
    np.testing.assert_allclose(importance_ratios(batch, pair.mop.mop), 1.0, atol=1e-9)


def test_meta_gradient_moves_only_the_feature_map(learned_batch, tiny_cfg):
    pair, batch = learned_batch
    old_state = pair.mop.mop.state_dict()
    update_mop(batch, pair, Adam(pair.mop.parameters()), tiny_cfg.train, np.random.default_rng(0))
    others = {"san": pair.ego, "mop": pair.mop}
    before_others = parameter_hash(others)
    before_eta = parameter_hash({"dpp": pair.feature_map})
    optim = Adam(pair.feature_map.parameters(), lr=tiny_cfg.train.lr)
    metrics = update_dpp_eta(batch, pair, old_state, optim, tiny_cfg, np.random.default_rng(1))
    assert metrics["kept_fraction"] == 1.0 and metrics["meta_samples"] == 8
    assert metrics["eta_grad_norm"] > 0.0 and math.isfinite(metrics["eta_grad_norm"])
    assert parameter_hash({"dpp": pair.feature_map}) != before_eta
    assert parameter_hash(others) == before_others


def test_zero_beta_meta_gradient_is_exactly_zero(tiny_env):
    cfg = tiny_config(dpp__beta=0.0)
    pair = AgentPair(cfg, tiny_env.obs_dim, seed=0)
    batch = compute_returns(collect_rollout(tiny_env, pair, 64, np.random.default_rng(0)), cfg.train.gamma)
    before = parameter_hash({"dpp": pair.feature_map})
    optim = Adam(pair.feature_map.parameters())
    metrics = update_dpp_eta(batch, pair, pair.mop.mop.state_dict(), optim, cfg, np.random.default_rng(0))
    assert metrics["eta_grad_norm"] == 0.0 and optim.step_count == 0
    assert all(np.all(p.grad == 0.0) for p in pair.feature_map.parameters())
    assert parameter_hash({"dpp": pair.feature_map}) == before


def read_metrics(path):
    return [RolloutMetrics.model_validate_json(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_tiny_training_run_writes_its_artifacts(tmp_path, tiny_env, tiny_cfg):
    metrics_path = Trainer(tiny_cfg, tmp_path / "run", seed=0, env=tiny_env).train()
    run_dir = tmp_path / "run"
    records = read_metrics(metrics_path)
    assert [r.step for r in records] == [64, 128]
    assert all(r.eta_grad_norm is not None and len(r.personality_usage) == 3 for r in records)
    assert records[0].episodes == 1 and records[0].mean_ep_reward is not None
    for name in ("san", "mop", "dpp"):
        assert (run_dir / f"{name}-64.ckpt").exists() and (run_dir / f"{name}-128.ckpt").exists()
    assert not (run_dir / "partner-128.ckpt").exists()
    assert (run_dir / "config.snapshot").exists() and (run_dir / "train.log").exists()
    json.loads(metrics_path.read_text(encoding="utf-8").splitlines()[0])


@pytest.mark.parametrize("method", ["dnn", "san"])
def test_baseline_training_checkpoints_the_partner(tmp_path, tiny_env, method):
    cfg = tiny_config(method, train__total_steps=64)
    Trainer(cfg, tmp_path, seed=0, env=tiny_env).train()
    assert (tmp_path / "san-64.ckpt").exists() and (tmp_path / "partner-64.ckpt").exists()
    assert not (tmp_path / "mop-64.ckpt").exists()
    record = read_metrics(tmp_path / "metrics.jsonl")[0]
    assert record.personality_usage is None and record.eta_grad_norm is None


def test_fixed_seed_reproduces_the_metrics_log(tmp_path, tiny_env, tiny_cfg):
    first = Trainer(tiny_cfg, tmp_path / "a", seed=5, env=tiny_env).train()
    second = Trainer(tiny_cfg, tmp_path / "b", seed=5, env=tiny_env).train()
    assert first.read_bytes() == second.read_bytes()


def test_resume_continues_from_the_latest_checkpoint(tmp_path, tiny_env, tiny_cfg):
    Trainer(tiny_cfg, tmp_path, seed=0, env=tiny_env).train()
    longer = tiny_config(train__total_steps=192)
    resumed = Trainer(longer, tmp_path, seed=0, env=tiny_env)
    resumed.train(resume=True)
    assert [r.step for r in read_metrics(tmp_path / "metrics.jsonl")] == [64, 128, 192]
    assert (tmp_path / "san-192.ckpt").exists()


def test_resume_drops_metrics_past_the_checkpoint(tmp_path, tiny_env, tiny_cfg):
    Trainer(tiny_cfg, tmp_path, seed=0, env=tiny_env).train()
    for path in tmp_path.glob("*-128.ckpt"):
        path.unlink()
    Trainer(tiny_cfg, tmp_path, seed=0, env=tiny_env).train(resume=True)
    assert [r.step for r in read_metrics(tmp_path / "metrics.jsonl")] == [64, 128]


def test_transient_non_finite_update_is_recovered(tmp_path, tiny_env, tiny_cfg, monkeypatch):
    original = trainer_module.update_san
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise NonFiniteError("synthetic failure")
        return original(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "update_san", flaky)
    Trainer(tiny_cfg, tmp_path, seed=0, env=tiny_env).train()
    records = read_metrics(tmp_path / "metrics.jsonl")
    assert [r.recovered for r in records] == [True, False]


def test_persistent_non_finite_updates_abort_with_a_checkpoint(tmp_path, tiny_env, tiny_cfg, monkeypatch):
    def broken(*args, **kwargs):
        raise NonFiniteError("synthetic failure")

    monkeypatch.setattr(trainer_module, "update_san", broken)
    with pytest.raises(MopSanError, match="consecutive non-finite"):
        Trainer(tiny_cfg, tmp_path, seed=0, env=tiny_env).train()
    assert (tmp_path / "san-0.ckpt").exists()
    assert (tmp_path / "metrics.jsonl").read_text(encoding="utf-8") == ""


def test_shaping_weight_decays_linearly():
    tc = tiny_config(train__shaping=2.0, train__shaping_horizon=100).train
    assert [tc.shaping_factor(s) for s in (0, 50, 100, 300)] == [2.0, 1.0, 0.0, 0.0]
    assert tiny_config(train__shaping=0.5).train.shaping_factor(10**6) == 0.5


def test_direct_diversity_term_spreads_the_bank(learned_batch):
    pair, batch = learned_batch
    cfg = tiny_config(dpp__direct_coef=1.0, train__entropy_coef=0.0, train__normalize_advantages="false")
    batch.adv_mix = np.zeros(len(batch))
    bank, feature_map = pair.mop.mop.bank, pair.feature_map

    def diversity():
        tape = Tape(record=False)
        return float(np.mean(dpp_reward(tape, feature_map(tape, bank(tape, batch.obs2))).value))

    before = diversity()
    frozen = parameter_hash({"dpp": feature_map, "san": pair.ego})
    optim = Adam(pair.mop.parameters(), lr=0.01)
    for _ in range(20):
        update_mop(batch, pair, optim, cfg.train, np.random.default_rng(0), cfg.dpp)
    assert diversity() > before
    assert parameter_hash({"dpp": feature_map, "san": pair.ego}) == frozen
    assert all(np.all(p.grad == 0.0) for p in feature_map.parameters())


def test_training_reports_the_shaping_weight(tmp_path, tiny_env):
    cfg = tiny_config(train__shaping=1.0, train__shaping_horizon=128, train__gae_lambda=0.95)
    records = read_metrics(Trainer(cfg, tmp_path, seed=0, env=tiny_env).train())
    assert [r.shaping for r in records] == [1.0, 0.5]


@pytest.mark.slow
def test_desk_config_learns_to_cook(tmp_path, env):
    cfg = load_run_config(config.CONFIGS_DIR / "desk.cfg")
    trainer = Trainer(cfg, tmp_path, seed=0, env=env)
    trainer.train()
    rng = np.random.default_rng(0)
    scores = [play_episode(env, trainer.pair, trainer.pair, rng) for _ in range(10)]
    assert np.mean(scores) >= 40.0
