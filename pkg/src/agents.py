"""
Agent Pairs.

An `AgentPair` is what one training run produces: the ego agent (spiking or
DNN actor with its critic) and the partner it learned with. For the MoP
methods the partner is the mixture-of-personality model, which also guides
the ego agent; for the `dnn` and `san` baselines the partner is a plain PPO
actor and the ego agent receives the zero guidance vector.

Checkpoint components: `san` (ego actor + critic), `mop` (context encoder,
estimator, personality bank and the partner value head), `dpp` (feature
map) and `partner` (baseline partner actor + critic).
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

import config
from autodiff import Module, Tape
from checkpoint import load_module, save_module
from context_encoder import PartnerHistory, stack_histories
from dpp import FeatureMap, dpp_reward_value
from errors import CheckpointError
from logger import setup_logger
from models import RunConfig
from mop import MopPartner, mixture_policy
from snn import Critic, SpikingActor, build_actor
from utils import sample_action, spawn_rngs

logger = setup_logger(__name__)

ZERO_GUIDANCE = np.zeros(config.NUM_ACTIONS)


class EgoAgent(Module):
    def __init__(self, obs_dim: int, rng: np.random.Generator, cfg: RunConfig):
        self.actor = build_actor(obs_dim, rng, cfg.san)
        self.critic = Critic(obs_dim, rng, hidden=cfg.san.hidden)


class PpoPartner(Module):
    """Plain tanh actor-critic partner of the baseline methods."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, cfg: RunConfig):
        self.actor = SpikingActor(obs_dim, rng, guidance_dim=0, hidden=cfg.san.hidden, spiking=False)
        self.critic = Critic(obs_dim, rng, hidden=cfg.san.hidden)


@dataclass
class StepOutput:
    guidance: np.ndarray
    action1: int
    logp1: float
    action2: int
    logp2: float
    value1: float
    value2: float
    probs1: np.ndarray
    probs2: np.ndarray
    profile: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    pers2: Optional[np.ndarray] = None
    dpp_reward: float = 0.0


class AgentPair:
    def __init__(self, cfg: RunConfig, obs_dim: int, seed: int = 0):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.seed = seed
        ego_rng, mop_rng, dpp_rng, partner_rng = spawn_rngs(seed, 4)
        self.ego = EgoAgent(obs_dim, ego_rng, cfg)
        self.mop: Optional[MopPartner] = None
        self.feature_map: Optional[FeatureMap] = None
        self.partner: Optional[PpoPartner] = None
        if cfg.mop.enabled:
            self.mop = MopPartner(obs_dim, mop_rng, cfg.mop, cfg.context, hidden=cfg.san.hidden)
            if cfg.dpp.enabled:
                self.feature_map = FeatureMap(dpp_rng, cfg.dpp.feature_dim, cfg.dpp.hidden)
        else:
            self.partner = PpoPartner(obs_dim, partner_rng, cfg)

    # --- Structure ---

    @property
    def uses_mop(self) -> bool:
        return self.mop is not None

    @property
    def beta(self) -> float:
        return self.cfg.dpp.beta if self.feature_map is not None else 0.0

    @property
    def context_size(self) -> int:
        return self.mop.mop.context_size if self.mop is not None else 0

    def components(self) -> Dict[str, Module]:
        parts: Dict[str, Module] = {"san": self.ego}
        if self.mop is not None:
            parts["mop"] = self.mop
        if self.feature_map is not None:
            parts["dpp"] = self.feature_map
        if self.partner is not None:
            parts["partner"] = self.partner
        return parts

    def partner_module(self) -> Module:
        return self.mop if self.mop is not None else self.partner

    def new_history(self) -> PartnerHistory:
        return PartnerHistory(self.context_size, self.obs_dim)

    def state_dict(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {name: module.state_dict() for name, module in self.components().items()}

    def load_state_dict(self, state: Dict[str, Dict[str, np.ndarray]]):
        for name, module in self.components().items():
            module.load_state_dict(state[name])

    # --- Acting ---

    def _mop_outputs(self, tape: Tape, observations: np.ndarray, history: PartnerHistory,
                     noise: Optional[np.ndarray]):
        mop = self.mop.mop
        p = mop.profile(tape, *stack_histories([history]), noise=noise)
        pers = mop.bank(tape, observations)
        return p.value[0], pers.value

    def guidance(self, obs1: np.ndarray, history: PartnerHistory) -> np.ndarray:
        """Ego guidance at evaluation: noise off, bank evaluated on the ego observation."""
        if self.mop is None:
            return ZERO_GUIDANCE
        p, pers = self._mop_outputs(Tape(record=False), np.atleast_2d(obs1), history, None)
        return mixture_policy(p, pers[0])

    def ego_distribution(self, obs1: np.ndarray, guidance: np.ndarray) -> np.ndarray:
        return self.ego.actor.distribution(Tape(record=False), obs1, guidance).value[0]

    def partner_distribution(self, obs2: np.ndarray, history: PartnerHistory) -> np.ndarray:
        """This pair's partner policy acting on its own observation (evaluation mode)."""
        if self.mop is None:
            return self.partner.actor.distribution(Tape(record=False), obs2).value[0]
        p, pers = self._mop_outputs(Tape(record=False), np.atleast_2d(obs2), history, None)
        return mixture_policy(p, pers[0])

    def joint_step(self, obs1: np.ndarray, obs2: np.ndarray, history: PartnerHistory,
                   rng: np.random.Generator) -> StepOutput:
        """
        One learning-phase decision for both players. The MoP profile (and its
        noise draw) is shared by the ego guidance and the partner action.
        """
        tape = Tape(record=False)
        profile = noise = pers2 = None
        r_dpp = 0.0
        if self.mop is not None:
            mop = self.mop.mop
            noise = mop.estimator.draw_noise(1, rng) if mop.noise_enabled else None
            profile, pers = self._mop_outputs(tape, np.stack([obs1, obs2]), history, noise)
            guidance = mixture_policy(profile, pers[0])
            probs2 = mixture_policy(profile, pers[1])
            pers2 = pers[1]
            value2 = float(self.mop.critic(tape, obs2).value[0])
            if self.feature_map is not None:
                r_dpp = float(dpp_reward_value(pers2, self.feature_map, self.cfg.dpp.jitter))
        else:
            guidance = ZERO_GUIDANCE
            probs2 = self.partner.actor.distribution(tape, obs2).value[0]
            value2 = float(self.partner.critic(tape, obs2).value[0])
        probs1 = self.ego.actor.distribution(tape, obs1, guidance).value[0]
        value1 = float(self.ego.critic(tape, obs1).value[0])
        action1, logp1 = sample_action(probs1, rng)
        action2, logp2 = sample_action(probs2, rng)
        return StepOutput(guidance=guidance, action1=action1, logp1=logp1, action2=action2, logp2=logp2,
                          value1=value1, value2=value2, probs1=probs1, probs2=probs2, profile=profile,
                          noise=None if noise is None else noise[0], pers2=pers2, dpp_reward=r_dpp)

    def values(self, obs1: np.ndarray, obs2: np.ndarray):
        tape = Tape(record=False)
        partner = self.mop if self.mop is not None else self.partner
        return float(self.ego.critic(tape, obs1).value[0]), float(partner.critic(tape, obs2).value[0])

    # --- Persistence ---

    def save(self, run_dir, step: int) -> Dict[str, Path]:
        run_dir = Path(run_dir)
        return {name: save_module(run_dir / f"{name}-{step}.ckpt", name, module, step=step)
                for name, module in self.components().items()}

    def load(self, run_dir, step: Optional[int] = None) -> int:
        """Loads the checkpoint set at `step` (latest when None); returns the step."""
        run_dir = Path(run_dir)
        if step is None:
            step = latest_checkpoint_step(run_dir)
        for name, module in self.components().items():
            path = run_dir / f"{name}-{step}.ckpt"
            if not path.exists():
                raise CheckpointError(f"missing checkpoint {path}", field=name)
            load_module(path, name, module)
        logger.debug(f"Loaded {self.cfg.method} pair from {run_dir} at step {step}")
        return step


def latest_checkpoint_step(run_dir) -> int:
    steps = []
    for path in Path(run_dir).glob("san-*.ckpt"):
        try:
            steps.append(int(path.stem.split("-", 1)[1]))
        except ValueError:
            continue
    if not steps:
        raise CheckpointError(f"no checkpoints found in {run_dir}", field="san")
    return max(steps)
