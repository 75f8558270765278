"""
Spiking Actor-Critic Networks.

LIF layers integrate a constant input current for T simulation steps with a
forward-Euler update. The actor reads out the time-averaged spikes of its
second layer through a linear layer and a softmax. With `spiking=False` the
LIF layers become tanh layers, which is the plain DNN actor used by the
baselines and by the partner policy.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
import config
from autodiff import MLP, Linear, Module, Node, Tape
from models import LifConfig


@dataclass
class LifState:
    v: Node
    refrac: np.ndarray


def lif_init(tape: Tape, shape, cfg: LifConfig) -> LifState:
    return LifState(tape.constant(np.full(shape, cfg.v_reset)), np.zeros(shape, dtype=np.int64))


def lif_step(state: LifState, current: Node, cfg: LifConfig,
             width: float = config.SURROGATE_WIDTH) -> Tuple[LifState, Node]:
    """
    One Euler step of v' = v + (dt/tau)(-v + I) for non-refractory neurons.

    Neurons with v' >= v_th spike, reset to v_reset and stay refractory for
    `cfg.refractory` steps; refractory neurons hold v_reset and emit 0.
    """
    v = state.v
    leak = cfg.dt / cfg.tau
    integrated = v + (current - v) * leak
    active = (state.refrac == 0).astype(np.float64)
    v_new = integrated * active + cfg.v_reset * (1.0 - active)
    spikes = ad.surrogate_spike(v_new, cfg.v_th, width) * active
    v_next = v_new * (1.0 - spikes) + spikes * cfg.v_reset
    fired = spikes.value > 0.5
    refrac = np.where(fired, cfg.refractory, np.maximum(state.refrac - 1, 0))
    return LifState(v_next, refrac), spikes


class SpikingActor(Module):
    """concat(obs, guidance) -> LIF(64) -> LIF(64) -> linear readout (6) -> softmax."""

    input_names = ("obs", "guidance")

    def __init__(self, obs_dim: int, rng: np.random.Generator, guidance_dim: int = config.NUM_ACTIONS,
                 hidden: Sequence[int] = config.HIDDEN_SIZES, lif: Optional[LifConfig] = None,
                 spiking: bool = True, surrogate_width: float = config.SURROGATE_WIDTH,
                 readout_gain: float = 0.01):
        self.obs_dim = obs_dim
        self.guidance_dim = guidance_dim
        self.lif = lif or LifConfig()
        self.spiking = spiking
        self.surrogate_width = surrogate_width
        self.fc1 = Linear(obs_dim + guidance_dim, hidden[0], rng)
        self.fc2 = Linear(hidden[0], hidden[1], rng)
        self.readout = Linear(hidden[1], config.NUM_ACTIONS, rng, gain=readout_gain)

    def _features(self, tape: Tape, obs, guidance) -> Node:
        obs = obs if isinstance(obs, Node) else tape.constant(np.atleast_2d(obs))
        if self.guidance_dim == 0:
            return obs
        guidance = guidance if isinstance(guidance, Node) else tape.constant(np.atleast_2d(guidance))
        return ad.concat([obs, guidance], axis=-1)

    def __call__(self, tape: Tape, obs, guidance=None) -> Node:
        """Returns action logits of shape (batch, 6)."""
        x = self._features(tape, obs, guidance)
        if not self.spiking:
            h = ad.tanh(self.fc2(tape, ad.tanh(self.fc1(tape, x))))
            return self.readout(tape, h)
        batch = x.shape[0]
        cfg = self.lif
        current1 = self.fc1(tape, x)
        state1 = lif_init(tape, current1.shape, cfg)
        state2 = lif_init(tape, (batch, self.fc2.weight.shape[1]), cfg)
        total = None
        for _ in range(cfg.T):
            state1, spikes1 = lif_step(state1, current1, cfg, self.surrogate_width)
            state2, spikes2 = lif_step(state2, self.fc2(tape, spikes1), cfg, self.surrogate_width)
            total = spikes2 if total is None else total + spikes2
        return self.readout(tape, total * (1.0 / cfg.T))

    def logits(self, tape: Tape, obs, guidance=None) -> Node:
        inputs = {"obs": obs, "guidance": guidance if self.guidance_dim else np.zeros(1)}
        self.bind(inputs)
        return self(tape, obs, guidance)

    def distribution(self, tape: Tape, obs, guidance=None) -> Node:
        return ad.softmax(self.logits(tape, obs, guidance))

    def log_probs(self, tape: Tape, obs, guidance=None) -> Node:
        return ad.log_softmax(self.logits(tape, obs, guidance))


class Critic(Module):
    """obs -> 64 tanh -> 64 tanh -> scalar value."""

    input_names = ("obs",)

    def __init__(self, obs_dim: int, rng: np.random.Generator, hidden: Sequence[int] = config.HIDDEN_SIZES):
        self.net = MLP([obs_dim, *hidden, 1], rng, activation="tanh", out_gain=1.0)

    def __call__(self, tape: Tape, obs) -> Node:
        self.bind({"obs": obs})
        out = self.net(tape, obs if isinstance(obs, Node) else np.atleast_2d(obs))
        return ad.reshape(out, (out.shape[0],))


def build_actor(obs_dim: int, rng: np.random.Generator, san_cfg, guidance_dim: int = config.NUM_ACTIONS) -> SpikingActor:
    return SpikingActor(obs_dim, rng, guidance_dim=guidance_dim, hidden=san_cfg.hidden, lif=san_cfg.lif(),
                        spiking=san_cfg.spiking, surrogate_width=san_cfg.surrogate_width)
