"""
Mixture-of-Personality Partner Model.

The personality estimator maps a context embedding to mixture weights over k
base personalities,

    p = softmax(MLP_p(c) + softplus(MLP_noise(c)) * z),   z ~ N(0, I),

where the noise term is dropped at evaluation. Each base personality is an
independent obs -> 64 -> 64 -> 6 softmax network; the k networks are stored as
stacked weights and evaluated with one batched matmul per layer. The mixture
policy is the convex combination of the personality outputs weighted by p.
"""
from typing import Optional, Tuple

import numpy as np

import autodiff as ad
import config
from autodiff import MLP, Module, Node, Parameter, Tape
from context_encoder import ContextEncoder, PartnerHistory, stack_histories
from snn import Critic
from utils import sample_action


class PersonalityEstimator(Module):
    input_names = ("context",)

    def __init__(self, context_dim: int, k: int, rng: np.random.Generator, hidden: int = config.PERSONALITY_HIDDEN):
        self.k = k
        self.personality_head = MLP([context_dim, hidden, k], rng, out_gain=0.01)
        self.noise_head = MLP([context_dim, hidden, k], rng, out_gain=0.01)

    def __call__(self, tape: Tape, context: Node, noise: Optional[np.ndarray] = None) -> Node:
        """Mixture weights (batch, k); `noise` holds the standard-normal draws or None."""
        logits = self.personality_head(tape, context)
        if noise is not None:
            logits = logits + ad.softplus(self.noise_head(tape, context)) * noise
        return ad.softmax(logits)

    def draw_noise(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((batch, self.k))


class PersonalityBank(Module):
    """k independent three-layer MLPs evaluated together."""

    input_names = ("obs",)

    def __init__(self, obs_dim: int, k: int, rng: np.random.Generator, hidden: int = config.PERSONALITY_HIDDEN):
        self.k = k
        streams = [np.random.default_rng(int(seed)) for seed in rng.integers(0, 2**63 - 1, size=k)]
        shapes = [(obs_dim, hidden), (hidden, hidden), (hidden, config.NUM_ACTIONS)]
        gains = [np.sqrt(2.0), np.sqrt(2.0), 0.01]
        for layer, (shape, gain) in enumerate(zip(shapes, gains), start=1):
            weights = np.stack([ad.orthogonal(stream, shape, gain) for stream in streams])
            setattr(self, f"w{layer}", Parameter(weights))
            setattr(self, f"b{layer}", Parameter(np.zeros((k, 1, shape[1]))))

    def logits(self, tape: Tape, obs) -> Node:
        """(batch, k, 6) action logits."""
        x = obs if isinstance(obs, Node) else tape.constant(np.atleast_2d(obs))
        batch = x.shape[0]
        h = ad.reshape(x, (1, batch, x.shape[-1]))
        h = ad.tanh(h @ tape.param(self.w1) + tape.param(self.b1))
        h = ad.tanh(h @ tape.param(self.w2) + tape.param(self.b2))
        out = h @ tape.param(self.w3) + tape.param(self.b3)
        return ad.transpose(out, (1, 0, 2))

    def __call__(self, tape: Tape, obs) -> Node:
        """k action distributions per observation, shape (batch, k, 6)."""
        self.bind({"obs": obs})
        return ad.softmax(self.logits(tape, obs), axis=-1)


def mixture_policy(p, pers):
    """
    Convex combination sum_i p_i * pers_i.

    Accepts nodes ((batch, k) and (batch, k, 6)) or plain arrays ((k,) / (k, 6)
    with optional leading batch axes).
    """
    if isinstance(p, Node) or isinstance(pers, Node):
        tape = p.tape if isinstance(p, Node) else pers.tape
        p, pers = ad._as_node(tape, p), ad._as_node(tape, pers)
        batch, k = p.shape
        mixed = ad.reshape(p, (batch, 1, k)) @ pers
        return ad.reshape(mixed, (batch, pers.shape[-1]))
    return np.einsum("...k,...ka->...a", np.asarray(p, dtype=np.float64), np.asarray(pers, dtype=np.float64))


class MixtureOfPersonality(Module):
    """Context encoder + personality estimator + personality bank (checkpointed together)."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, k: int = config.PERSONALITY_COUNT,
                 hidden: int = config.PERSONALITY_HIDDEN, context_cfg=None, noise_enabled: bool = True):
        if context_cfg is None:
            self.encoder = ContextEncoder(obs_dim, rng)
        else:
            self.encoder = ContextEncoder.from_config(obs_dim, rng, context_cfg)
        self.estimator = PersonalityEstimator(self.encoder.token_dim, k, rng, hidden=hidden)
        self.bank = PersonalityBank(obs_dim, k, rng, hidden=hidden)
        self.obs_dim = obs_dim
        self.k = k
        self.noise_enabled = noise_enabled

    @property
    def context_size(self) -> int:
        return self.encoder.size

    def new_history(self) -> PartnerHistory:
        return PartnerHistory(self.encoder.size, self.obs_dim)

    def profile(self, tape: Tape, hist_obs, hist_actions, lengths, noise: Optional[np.ndarray] = None) -> Node:
        context = self.encoder(tape, hist_obs, hist_actions, lengths)
        return self.estimator(tape, context, noise if self.noise_enabled else None)

    def estimate_personality(self, history: PartnerHistory, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Profile for one history; noise is drawn only when `rng` is given."""
        tape = Tape(record=False)
        noise = self.estimator.draw_noise(1, rng) if (rng is not None and self.noise_enabled) else None
        return self.profile(tape, *stack_histories([history]), noise=noise).value[0]

    def personality_forward(self, obs: np.ndarray) -> np.ndarray:
        return self.bank(Tape(record=False), obs).value

    def act_as_partner(self, obs2: np.ndarray, history: PartnerHistory,
                       rng: np.random.Generator) -> Tuple[int, float]:
        """Samples the partner action from the mixture (learning phase, noise on)."""
        p = self.estimate_personality(history, rng)
        mixed = mixture_policy(p, self.personality_forward(obs2)[0])
        return sample_action(mixed, rng)

    def guide(self, obs1: np.ndarray, partner_history: PartnerHistory) -> np.ndarray:
        """Deterministic guidance distribution for the ego agent (noise off)."""
        p = self.estimate_personality(partner_history, None)
        return mixture_policy(p, self.personality_forward(obs1)[0])


class MopPartner(Module):
    """The MoP model plus the partner value head trained on the mixture return."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, mop_cfg, context_cfg, hidden=config.HIDDEN_SIZES):
        self.mop = MixtureOfPersonality(obs_dim, rng, k=mop_cfg.k, hidden=mop_cfg.hidden,
                                        context_cfg=context_cfg, noise_enabled=mop_cfg.noise_enabled)
        self.critic = Critic(obs_dim, rng, hidden=hidden)
