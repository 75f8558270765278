"""
Partner Trajectory Encoder.

The last C (observation, action) pairs of the partner are turned into 2C
tokens (obs-MLP and action-MLP outputs, interleaved o, a, o, a, oldest first,
left-padded with zero tokens), summed with learned positional embeddings and
passed through one self-attention block. The context embedding is the mean of
the block's outputs over the unmasked positions; a fully masked sequence maps
to the zero vector.

With `use_attention=False` the block is skipped and the embedding is the
masked mean of the tokens themselves.
"""
from collections import deque
from typing import Optional, Tuple

import numpy as np

import autodiff as ad
import config
from autodiff import MLP, Module, Node, Parameter, Tape
from errors import ShapeMismatchError


class PartnerHistory:
    """Ring buffer of the partner's last `size` (observation, action) pairs, newest last."""

    def __init__(self, size: int, obs_dim: int):
        self.size = size
        self.obs_dim = obs_dim
        self._items = deque(maxlen=size) if size > 0 else deque(maxlen=0)

    def append(self, obs: np.ndarray, action: int):
        if self.size > 0:
            self._items.append((np.asarray(obs, dtype=np.float64).copy(), int(action)))

    def clear(self):
        self._items.clear()

    def __len__(self):
        return len(self._items)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, int]:
        """Left-padded (size, obs_dim) observations, (size,) actions and the real length."""
        obs = np.zeros((self.size, self.obs_dim))
        actions = np.zeros(self.size, dtype=np.int64)
        n = len(self._items)
        for slot, (o, a) in enumerate(self._items, start=self.size - n):
            obs[slot] = o
            actions[slot] = a
        return obs, actions, n


def stack_histories(histories) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    parts = [h.arrays() for h in histories]
    return (np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]),
            np.array([p[2] for p in parts], dtype=np.int64))


def slot_mask(lengths: np.ndarray, size: int) -> np.ndarray:
    """(batch, size) 0/1 mask of real history slots (the last `length` slots)."""
    slots = np.arange(size)[None, :]
    return (slots >= size - np.asarray(lengths)[:, None]).astype(np.float64)


class ContextEncoder(Module):
    def __init__(self, obs_dim: int, rng: np.random.Generator, size: int = config.CONTEXT_SIZE,
                 token_dim: int = config.TOKEN_DIM, heads: int = config.ATTENTION_HEADS,
                 head_dim: int = config.HEAD_DIM, inner_dim: int = config.FFN_INNER_DIM,
                 use_attention: bool = True):
        self.obs_dim = obs_dim
        self.size = size
        self.token_dim = token_dim
        self.heads = heads
        self.head_dim = head_dim
        self.use_attention = use_attention
        self.obs_mlp = MLP([obs_dim, token_dim, token_dim], rng)
        self.action_mlp = MLP([config.NUM_ACTIONS, token_dim, token_dim], rng)
        if size > 0:
            self.positions = Parameter(0.02 * rng.standard_normal((2 * size, token_dim)))
        width = heads * head_dim
        self.w_query = Parameter(ad.orthogonal(rng, (token_dim, width), 1.0))
        self.w_key = Parameter(ad.orthogonal(rng, (token_dim, width), 1.0))
        self.w_value = Parameter(ad.orthogonal(rng, (token_dim, width), 1.0))
        self.w_out = Parameter(ad.orthogonal(rng, (width, token_dim), 1.0))
        self.norm1_gain = Parameter(np.ones(token_dim))
        self.norm1_bias = Parameter(np.zeros(token_dim))
        self.ffn = MLP([token_dim, inner_dim, token_dim], rng, activation="relu")
        self.norm2_gain = Parameter(np.ones(token_dim))
        self.norm2_bias = Parameter(np.zeros(token_dim))
        self.last_attention: Optional[np.ndarray] = None

    @classmethod
    def from_config(cls, obs_dim: int, rng: np.random.Generator, ctx) -> "ContextEncoder":
        return cls(obs_dim, rng, size=ctx.size, token_dim=ctx.token_dim, heads=ctx.heads,
                   head_dim=ctx.head_dim, inner_dim=ctx.inner_dim, use_attention=ctx.encoder)

    def tokenize(self, tape: Tape, hist_obs: np.ndarray, hist_actions: np.ndarray,
                 lengths: np.ndarray) -> Tuple[Node, np.ndarray]:
        """Returns tokens (batch, 2C, token_dim) and their 0/1 mask (batch, 2C)."""
        batch = hist_obs.shape[0]
        size = self.size
        if size == 0:
            return tape.constant(np.zeros((batch, 0, self.token_dim))), np.zeros((batch, 0))
        slots = slot_mask(lengths, size)
        one_hot = np.eye(config.NUM_ACTIONS)[hist_actions.reshape(-1)]
        obs_tokens = self.obs_mlp(tape, hist_obs.reshape(batch * size, self.obs_dim))
        act_tokens = self.action_mlp(tape, one_hot)
        keep = slots.reshape(batch, size, 1, 1)
        obs_tokens = ad.reshape(obs_tokens, (batch, size, 1, self.token_dim)) * keep
        act_tokens = ad.reshape(act_tokens, (batch, size, 1, self.token_dim)) * keep
        tokens = ad.reshape(ad.concat([obs_tokens, act_tokens], axis=2), (batch, 2 * size, self.token_dim))
        return tokens, np.repeat(slots, 2, axis=1)

    def encode(self, tape: Tape, tokens: Node, mask: np.ndarray) -> Node:
        """Context embedding (batch, token_dim); zero for fully masked rows."""
        batch, length, _ = tokens.shape
        if mask.shape != (batch, length):
            raise ShapeMismatchError("encode", tape._counter,
                                     f"mask shape {mask.shape} does not match tokens {tokens.shape[:2]}")
        if length == 0:
            return tape.constant(np.zeros((batch, self.token_dim)))
        x = tokens + ad.reshape(tape.param(self.positions), (1, length, self.token_dim))
        if self.use_attention:
            x = self._block(tape, x, mask)
        counts = mask.sum(axis=1, keepdims=True)
        pooled = ad.sum(x * mask[:, :, None], axis=1)
        return pooled * (1.0 / np.maximum(counts, 1.0))

    def _split_heads(self, tape: Tape, x: Node, weight: Parameter) -> Node:
        batch, length, _ = x.shape
        projected = ad.reshape(x @ tape.param(weight), (batch, length, self.heads, self.head_dim))
        return ad.transpose(projected, (0, 2, 1, 3))

    def _block(self, tape: Tape, x: Node, mask: np.ndarray) -> Node:
        batch, length, _ = x.shape
        q = self._split_heads(tape, x, self.w_query)
        k = self._split_heads(tape, x, self.w_key)
        v = self._split_heads(tape, x, self.w_value)
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        # fully masked rows keep all keys; their outputs are dropped by the pooling
        masked_keys = (mask == 0) & (mask.sum(axis=1, keepdims=True) > 0)
        scores = ad.masked_fill(scores, masked_keys[:, None, None, :], -np.inf)
        attention = ad.softmax(scores, axis=-1)
        self.last_attention = attention.value
        context = ad.reshape(ad.transpose(attention @ v, (0, 2, 1, 3)), (batch, length, self.heads * self.head_dim))
        x = ad.layer_norm(x + context @ tape.param(self.w_out), tape.param(self.norm1_gain), tape.param(self.norm1_bias))
        return ad.layer_norm(x + self.ffn(tape, x), tape.param(self.norm2_gain), tape.param(self.norm2_bias))

    def __call__(self, tape: Tape, hist_obs: np.ndarray, hist_actions: np.ndarray, lengths: np.ndarray) -> Node:
        tokens, mask = self.tokenize(tape, hist_obs, hist_actions, lengths)
        return self.encode(tape, tokens, mask)
