"""
Diversity Reward.

Each personality's action distribution is mapped by a small network to a
unit-norm feature row. With B the (k, d) stack of rows, the diversity reward
is log det(B B^T + eps I), computed from a Cholesky factorization. It is 0 for
mutually orthogonal rows (eps -> 0) and falls towards log(eps) as
personalities collapse onto each other.
"""
import numpy as np

import autodiff as ad
import config
from autodiff import MLP, Module, Node, Tape
from errors import DegenerateFeatureError
from utils import jensen_shannon

_MIN_NORM = 1e-12


class FeatureMap(Module):
    """6-dim action distribution -> hidden tanh -> d features, then L2 normalization."""

    input_names = ("pers",)

    def __init__(self, rng: np.random.Generator, feature_dim: int = config.DPP_FEATURE_DIM, hidden: int = 32):
        self.feature_dim = feature_dim
        self.net = MLP([config.NUM_ACTIONS, hidden, feature_dim], rng, out_gain=1.0)

    def __call__(self, tape: Tape, pers) -> Node:
        self.bind({"pers": pers})
        raw = self.net(tape, pers)
        norms = np.sqrt(np.sum(raw.value ** 2, axis=-1))
        if np.any(norms < _MIN_NORM):
            raise DegenerateFeatureError("feature map produced a zero vector; rows cannot be normalized")
        return ad.l2_normalize(raw, axis=-1)


def build_features(tape: Tape, pers, feature_map: FeatureMap) -> Node:
    """Rows of unit-norm features, shape (..., k, d)."""
    return feature_map(tape, pers)


def dpp_reward(tape: Tape, features, jitter: float = config.DPP_JITTER) -> Node:
    """log det(B B^T + jitter I) for B of shape (..., k, d)."""
    b = features if isinstance(features, Node) else tape.constant(features)
    k = b.shape[-2]
    gram = b @ ad.transpose(b, tuple(range(b.value.ndim - 2)) + (b.value.ndim - 1, b.value.ndim - 2))
    if jitter:
        gram = gram + jitter * np.eye(k)
    return ad.logdet_psd(gram)


def dpp_reward_value(pers: np.ndarray, feature_map: FeatureMap, jitter: float = config.DPP_JITTER) -> np.ndarray:
    """Reward without recording a graph (rollout collection)."""
    tape = Tape(record=False)
    return dpp_reward(tape, feature_map(tape, pers), jitter).value


def _cofactor_det(matrix: np.ndarray) -> float:
    n = matrix.shape[0]
    if n == 1:
        return float(matrix[0, 0])
    total = 0.0
    for col in range(n):
        minor = np.delete(matrix[1:], col, axis=1)
        total += (-1.0) ** col * matrix[0, col] * _cofactor_det(minor)
    return total


def logdet_bruteforce(matrix: np.ndarray) -> float:
    """log det by cofactor expansion along the first row (oracle for k <= 6)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] > 6:
        raise ValueError("brute-force determinant is limited to k <= 6")
    det = _cofactor_det(matrix)
    if det <= 0.0:
        raise ValueError(f"determinant {det} is not positive; compare against the jittered matrix")
    return float(np.log(det))


def personality_divergence(pers: np.ndarray) -> float:
    """Mean pairwise Jensen-Shannon divergence among personalities, averaged over states."""
    pers = np.asarray(pers, dtype=np.float64)
    k = pers.shape[-2]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    if not pairs:
        return 0.0
    values = [jensen_shannon(pers[..., i, :], pers[..., j, :]) for i, j in pairs]
    return float(np.mean(values))
