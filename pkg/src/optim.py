"""
Adam optimizer with global-norm gradient clipping.
"""
from typing import Dict, List, Sequence

import numpy as np

import config
from autodiff import Parameter
from errors import NonFiniteError


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = config.LEARNING_RATE,
                 betas=(config.ADAM_BETA1, config.ADAM_BETA2), eps: float = config.ADAM_EPS,
                 clip_norm: float = config.CLIP_NORM):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in self.params])))

    def step(self) -> float:
        """Applies one update from the accumulated gradients; returns the pre-clip norm."""
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NonFiniteError(f"gradient norm is {norm}")
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
        return norm

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step_count": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.step_count = int(state["step_count"][0])
        self.m = [np.array(state[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v.{i}"]) for i in range(len(self.params))]
