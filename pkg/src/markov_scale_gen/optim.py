"""AdamW with decoupled weight decay, shared by tokenizer and backbone training."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Weight decay applies only to parameters with >= 2 dimensions (matrices and
    convolution kernels); vectors such as norm gains and biases are exempt.
    State is exposed as plain arrays so checkpoints can capture it exactly.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.95,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr < 0:
            raise ValueError(f"AdamW: learning rate must be >= 0, got {lr}")
        for name, b in (("beta1", beta1), ("beta2", beta2)):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"AdamW: {name} must be in [0, 1), got {b}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("AdamW: parameter names must be unique")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for name in self.m:
            self.m[name] = np.array(state["m"][name], copy=True)
            self.v[name] = np.array(state["v"][name], copy=True)
