from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class Adam:
    """Adam with bias correction over a flat ``dict[str, ndarray]`` of parameters.

    Updates are applied in place; the moment dicts use the parameter names.
    """

    def __init__(self, params: dict[str, np.ndarray], config: AdamConfig = AdamConfig()):
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.t += 1
        corr1 = 1 - c.beta1**self.t
        corr2 = 1 - c.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            params[k] -= c.step_size * (m / corr1) / (np.sqrt(v / corr2) + c.epsilon)
