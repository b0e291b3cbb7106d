"""Bias-corrected Adam over named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta coefficients must lie in [0, 1)")


class Adam:
    """Adam with one moment slot and step counter per parameter.

    Step counts are tracked per parameter, not globally, so a parameter that
    sits out a step while its set is frozen keeps moment state and bias
    correction exactly where they were.
    """

    def __init__(self, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self._state: dict[str, list] = {}  # key -> [m, v, t]

    def step(self, sets: list[ParamSet]) -> None:
        """Apply one update to every non-frozen set; frozen sets untouched."""
        cfg = self.config
        for pset in sets:
            if pset.frozen:
                continue
            for name, p in pset.items():
                if p.grad is None:
                    raise ValueError(f"{pset.name}/{name} has no gradient; "
                                     "run backward before stepping")
                key = f"{pset.name}/{name}"
                state = self._state.get(key)
                if state is None:
                    state = [np.zeros(p.data.shape), np.zeros(p.data.shape), 0]
                    self._state[key] = state
                m, v, t = state
                t += 1
                g = p.grad
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
                m_hat = m / (1.0 - cfg.beta1 ** t)
                v_hat = v / (1.0 - cfg.beta2 ** t)
                p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
                state[0], state[1], state[2] = m, v, t

    def state_checksum(self, set_name: str) -> tuple:
        """Hashable snapshot of the moment state belonging to one set."""
        parts = []
        for key in sorted(self._state):
            if key.startswith(set_name + "/"):
                m, v, t = self._state[key]
                parts.append((key, m.tobytes(), v.tobytes(), t))
        return tuple(parts)
