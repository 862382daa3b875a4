from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Diffusion noise tables indexed by t in [0, T].

    Index 0 is the clean state: beta[0] = 0 and alpha_bar[0] = 1. Tables are
    computed in f64.
    """
    kind: str
    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t):
        return float(self.betas[t])

    def alpha(self, t):
        return float(self.alphas[t])

    def alpha_bar(self, t):
        return float(self.alpha_bars[t])

    def to_dict(self):
        return {
            'kind': self.kind,
            'steps': self.steps,
            'beta_start': float(self.betas[1]),
            'beta_end': float(self.betas[-1]),
        }
