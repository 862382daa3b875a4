import numpy as np


class Adam:
    """Adam with bias correction over a ModelParams store; moments live on each ParamTensor"""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def step(self):
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Adam update for every parameter with a populated gradient.

    Args:
        params: ModelParams store; its `step` counter drives bias correction
        lr: learning rate
        beta1, beta2: moment decay rates
        eps: denominator floor

    Returns:
        The new step count
    """
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        update = lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.value = (p.value - update).astype(p.value.dtype)
    return t


def ema_update(params, rate, warmup=False):
    """
    shadow ← d·shadow + (1 − d)·value with d = rate. With `warmup` the decay is
    capped at (1 + step) / (10 + step) so short runs still move the shadow.
    """
    decay = min(rate, (1.0 + params.step) / (10.0 + params.step)) if warmup else rate
    for p in params:
        p.ema = (decay * p.ema + (1.0 - decay) * p.value).astype(p.value.dtype)
    return decay
