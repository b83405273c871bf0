from __future__ import annotations

import numpy as np


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 no_decay: tuple = ("masks", "maps", "bias")):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params}
        # decaying mask/attention rows would pull them away from their identity initialisation
        self._decay = {id(p): not any(p.name.endswith(s) for s in no_decay) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and self._decay[id(p)]:
                g = g + self.weight_decay * p.data
            v = self._velocity[id(p)]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def step_decay_lr(epoch: int, base_lr: float, decay_epochs, factor: float = 0.1, floor: float = 1e-4) -> float:
    """``base_lr`` times ``factor`` per decay epoch already reached, never below ``floor``."""
    k = sum(1 for e in decay_epochs if epoch >= e)
    return max(base_lr * factor ** k, floor)
