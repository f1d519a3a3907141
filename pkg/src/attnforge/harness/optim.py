"""SGD with momentum and AdamW over named tensors."""
import numpy as np


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = dict(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            if self.momentum:
                self.buf[k] = self.momentum * self.buf[k] + g
                g = self.buf[k]
            p.data -= self.lr * g

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def make_optimizer(cfg, params):
    if cfg.name == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return AdamW(params, cfg.lr, cfg.weight_decay)
