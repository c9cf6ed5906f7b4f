"""Optimizers over parameter tensors: SGD with momentum and adaptive moments
with decoupled weight decay. State updates run directly on the numpy buffers;
gradients accumulate until ``zero_grad``.
"""

import math

import numpy as np


class _Optimizer:
    def __init__(self, params, lr):
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class SGD(_Optimizer):
    def __init__(self, params, lr, momentum=0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.buf):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


class AdamW(_Optimizer):
    """Adaptive first/second moments with decoupled weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - self.lr * (update + self.wd * p.data)


def lr_at(base_lr, step, total_steps, schedule="constant", warm_frac=0.1):
    """Constant or constant-then-cosine decay."""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        hold = int(total_steps * warm_frac)
        if step < hold or total_steps <= hold:
            return base_lr
        frac = (step - hold) / max(1, total_steps - hold)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown lr schedule {schedule}")


def make_optimizer(kind, params, lr, weight_decay=0.05):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind}")
