from __future__ import annotations

import numpy as np


def adam_step(params, grads, state, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction, in place.

    ``state`` holds ``t`` and per-parameter first/second moments ``m``/``v``
    (lists aligned with ``params``); it is created on first use.
    """
    b1, b2 = betas
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    if len(state["m"]) != len(params):
        raise ValueError("adam_step: optimizer state does not match parameters")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError("adam_step: shape mismatch between parameter, gradient and state")
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        p -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
    return params, state


class Adam:
    def __init__(self, tensors, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = {}

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self):
        adam_step(
            [t.data for t in self.tensors],
            [t.grad for t in self.tensors],
            self.state,
            lr=self.lr,
            betas=self.betas,
            eps=self.eps,
        )
