"""Adaptive-moment optimizer with decoupled weight decay."""

import numpy as np


class AdamW:
    """Deterministic AdamW over a named parameter dict (updates in sorted name order)."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.99), eps=1e-8, weight_decay=1e-4):
        self.names = sorted(params)
        self.params = {n: params[n] for n in self.names}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.names}

    def zero_grad(self):
        for n in self.names:
            self.params[n].grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state_arrays(self):
        """Moment buffers as flat named arrays, for checkpointing."""
        out = {}
        for n in self.names:
            out[f"optim.m.{n}"] = self.m[n]
            out[f"optim.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays, step_count):
        for n in self.names:
            self.m[n] = np.ascontiguousarray(arrays[f"optim.m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.ascontiguousarray(arrays[f"optim.v.{n}"], dtype=self.v[n].dtype)
        self.step_count = int(step_count)
