"""AdamW (decoupled weight decay) over named parameter dicts."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-3,
                 no_decay: tuple = ()):
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.no_decay = tuple(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of params; missing grads are treated as zero (skipped)."""
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay and k not in self.no_decay:
                p -= (self.lr * self.weight_decay) * p
            p -= self.lr * update

    # -- checkpoint plumbing -------------------------------------------------
    def state_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = int(t)
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"opt.m.{k}"], dtype=self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = np.asarray(arrays[f"opt.v.{k}"], dtype=self.v[k].dtype).reshape(self.v[k].shape)
