"""Adam over a dict of named numpy arrays, updated in place."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: dict[str, float], betas=(0.9, 0.999), eps=1e-15):
        self.params = params
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.lr[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    # Row-wise edits keep moment buffers aligned with parameters after densification.
    def keep_rows(self, mask: np.ndarray) -> None:
        for store in (self.params, self.m, self.v):
            for k in store:
                store[k] = store[k][mask]

    def append_rows(self, new: dict[str, np.ndarray]) -> None:
        for k, rows in new.items():
            self.params[k] = np.concatenate([self.params[k], rows])
            zeros = np.zeros_like(rows)
            self.m[k] = np.concatenate([self.m[k], zeros])
            self.v[k] = np.concatenate([self.v[k], zeros])
