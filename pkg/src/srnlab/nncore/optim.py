from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .layers import EmbeddingTable, Param


class Adagrad:
    """Adagrad with dense updates for :class:`Param` and row-sparse updates for tables.

    The accumulated squared gradients live on the parameter objects
    (``grad_accum``) so they travel with checkpoints.
    """

    def __init__(self, learning_rate: float = 0.01, epsilon: float = 1e-8, clip_norm: float | None = None):
        if learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.learning_rate = learning_rate
        self.epsilon = epsilon
        self.clip_norm = clip_norm
        self.steps = 0

    def step(self, params: Iterable[Param] = (), tables: Iterable[EmbeddingTable] = ()) -> float:
        """Apply one update and clear gradients. Returns the pre-clip global gradient norm."""
        params = list(params)
        sparse = [(t, *t.sparse_grad()) for t in tables if t.trainable]
        sq = sum(float(np.sum(p.grad * p.grad)) for p in params)
        sq += sum(float(np.sum(g * g)) for _, _, g in sparse)
        norm = float(np.sqrt(sq))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        lr, eps = self.learning_rate, self.epsilon
        for p in params:
            g = p.grad * scale if scale != 1.0 else p.grad
            p.grad_accum += g * g
            p.value -= lr * g / (np.sqrt(p.grad_accum) + eps)
            p.zero_grad()
        for table, ids, g in sparse:
            if ids.size:
                if scale != 1.0:
                    g = g * scale
                table.grad_accum[ids] += g * g
                table.values[ids] -= lr * g / (np.sqrt(table.grad_accum[ids]) + eps)
            table.zero_grad()
        self.steps += 1
        return norm
