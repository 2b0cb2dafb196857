"""AdamW with global-norm gradient clipping, and the step lr schedule."""

from __future__ import annotations

import math

import numpy as np

from .params import ParameterStore


def lr_schedule(base_lr: float, epoch: int) -> float:
    """Step decay: multiply by 0.1 every 4 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * 0.1 ** (epoch // 4)


class AdamW:
    """Decoupled-weight-decay Adam over the trainable subset of a store.

    Weight decay applies only to parameters of rank >= 2 (weight matrices and
    embeddings), never to biases, gains, or gate scalars.
    """

    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def clip_global_norm(self, max_norm: float) -> float:
        """Scale all trainable grads so their joint L2 norm is <= max_norm.

        Returns the pre-clip norm. A no-op (bit-identical grads) when the norm
        is already within bounds.
        """
        sq = 0.0
        for _, t in self.store.trainable_items():
            if t.grad is None:
                raise ValueError("clip_global_norm: missing gradient")
            sq += float((t.grad * t.grad).sum())
        norm = math.sqrt(sq)
        if math.isfinite(max_norm) and norm > max_norm and norm > 0.0:
            scale = max_norm / norm
            for _, t in self.store.trainable_items():
                t.grad *= scale
        return norm

    def step(self, max_grad_norm: float = math.inf) -> None:
        """One clipped AdamW update over trainable parameters.

        Frozen parameters are untouched even if they carry grads. All grads in
        the store are cleared afterwards.
        """
        for name, t in self.store.trainable_items():
            if t.grad is None:
                raise ValueError(f"adamw_step: trainable parameter {name!r} has no gradient")
            if not np.all(np.isfinite(t.grad)):
                raise ValueError(f"adamw_step: non-finite gradient in {name!r}")

        self.clip_global_norm(max_grad_norm)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, t in self.store.trainable_items():
            g = t.grad
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(t.data)
                self._v[name] = np.zeros_like(t.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay > 0.0 and t.data.ndim >= 2:
                update = update + self.weight_decay * t.data
            t.data -= self.lr * update
        self.store.zero_grads()
