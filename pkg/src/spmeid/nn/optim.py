"""Adam with cosine learning-rate decay and global gradient clipping."""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import AutodiffError
from .tensor import Tensor


class CosineSchedule:
    """Cosine decay from ``lr0`` to ``lr_min`` over ``total_steps``."""

    def __init__(self, lr0: float = 1e-3, lr_min: float = 1e-5,
                 total_steps: int = 1000):
        self.lr0 = lr0
        self.lr_min = lr_min
        self.total_steps = max(1, total_steps)

    def __call__(self, step: int) -> float:
        frac = min(step / self.total_steps, 1.0)
        return self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + np.cos(np.pi * frac))


class Adam:
    def __init__(self, params: list[Tensor], schedule: CosineSchedule | None = None,
                 lr: float | None = None, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float = 1.0):
        self.params = list(params)
        if lr is not None:
            schedule = CosineSchedule(lr0=lr, lr_min=lr, total_steps=1)
        self.schedule = schedule or CosineSchedule()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def _clip(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
        norm = np.sqrt(total)
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        norm = self._clip()
        self.step_count += 1
        lr = self.schedule(self.step_count)
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float64)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = lr * (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
        return float(norm)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def batch_fingerprint(arrays) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()[:16]


def train_step(model, batch, optimizer: Adam) -> float:
    """One optimization step on ``model.loss(batch)``.

    Aborts with the batch fingerprint if the loss is not finite; with
    learning rate 0 the weights are left bit-identical.
    """
    loss = model.loss(batch)
    value = float(loss.data)
    if not np.isfinite(value):
        raise AutodiffError(
            "non-finite loss; batch fingerprint "
            + batch_fingerprint([np.asarray(getattr(b, "data", b)).ravel()[:64]
                                 for b in batch]))
    loss.backward()
    optimizer.step()
    optimizer.zero_grad()
    return value


def weight_checksum(model) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.named_params().items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()
