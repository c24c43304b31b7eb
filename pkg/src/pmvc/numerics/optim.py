from __future__ import annotations

from typing import Iterable

import numpy as np


def kaiming_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-normal weights: N(0, 2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def adam_step(params: Iterable, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; parameters without a gradient are left alone."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def step_decay(base_lr: float, epoch: int, factor: float, period: int) -> float:
    """Learning rate multiplied by ``factor`` every ``period`` epochs."""
    if period <= 0:
        return base_lr
    return base_lr * factor ** (epoch // period)
