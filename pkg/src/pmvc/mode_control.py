"""Per-block coding decisions: temporal skip and progressive stage count."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .residual_codec import CodeStack, ResidualCodec

# 8-bit MSE -> MSE on [-1, 1] samples
EIGHT_BIT_TO_NORMALIZED = (2.0 / 255.0) ** 2

DEFAULT_TAU_TEMPORAL_8BIT = 3.0
DEFAULT_TAU_SPATIAL_8BIT = 100.0


@dataclass(frozen=True)
class Thresholds:
    """MSE thresholds in normalized units (samples in [-1, 1])."""

    tau_spatial: float = DEFAULT_TAU_SPATIAL_8BIT * EIGHT_BIT_TO_NORMALIZED
    tau_temporal: float = DEFAULT_TAU_TEMPORAL_8BIT * EIGHT_BIT_TO_NORMALIZED

    def __post_init__(self):
        if self.tau_spatial < 0 or self.tau_temporal < 0:
            raise ValueError("thresholds must be non-negative")

    @classmethod
    def from_8bit(cls, tau_spatial: float = DEFAULT_TAU_SPATIAL_8BIT,
                  tau_temporal: float = DEFAULT_TAU_TEMPORAL_8BIT) -> "Thresholds":
        return cls(tau_spatial * EIGHT_BIT_TO_NORMALIZED, tau_temporal * EIGHT_BIT_TO_NORMALIZED)


@dataclass
class BlockDecision:
    skip: bool
    n_stages: int = 0

    def __post_init__(self):
        if not self.skip and self.n_stages < 1:
            raise ValueError("a coded block needs at least one stage")
        if self.skip and self.n_stages:
            raise ValueError("a skipped block carries no stages")


@dataclass
class StageDecision:
    n_stages: int
    codes: CodeStack
    residual_reconstruction: np.ndarray  # sum of synthesized residuals


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def decide_skip(original_block: np.ndarray, prev_frame_block: np.ndarray, tau_temporal: float) -> bool:
    """Skip when the co-located original blocks of consecutive frames differ by less than the threshold."""
    return mse(original_block, prev_frame_block) < tau_temporal


def decide_stages(r1: np.ndarray, codec: ResidualCodec, tau_spatial: float,
                  prediction: np.ndarray | None = None, max_stages: int | None = None) -> StageDecision:
    """Smallest n such that the reconstruction error drops below ``tau_spatial``, else the maximum.

    With ``prediction`` given the error is measured on the clamped
    reconstruction ``clip(prediction + sum r_hat)`` against
    ``prediction + r1``; otherwise on the residual directly.
    """
    limit = max_stages or codec.cfg.stages
    state = codec.start_block(r1)
    original = None if prediction is None else prediction + state.r1
    codes = []
    for n in range(1, limit + 1):
        code, _ = codec.step_block(state)
        codes.append(code)
        if original is None:
            err = mse(state.r1, state.accumulated)
        else:
            err = mse(original, np.clip(prediction + state.accumulated, -1.0, 1.0))
        if err < tau_spatial:
            break
    return StageDecision(len(codes), CodeStack(codes), state.accumulated)
