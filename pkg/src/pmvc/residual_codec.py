"""Iterative residual analysis/synthesis with stochastic binarization.

Each stage encodes what the previous stages left unexplained: the analyzer
maps the current residual to tanh logits, the binarizer turns them into
+/-1 codes, and the synthesizer turns codes back into a residual estimate.
Convolutional LSTM state carries across the stages of one block and is reset
for every new block.

Residuals live in [-2, 2] (difference of two [-1, 1] signals); the networks
see them scaled by 0.5 and the synthesizer output is scaled back by 2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import Conv2d, ConvLSTMCell, Deconv2d, Module, Tensor, no_grad, ops
from .numerics.layers import ConvLstmState

BLOCK = 32
RESIDUAL_SCALE = 0.5


class BinarizerRangeError(ValueError):
    pass


@dataclass
class CodecConfig:
    stages: int = 8
    downsample: int = 8  # D: latent is (32/D) x (32/D)
    bits: int = 32  # C: binary channels per latent position
    # analyzer: conv1, lstm1, conv2, lstm2, conv3 widths; the synthesizer mirrors them
    widths: tuple[int, int, int, int, int] = (64, 128, 256, 256, 64)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.downsample not in (1, 2, 4, 8):
            raise ValueError(f"downsample must be 1, 2, 4 or 8, got {self.downsample}")
        if not 1 <= self.stages <= 8:
            raise ValueError("stage count must be in [1, 8] (3-bit signalling)")

    @property
    def latent_size(self) -> int:
        return BLOCK // self.downsample

    @property
    def bits_per_stage(self) -> int:
        return self.latent_size**2 * self.bits

    @classmethod
    def desk(cls) -> "CodecConfig":
        return cls(widths=(16, 32, 32, 32, 32))

    def to_dict(self) -> dict:
        return asdict(self)


def binarize(c_in, mode: str, rng: np.random.Generator | None = None):
    """Map values in [-1, 1] to {-1, +1}.

    ``train``: c_in + eps where eps = 1 - c_in with probability (1 + c_in) / 2,
    else -c_in - 1, so the output is +1 with that probability and unbiased.
    Gradients pass straight through. ``infer``: sign with sign(0) = +1.
    Accepts an ndarray or a :class:`Tensor`.
    """
    values = c_in.data if isinstance(c_in, Tensor) else np.asarray(c_in)
    if values.size and (values.min() < -1.0 or values.max() > 1.0):
        raise BinarizerRangeError("binarizer input outside [-1, 1]")
    if mode == "train":
        if rng is None:
            raise ValueError("training-mode binarization needs an rng")
        u = rng.random(values.shape)
        out = np.where(u < (1.0 + values) / 2.0, 1.0, -1.0).astype(values.dtype)
    elif mode == "infer":
        out = np.where(values >= 0, 1.0, -1.0).astype(values.dtype)
    else:
        raise ValueError(f"unknown binarization mode {mode!r}")
    if isinstance(c_in, Tensor):
        return ops.straight_through(c_in, out)
    return out


@dataclass
class CodeStack:
    """Binary codes of one block, one (h, w, C) array of +/-1 per stage."""

    codes: list[np.ndarray] = field(default_factory=list)

    @property
    def stage_count(self) -> int:
        return len(self.codes)

    def __post_init__(self):
        for c in self.codes:
            if not np.isin(c, (-1, 1)).all():
                raise ValueError("code values must be exactly -1 or +1")


@dataclass
class StageState:
    analyzer: list[ConvLstmState | None]
    synthesizer: list[ConvLstmState | None]


@dataclass
class ResidualState:
    r1: np.ndarray
    accumulated: np.ndarray
    stage: StageState

    @property
    def current(self) -> np.ndarray:
        return self.r1 - self.accumulated


class Analyzer(Module):
    def __init__(self, cfg: CodecConfig, rng):
        super().__init__()
        e1, l1, e2, l2, e3 = cfg.widths
        strides = _strides(cfg.downsample)
        self.conv1 = Conv2d(3, e1, 3, strides[0], rng=rng, name="analyzer.conv1")
        self.lstm1 = ConvLSTMCell(e1, l1, 3, rng=rng, name="analyzer.lstm1")
        self.conv2 = Conv2d(l1, e2, 3, strides[1], rng=rng, name="analyzer.conv2")
        self.lstm2 = ConvLSTMCell(e2, l2, 3, rng=rng, name="analyzer.lstm2")
        self.conv3 = Conv2d(l2, e3, 3, strides[2], act="relu", rng=rng, name="analyzer.conv3")
        self.logits = Conv2d(e3, cfg.bits, 1, act="tanh", rng=rng, name="analyzer.logits")

    def __call__(self, x: Tensor, states: list) -> tuple[Tensor, list]:
        h1, s1 = self.lstm1(self.conv1(x), states[0])
        h2, s2 = self.lstm2(self.conv2(h1), states[1])
        return self.logits(self.conv3(h2)), [s1, s2]


class Synthesizer(Module):
    def __init__(self, cfg: CodecConfig, rng):
        super().__init__()
        e1, l1, e2, l2, e3 = cfg.widths
        strides = _strides(cfg.downsample)[::-1]
        self.expand = Conv2d(cfg.bits, e3, 1, act="relu", rng=rng, name="synth.expand")
        self.up1 = Deconv2d(e3, e2, 3, strides[0], rng=rng, name="synth.up1")
        self.lstm1 = ConvLSTMCell(e2, l2, 3, rng=rng, name="synth.lstm1")
        self.up2 = Deconv2d(l2, e1, 3, strides[1], rng=rng, name="synth.up2")
        self.lstm2 = ConvLSTMCell(e1, l1, 3, rng=rng, name="synth.lstm2")
        self.up3 = Deconv2d(l1, e1, 3, strides[2], act="relu", rng=rng, name="synth.up3")
        self.out = Conv2d(e1, 3, 1, act="tanh", rng=rng, name="synth.out")

    def __call__(self, code: Tensor, states: list) -> tuple[Tensor, list]:
        h1, s1 = self.lstm1(self.up1(self.expand(code)), states[0])
        h2, s2 = self.lstm2(self.up2(h1), states[1])
        return self.out(self.up3(h2)), [s1, s2]


def _strides(downsample: int) -> list[int]:
    n = int(np.log2(downsample))
    return [2 if i < n else 1 for i in range(3)]


class ResidualCodec(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.analyzer = Analyzer(cfg, rng)
        self.synthesizer = Synthesizer(cfg, rng)
        self.synthesizer.out.weight.data *= 0.1  # start from near-zero residual estimates

    def initial_state(self) -> StageState:
        return StageState([None, None], [None, None])

    # -- one stage ---------------------------------------------------------

    def encode_stage(self, residual, state: StageState, mode: str = "infer", rng=None):
        """Code one stage of a batch of residuals (unscaled units, (N, 32, 32, 3)).

        Returns (code, synthesized residual in unscaled units, next state).
        """
        x = _as_batch(residual)
        if x.shape[1:] != (BLOCK, BLOCK, 3):
            raise ValueError(f"residual must be 32x32x3 per block, got {x.shape}")
        logits, a_states = self.analyzer(ops.mul(x, RESIDUAL_SCALE), state.analyzer)
        code = binarize(logits, mode, rng)
        synth, s_states = self.synthesizer(code, state.synthesizer)
        return code, ops.mul(synth, 1.0 / RESIDUAL_SCALE), StageState(a_states, s_states)

    def synthesize_stage(self, code, synth_states: list) -> tuple[Tensor, list]:
        synth, states = self.synthesizer(_as_batch(code), synth_states)
        return ops.mul(synth, 1.0 / RESIDUAL_SCALE), states

    # -- whole blocks (inference) ------------------------------------------

    def start_block(self, r1: np.ndarray) -> ResidualState:
        r1 = np.asarray(r1, dtype=np.float32)
        return ResidualState(r1, np.zeros_like(r1), self.initial_state())

    def step_block(self, rs: ResidualState, mode: str = "infer", rng=None) -> tuple[np.ndarray, np.ndarray]:
        """Advance one stage in place; returns (code, synthesized residual)."""
        with no_grad():
            code, synth, rs.stage = self.encode_stage(rs.current[None], rs.stage, mode, rng)
        rs.accumulated = rs.accumulated + synth.data[0]
        return code.data[0].astype(np.int8), synth.data[0]

    def encode_block(self, r1: np.ndarray, n_stages: int, mode: str = "infer", rng=None) -> tuple[CodeStack, np.ndarray]:
        if not 0 <= n_stages <= self.cfg.stages:
            raise ValueError(f"n_stages must be in [0, {self.cfg.stages}]")
        rs = self.start_block(r1)
        codes = [self.step_block(rs, mode, rng)[0] for _ in range(n_stages)]
        return CodeStack(codes), rs.accumulated

    def decode_block(self, stack: CodeStack) -> np.ndarray:
        """Sum of synthesizer outputs over the given codes (no analyzer involved)."""
        total = np.zeros((BLOCK, BLOCK, 3), dtype=np.float32)
        states: list = [None, None]
        with no_grad():
            for code in stack.codes:
                synth, states = self.synthesize_stage(code.astype(np.float32)[None], states)
                total = total + synth.data[0]
        return total

    # -- training ------------------------------------------------------------

    def unroll(self, r1: Tensor, stages: int | None = None, mode: str = "train", rng=None) -> list[Tensor]:
        """Per-stage synthesized residuals for a batch, following the stage recursion."""
        stages = stages or self.cfg.stages
        state = self.initial_state()
        outputs: list[Tensor] = []
        accumulated: Tensor | None = None
        for _ in range(stages):
            current = r1 if accumulated is None else ops.sub(r1, accumulated)
            _, synth, state = self.encode_stage(current, state, mode, rng)
            outputs.append(synth)
            accumulated = synth if accumulated is None else ops.add(accumulated, synth)
        return outputs


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float32)
    return Tensor(arr if arr.ndim == 4 else arr[None])


def residual_loss(r1, synthesized: list[Tensor]) -> Tensor:
    """Mean squared error between r1 and the sum of all stage outputs."""
    r1 = r1 if isinstance(r1, Tensor) else Tensor(np.asarray(r1, dtype=np.float32))
    if not synthesized:
        return ops.mean(ops.square(r1))
    total = synthesized[0]
    for s in synthesized[1:]:
        total = ops.add(total, s)
    return ops.mse(r1, total)


def progressive_loss(r1, synthesized: list[Tensor], monotone: float = 0.0) -> Tensor:
    """Average over stages of the MSE left after each stage.

    ``monotone`` > 0 adds that multiple of the summed stage-to-stage increases
    of the batch MSE, so a stage that makes the reconstruction worse is
    penalized directly rather than at 1/S weight.
    """
    r1 = r1 if isinstance(r1, Tensor) else Tensor(np.asarray(r1, dtype=np.float32))
    terms = []
    total = None
    for s in synthesized:
        total = s if total is None else ops.add(total, s)
        terms.append(ops.mse(r1, total))
    loss = terms[0]
    for t in terms[1:]:
        loss = ops.add(loss, t)
    loss = ops.mul(loss, 1.0 / len(terms))
    if monotone > 0:
        for before, after in zip(terms, terms[1:]):
            loss = ops.add(loss, ops.mul(ops.relu(ops.sub(after, before)), monotone))
    return loss
