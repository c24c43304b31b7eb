"""Hybrid spatiotemporal block predictor.

Two stages:

* the frame-level path consumes the two previous reconstructions and the
  motion-extended frame and produces a full-frame estimate (``conv26``);
* the block path looks at a 64x64 context made of the reconstructed
  above-left / above / left blocks plus the ``conv26`` patch of the current
  block, runs a stack of dilated conv blocks and keeps the bottom-right 32x32
  quadrant.

Ablation modes drop one or both conditioning sources.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import Conv2d, ConvBlock, ConvLSTMCell, Deconv2d, Module, ResBlock, Sequential, Tensor, ops
from .numerics.layers import ConvLstmState

BLOCK = 32


class PredictionMode(str, enum.Enum):
    PMCNN = "pmcnn"
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    NOPRED = "nopred"

    @property
    def uses_frames(self) -> bool:
        return self in (PredictionMode.PMCNN, PredictionMode.TEMPORAL)

    @property
    def uses_blocks(self) -> bool:
        return self in (PredictionMode.PMCNN, PredictionMode.SPATIAL)


@dataclass
class PredictorConfig:
    mode: str = "pmcnn"
    # rows 2, 4, 6, 8 output channels
    enc_channels: tuple[int, int, int, int] = (96, 192, 192, 96)
    # ResBlock repeats at rows 3, 5, 7
    enc_resblocks: tuple[int, int, int] = (4, 8, 12)
    lstm_channels: int = 32
    # (deconv, pooled-conv) channels at rows 10/12, 15/17, 20/22
    dec_channels: tuple[int, int, int] = (32, 32, 16)
    # ResBlock repeats at rows 14, 19, 24
    dec_resblocks: tuple[int, int, int] = (12, 8, 4)
    convblocks: int = 8
    branch_channels: int = 8

    def __post_init__(self):
        self.mode = PredictionMode(self.mode).value
        for key in ("enc_channels", "enc_resblocks", "dec_channels", "dec_resblocks"):
            setattr(self, key, tuple(getattr(self, key)))

    @classmethod
    def reference(cls, mode: str = "pmcnn") -> "PredictorConfig":
        """Channel widths and depths exactly as in the published architecture table."""
        return cls(mode=mode)

    @classmethod
    def desk(cls, mode: str = "pmcnn") -> "PredictorConfig":
        """Narrow, shallow variant trainable on a CPU in minutes."""
        return cls(
            mode=mode,
            enc_channels=(16, 24, 24, 16),
            enc_resblocks=(1, 1, 1),
            lstm_channels=16,
            dec_channels=(16, 8, 8),
            dec_resblocks=(1, 1, 1),
            convblocks=6,
            branch_channels=4,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameContext:
    """Output of the frame-level path for one frame (batched over samples)."""

    conv26: Tensor  # (N, H, W, 3), tanh range
    trace: dict[str, tuple[int, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class BlockIndex:
    row: int
    col: int
    cols: int  # blocks per row

    @property
    def j(self) -> int:
        """Zero-based raster index."""
        return self.row * self.cols + self.col

    @classmethod
    def from_raster(cls, j: int, cols: int) -> "BlockIndex":
        return cls(j // cols, j % cols, cols)


class FramePath(Module):
    """Rows 2-26 of the architecture table."""

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        super().__init__()
        c2, c4, c6, c8 = cfg.enc_channels
        r3, r5, r7 = cfg.enc_resblocks
        d10, d15, d20 = cfg.dec_channels
        r14, r19, r24 = cfg.dec_resblocks
        lstm = cfg.lstm_channels
        self.conv2 = Conv2d(3, c2, 4, 2, batchnorm=True, act="relu", rng=rng, name="conv2")
        self.rb3 = Sequential([ResBlock(c2, rng, f"rb3.{i}") for i in range(r3)])
        self.conv4 = Conv2d(c2, c4, 4, 2, batchnorm=True, act="relu", rng=rng, name="conv4")
        self.rb5 = Sequential([ResBlock(c4, rng, f"rb5.{i}") for i in range(r5)])
        self.conv6 = Conv2d(c4, c6, 4, 2, batchnorm=True, act="relu", rng=rng, name="conv6")
        self.rb7 = Sequential([ResBlock(c6, rng, f"rb7.{i}") for i in range(r7)])
        self.conv8 = Conv2d(c6, c8, 4, 2, batchnorm=True, act="relu", rng=rng, name="conv8")
        self.convlstm9 = ConvLSTMCell(c8, lstm, 3, rng=rng, name="convlstm9")
        self.deconv10 = Deconv2d(lstm, d10, 5, 2, batchnorm=True, act="relu", rng=rng, name="deconv10")
        self.conv12 = Conv2d(3, d10, 4, 1, batchnorm=True, act="relu", rng=rng, name="conv12")
        self.rb14 = Sequential([ResBlock(2 * d10, rng, f"rb14.{i}") for i in range(r14)])
        self.deconv15 = Deconv2d(2 * d10, d15, 5, 2, batchnorm=True, act="relu", rng=rng, name="deconv15")
        self.conv17 = Conv2d(3, d15, 4, 1, batchnorm=True, act="relu", rng=rng, name="conv17")
        self.rb19 = Sequential([ResBlock(2 * d15, rng, f"rb19.{i}") for i in range(r19)])
        self.deconv20 = Deconv2d(2 * d15, d20, 5, 2, batchnorm=True, act="relu", rng=rng, name="deconv20")
        self.conv22 = Conv2d(3, d20, 4, 1, batchnorm=True, act="relu", rng=rng, name="conv22")
        self.rb24 = Sequential([ResBlock(2 * d20, rng, f"rb24.{i}") for i in range(r24)])
        self.deconv25 = Deconv2d(2 * d20, 3, 5, 2, batchnorm=True, act="tanh", rng=rng, name="deconv25")
        self.conv26 = Conv2d(6, 3, 4, 1, batchnorm=False, act="tanh", rng=rng, name="conv26")

    def __call__(self, prev2: Tensor, prev1: Tensor, extended: Tensor) -> FrameContext:
        if not (prev2.shape == prev1.shape == extended.shape):
            raise ValueError(f"frame path inputs differ in shape: {prev2.shape}, {prev1.shape}, {extended.shape}")
        n, h, w, _ = extended.shape
        if h % BLOCK or w % BLOCK:
            raise ValueError(f"frame size {h}x{w} is not a multiple of {BLOCK}")
        trace: dict[str, tuple[int, ...]] = {}

        def rec(row: int, t: Tensor) -> Tensor:
            trace[f"row{row}"] = t.shape[1:]
            return t

        rec(1, extended)
        # Rows 2-8 share weights across the three frames: run them as one batch.
        x = ops.concat([prev2, prev1, extended], axis=0)
        x = rec(2, self.conv2(x))
        x = rec(3, self.rb3(x))
        x = rec(4, self.conv4(x))
        x = rec(5, self.rb5(x))
        x = rec(6, self.conv6(x))
        x = rec(7, self.rb7(x))
        x = rec(8, self.conv8(x))
        state = self.convlstm9.zero_state(x[0:n])
        for t in range(3):
            h9, state = self.convlstm9(x[t * n : (t + 1) * n], state)
        x = rec(9, h9)
        x = rec(10, self.deconv10(x))
        p = rec(11, ops.avg_pool(extended, 5, 8))
        p = rec(12, self.conv12(p))
        x = rec(13, ops.concat_channels([x, p]))
        x = rec(14, self.rb14(x))
        x = rec(15, self.deconv15(x))
        p = rec(16, ops.avg_pool(extended, 5, 4))
        p = rec(17, self.conv17(p))
        x = rec(18, ops.concat_channels([x, p]))
        x = rec(19, self.rb19(x))
        x = rec(20, self.deconv20(x))
        p = rec(21, ops.avg_pool(extended, 5, 2))
        p = rec(22, self.conv22(p))
        x = rec(23, ops.concat_channels([x, p]))
        x = rec(24, self.rb24(x))
        x = rec(25, self.deconv25(x))
        x = rec(26, self.conv26(ops.concat_channels([extended, x])))
        return FrameContext(x, trace)


class BlockPath(Module):
    """Rows 27-28: dilated conv blocks over the 64x64 context, then crop.

    The concatenated branches of the last conv block are fused, together with
    the context itself, into three channels by a 1x1 convolution with a hard
    tanh (clip to [-1, 1]). The fuse starts as a pass-through of the context,
    so the block path begins by reproducing the frame-level estimate (or zero)
    and learns a correction.
    """

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        super().__init__()
        blocks = []
        cin = 3
        for i in range(cfg.convblocks):
            block = ConvBlock(cin, cfg.branch_channels, rng, name=f"cb27.{i}")
            blocks.append(block)
            cin = block.out_channels
        self.blocks = Sequential(blocks)
        self.fuse = Conv2d(cin + 3, 3, 1, batchnorm=False, act="hardtanh", rng=rng, name="cb27.fuse")
        self.fuse.weight.data[0, 0, :cin] *= 0.1
        self.fuse.weight.data[0, 0, cin:] = np.eye(3, dtype=self.fuse.weight.data.dtype)

    def __call__(self, context: Tensor) -> tuple[Tensor, Tensor]:
        features = self.blocks(context)
        cb27 = self.fuse(ops.concat_channels([features, context]))
        return cb27, ops.crop(cb27, BLOCK, BLOCK, BLOCK, BLOCK)


class Predictor(Module):
    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.mode = PredictionMode(cfg.mode)
        self.frame_path = FramePath(cfg, rng) if self.mode.uses_frames else None
        self.block_path = BlockPath(cfg, rng) if self.mode.uses_blocks else None

    def frame_pass(self, prev2, prev1, extended) -> FrameContext | None:
        """Run rows 2-26; inputs are (H, W, 3) arrays or batched (N, H, W, 3) tensors."""
        if self.frame_path is None:
            return None
        return self.frame_path(_batched(prev2), _batched(prev1), _batched(extended))

    def context_for(self, ctx: FrameContext | None, rec_frame, idx: BlockIndex, sample: int = 0) -> Tensor | None:
        """Assemble the 2x2 context grid for one block, shape (1, 64, 64, 3).

        ``rec_frame`` is the reconstructed (or, during training, original)
        current frame; only blocks before ``idx`` in raster order are read.
        Blocks in the first row or column take all three neighbour slots from
        the frame-level estimate (clamped to the frame), or zeros when no
        estimate exists.
        """
        if self.mode is PredictionMode.SPATIAL and (idx.row == 0 or idx.col == 0):
            return None
        conv26 = ctx.conv26[sample : sample + 1] if ctx is not None else None

        def estimate(r: int, c: int) -> Tensor:
            if conv26 is None:
                return Tensor(np.zeros((1, BLOCK, BLOCK, 3), dtype=np.float32))
            r, c = max(r, 0), max(c, 0)
            return ops.crop(conv26, r * BLOCK, c * BLOCK, BLOCK, BLOCK)

        def reconstructed(r: int, c: int) -> Tensor:
            if isinstance(rec_frame, Tensor):
                return ops.crop(rec_frame[sample : sample + 1], r * BLOCK, c * BLOCK, BLOCK, BLOCK)
            patch = rec_frame.read_block(r, c) if hasattr(rec_frame, "read_block") else (
                rec_frame[r * BLOCK : (r + 1) * BLOCK, c * BLOCK : (c + 1) * BLOCK]
            )
            return Tensor(np.ascontiguousarray(patch, dtype=np.float32)[None])

        r, c = idx.row, idx.col
        neighbour = estimate if (r == 0 or c == 0) else reconstructed
        top = ops.concat([neighbour(r - 1, c - 1), neighbour(r - 1, c)], axis=2)
        bottom = ops.concat([neighbour(r, c - 1), estimate(r, c)], axis=2)
        return ops.concat([top, bottom], axis=1)

    def predict_blocks(self, ctx: FrameContext | None, contexts: list[Tensor | None], indices: list[BlockIndex],
                       sample_of: list[int] | None = None) -> Tensor:
        """Predictions (len(indices), 32, 32, 3) for a batch of blocks."""
        sample_of = sample_of or [0] * len(indices)
        zero = Tensor(np.zeros((1, BLOCK, BLOCK, 3), dtype=np.float32))
        if self.mode is PredictionMode.NOPRED:
            return ops.concat([zero] * len(indices), axis=0)
        if self.mode is PredictionMode.TEMPORAL:
            crops = [
                ops.crop(ctx.conv26[s : s + 1], i.row * BLOCK, i.col * BLOCK, BLOCK, BLOCK)
                for i, s in zip(indices, sample_of)
            ]
            return ops.concat(crops, axis=0)
        live = [k for k, cx in enumerate(contexts) if cx is not None]
        if not live:
            return ops.concat([zero] * len(indices), axis=0)
        _, out = self.block_path(ops.concat([contexts[k] for k in live], axis=0))
        if len(live) == len(indices):
            return out
        pieces = []
        for k in range(len(indices)):
            pieces.append(out[live.index(k) : live.index(k) + 1] if k in live else zero)
        return ops.concat(pieces, axis=0)

    def predict_block(self, ctx: FrameContext | None, rec_frame, idx: BlockIndex) -> np.ndarray:
        """Single-block prediction (32, 32, 3) for encoding/decoding."""
        context = self.context_for(ctx, rec_frame, idx) if self.mode.uses_blocks else None
        return self.predict_blocks(ctx, [context], [idx]).data[0]


def _batched(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.data.ndim == 4 else ops.reshape(x, (1,) + x.shape)
    arr = np.asarray(x, dtype=np.float32)
    return Tensor(arr if arr.ndim == 4 else arr[None])


def pmcnn_loss(predictions: Tensor, originals) -> Tensor:
    """Mean squared prediction error over all blocks in the batch."""
    return ops.mse(predictions, originals if isinstance(originals, Tensor) else Tensor(np.asarray(originals, np.float32)))
