"""Sequence encoder/decoder.

Frames are coded in order and blocks in raster order. Each block is either
skipped (copied from the co-located block of the previous reconstruction) or
predicted and refined by a variable number of residual stages. The encoder
runs the decoder's reconstruction path itself, so both sides hold identical
reconstructions after every block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitstream import BitstreamDocument, FrameRecord, SequenceHeader, read_sequence, write_sequence
from .mode_control import Thresholds, decide_skip, decide_stages
from .model import PMVCModel
from .motion import motion_extend
from .numerics import no_grad
from .predictor import BLOCK, BlockIndex, PredictionMode
from .residual_codec import CodeStack

DEFAULT_BETA = 12.0 / 255.0 * 2.0
DEBLOCK_MODES = ("in-loop", "post-loop", "off")
INTRA_FRAMES = 2


class CausalityError(RuntimeError):
    """Raised when a block of the current frame is read before it was reconstructed."""


@dataclass
class PipelineConfig:
    deblock: str = "in-loop"
    beta: float = DEFAULT_BETA
    max_stages: int | None = None

    def __post_init__(self):
        if self.deblock not in DEBLOCK_MODES:
            raise ValueError(f"deblock must be one of {DEBLOCK_MODES}")


# ---------------------------------------------------------------------------
# sample conversion and clamping


def to_normalized(frames_u8: np.ndarray) -> np.ndarray:
    return (np.asarray(frames_u8, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255, rounding halves away from zero."""
    v = (np.asarray(frames, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def clamp_reconstruction(t):
    return np.clip(t, -1.0, 1.0)


# ---------------------------------------------------------------------------
# deblocking


def _filter_edges(frame: np.ndarray, axis: int, beta: float, coded: np.ndarray | None) -> None:
    for k, edge in enumerate(range(BLOCK, frame.shape[axis], BLOCK)):
        sl = (lambda i: (slice(None), i)) if axis == 1 else (lambda i: (i,))
        p1, p0 = frame[sl(edge - 2)], frame[sl(edge - 1)]
        q0, q1 = frame[sl(edge)], frame[sl(edge + 1)]
        delta = (4.0 * (q0 - p0) + (p1 - q1)) / 8.0
        gate = np.abs(p0 - q0) < beta
        if coded is not None:
            # an edge between two copied blocks was already filtered in its source frame
            pair = coded[:, k] | coded[:, k + 1] if axis == 1 else coded[k] | coded[k + 1]
            gate &= np.repeat(pair, BLOCK)[:, None]
        frame[sl(edge - 1)] = np.where(gate, p0 + delta, p0)
        frame[sl(edge)] = np.where(gate, q0 - delta, q0)


def deblock(frame: np.ndarray, beta: float = DEFAULT_BETA, coded: np.ndarray | None = None) -> np.ndarray:
    """Smooth small steps across 32-aligned block boundaries; vertical edges first.

    ``coded`` is an optional (rows, cols) mask; edges whose two blocks are
    both uncoded are left alone.
    """
    out = np.array(frame, dtype=np.float32, copy=True)
    _filter_edges(out, 1, beta, coded)
    _filter_edges(out, 0, beta, coded)
    return clamp_reconstruction(out)


# ---------------------------------------------------------------------------
# reconstruction memory


class RecMemory:
    """Finished reconstructions plus the block-by-block current frame."""

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self.frames: list[np.ndarray] = []
        self._start_frame()

    def _start_frame(self) -> None:
        self.current = np.zeros((self.height, self.width, 3), dtype=np.float32)
        self.written = np.zeros((self.height // BLOCK, self.width // BLOCK), dtype=bool)

    def read_block(self, row: int, col: int) -> np.ndarray:
        if not self.written[row, col]:
            raise CausalityError(f"block ({row}, {col}) read before it was reconstructed")
        return self.current[row * BLOCK : (row + 1) * BLOCK, col * BLOCK : (col + 1) * BLOCK]

    def write_block(self, row: int, col: int, block: np.ndarray) -> None:
        if self.written[row, col]:
            raise CausalityError(f"block ({row}, {col}) written twice")
        self.current[row * BLOCK : (row + 1) * BLOCK, col * BLOCK : (col + 1) * BLOCK] = block
        self.written[row, col] = True

    def previous_block(self, row: int, col: int) -> np.ndarray:
        return self.frames[-1][row * BLOCK : (row + 1) * BLOCK, col * BLOCK : (col + 1) * BLOCK]

    def commit(self, frame: np.ndarray) -> None:
        if not self.written.all():
            raise CausalityError("frame committed with unreconstructed blocks")
        self.frames.append(frame)
        self._start_frame()


# ---------------------------------------------------------------------------
# per-frame coding shared by encoder and decoder


@dataclass
class FrameStats:
    index: int
    skipped: int
    blocks: int
    stage_counts: list[int]
    prediction_mse: list[float] = field(default_factory=list)  # coded blocks, closed-loop context

    @property
    def skip_fraction(self) -> float:
        return self.skipped / self.blocks


@dataclass
class EncodeResult:
    document: BitstreamDocument
    reconstruction: np.ndarray  # (T, H, W, 3) output frames in [-1, 1]
    stats: list[FrameStats] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return write_sequence(self.document)


def _frame_context(model: PMVCModel, memory: RecMemory, t: int):
    """Frame-level estimate from the two previous reconstructions (None for intra frames)."""
    if t < INTRA_FRAMES or not PredictionMode(model.mode).uses_frames:
        return None
    prev2, prev1 = memory.frames[t - 2], memory.frames[t - 1]
    extended = motion_extend(prev2, prev1, model.cfg.search_range)
    return model.predictor.frame_pass(prev2, prev1, extended)


def _prediction(model: PMVCModel, ctx, memory: RecMemory, t: int, idx: BlockIndex) -> np.ndarray:
    if t < INTRA_FRAMES:
        return np.zeros((BLOCK, BLOCK, 3), dtype=np.float32)
    return model.predictor.predict_block(ctx, memory, idx)


def _finish_frame(memory: RecMemory, cfg: PipelineConfig, skip_flags: list[bool]) -> np.ndarray:
    """Commit the current frame to memory; return the frame as output."""
    frame = memory.current
    coded = ~np.array(skip_flags, dtype=bool).reshape(memory.written.shape)
    if cfg.deblock == "in-loop":
        frame = deblock(frame, cfg.beta, coded)
        memory.commit(frame)
        return frame
    memory.commit(frame)
    return deblock(frame, cfg.beta) if cfg.deblock == "post-loop" else frame


def _check_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected frames of shape (T, H, W, 3), got {frames.shape}")
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame")
    t, h, w, _ = frames.shape
    if h % BLOCK or w % BLOCK or h == 0 or w == 0:
        raise ValueError(f"frame size {w}x{h} is not a multiple of {BLOCK}")
    if frames.min() < -1.0 or frames.max() > 1.0:
        raise ValueError("frame samples must lie in [-1, 1]")
    return frames


def encode_sequence(frames: np.ndarray, model: PMVCModel, thresholds: Thresholds | None = None,
                    config: PipelineConfig | None = None) -> EncodeResult:
    """Encode (T, H, W, 3) frames in [-1, 1]."""
    frames = _check_frames(frames)
    thresholds = thresholds or Thresholds()
    cfg = config or PipelineConfig()
    n, h, w, _ = frames.shape
    rows, cols = h // BLOCK, w // BLOCK
    codec_cfg = model.cfg.codec
    stage_limit = min(cfg.max_stages or codec_cfg.stages, codec_cfg.stages)
    header = SequenceHeader(w, h, n, codec_cfg.stages, codec_cfg.downsample, codec_cfg.bits, model.model_hash())
    memory = RecMemory(h, w)
    doc = BitstreamDocument(header)
    outputs, stats = [], []
    model.eval()
    with no_grad():
        for t in range(n):
            ctx = _frame_context(model, memory, t)
            flags, codes, pred_err = [], [], []
            for j in range(rows * cols):
                idx = BlockIndex.from_raster(j, cols)
                ys, xs = slice(idx.row * BLOCK, (idx.row + 1) * BLOCK), slice(idx.col * BLOCK, (idx.col + 1) * BLOCK)
                original = frames[t, ys, xs]
                skip = t >= INTRA_FRAMES and decide_skip(original, frames[t - 1, ys, xs], thresholds.tau_temporal)
                flags.append(skip)
                if skip:
                    memory.write_block(idx.row, idx.col, memory.previous_block(idx.row, idx.col))
                    continue
                pred = _prediction(model, ctx, memory, t, idx)
                pred_err.append(float(np.mean((original - pred) ** 2)))
                decision = decide_stages(original - pred, model.codec, thresholds.tau_spatial, prediction=pred,
                                         max_stages=stage_limit)
                codes.append(np.stack(decision.codes.codes).astype(np.int8))
                memory.write_block(idx.row, idx.col, clamp_reconstruction(pred + decision.residual_reconstruction))
            outputs.append(_finish_frame(memory, cfg, flags))
            record = FrameRecord(t, flags, codes)
            doc.frames.append(record)
            stats.append(FrameStats(t, sum(flags), len(flags), record.stage_counts, pred_err))
    return EncodeResult(doc, np.stack(outputs), stats)


def decode_sequence(doc: BitstreamDocument | bytes, model: PMVCModel,
                    config: PipelineConfig | None = None) -> np.ndarray:
    """Rebuild the frames from the stream and the model alone."""
    if isinstance(doc, (bytes, bytearray)):
        doc = read_sequence(bytes(doc), expected_model_hash=model.model_hash())
    cfg = config or PipelineConfig()
    header = doc.header
    codec_cfg = model.cfg.codec
    if (header.stages, header.downsample, header.bits) != (codec_cfg.stages, codec_cfg.downsample, codec_cfg.bits):
        raise ValueError("stream code geometry does not match the model")
    rows, cols = header.height // BLOCK, header.width // BLOCK
    memory = RecMemory(header.height, header.width)
    outputs = []
    model.eval()
    with no_grad():
        for t, record in enumerate(doc.frames):
            ctx = _frame_context(model, memory, t)
            stacks = iter(record.codes)
            for j in range(rows * cols):
                idx = BlockIndex.from_raster(j, cols)
                if record.skip_flags[j]:
                    if t == 0:
                        raise ValueError("first frame cannot contain skipped blocks")
                    memory.write_block(idx.row, idx.col, memory.previous_block(idx.row, idx.col))
                    continue
                pred = _prediction(model, ctx, memory, t, idx)
                residual = model.codec.decode_block(CodeStack(list(next(stacks))))
                memory.write_block(idx.row, idx.col, clamp_reconstruction(pred + residual))
            outputs.append(_finish_frame(memory, cfg, record.skip_flags))
    if not outputs:
        return np.zeros((0, header.height, header.width, 3), dtype=np.float32)
    return np.stack(outputs)


# ---------------------------------------------------------------------------
# frame I/O: planar RGB24 files plus a descriptor, and PNG

DESCRIPTOR = "sequence.json"


def write_frames(directory: str | Path, frames_u8: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames_u8 = np.asarray(frames_u8, dtype=np.uint8)
    n, h, w, _ = frames_u8.shape
    (directory / DESCRIPTOR).write_text(json.dumps({"width": w, "height": h, "count": n}))
    for i, f in enumerate(frames_u8):
        (directory / f"frame_{i:05d}.rgb").write_bytes(np.ascontiguousarray(f.transpose(2, 0, 1)).tobytes())


def read_frames(directory: str | Path) -> np.ndarray:
    """Load a frame directory as (T, H, W, 3) uint8 (planar RGB24 or, without a descriptor, PNG files)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    desc = directory / DESCRIPTOR
    if not desc.exists():
        pngs = sorted(directory.glob("*.png"))
        if not pngs:
            raise FileNotFoundError(f"{directory} has neither {DESCRIPTOR} nor PNG frames")
        return np.stack([read_png(p) for p in pngs])
    meta = json.loads(desc.read_text())
    w, h, n = int(meta["width"]), int(meta["height"]), int(meta["count"])
    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    for i in range(n):
        raw = (directory / f"frame_{i:05d}.rgb").read_bytes()
        if len(raw) != 3 * h * w:
            raise ValueError(f"frame {i}: expected {3 * h * w} bytes, found {len(raw)}")
        frames[i] = np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w).transpose(1, 2, 0)
    return frames


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_png(path: str | Path, frame_u8: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(frame_u8, dtype=np.uint8), "RGB").save(path)


def write_png_frames(directory: str | Path, frames_u8: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames_u8):
        write_png(directory / f"frame_{i:05d}.png", f)
