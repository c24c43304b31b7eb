"""PMVC container: headers, arithmetic-coded skip flags, stage counts and packed codes.

Byte layout (integers little-endian)::

    sequence header (27 bytes)
        b"PMVC" | version u16 | width u16 | height u16 | frame_count u32 |
        block_size u8 | stages u8 | downsample u8 | bits u16 | model_hash 8 bytes
    per frame
        sync u8 = 0xFA | frame index u32 | flag section length u16 |
        flag section (adaptive binary range coder, one flag per block, raster order) |
        stage counts: 3 bits (n - 1) per coded block, raster order, MSB first,
            zero-padded to a whole byte
        payload: code bits of every coded block, raster order; inside a block
            stage-major, then row-major position, then channel; 1 <=> +1;
            MSB first, zero-padded to a whole byte

Motion vectors never appear in the stream: the decoder re-derives them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PMVC"
VERSION = 1
SYNC = 0xFA
STAGE_COUNT_BITS = 3
_HEADER = struct.Struct("<4sHHHIBBBH8s")
_FRAME_HEADER = struct.Struct("<BIH")


class BitstreamError(ValueError):
    pass


class BadMagicError(BitstreamError):
    pass


class VersionMismatchError(BitstreamError):
    pass


class ModelHashMismatchError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class CorruptStreamError(BitstreamError):
    pass


# ---------------------------------------------------------------------------
# adaptive binary range coder

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
COUNT_LIMIT = 1 << 16


class AdaptiveBitModel:
    """Bit frequency counts starting at (1, 1), halved once their sum reaches 2**16."""

    def __init__(self):
        self.c0 = 1
        self.c1 = 1

    def update(self, bit: int) -> None:
        if bit:
            self.c1 += 1
        else:
            self.c0 += 1
        if self.c0 + self.c1 >= COUNT_LIMIT:
            self.c0 = (self.c0 + 1) >> 1
            self.c1 = (self.c1 + 1) >> 1


class ArithmeticEncoder:
    """32-bit range coder; carries propagate into already emitted bytes."""

    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def _carry(self) -> None:
        i = len(self.out) - 1
        while i >= 0 and self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        if i < 0:
            raise OverflowError("carry out of the first byte")
        self.out[i] += 1

    def encode_bit(self, model: AdaptiveBitModel, bit: int) -> None:
        r = self.range // (model.c0 + model.c1)
        split = r * model.c0
        if bit:
            self.low += split
            self.range -= split
        else:
            self.range = split
        if self.low > MASK32:
            self._carry()
            self.low &= MASK32
        while self.range < TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
            self.range <<= 8
        model.update(bit)

    def finish(self) -> bytes:
        """Emit the shortest tail that pins the final interval, then drop trailing zero bytes."""
        for nbytes in range(1, 5):
            unit = 1 << (32 - 8 * nbytes)
            value = -(-self.low // unit) * unit
            if value < self.low + self.range:
                break
        if value > MASK32:
            self._carry()
            value &= MASK32
        for k in range(nbytes):
            self.out.append((value >> (24 - 8 * k)) & 0xFF)
        data = bytes(self.out)
        return data.rstrip(b"\x00")


class ArithmeticDecoder:
    """Inverse of :class:`ArithmeticEncoder`; bytes past the end read as zero."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode_bit(self, model: AdaptiveBitModel) -> int:
        r = self.range // (model.c0 + model.c1)
        split = r * model.c0
        if self.code < split:
            bit = 0
            self.range = split
        else:
            bit = 1
            self.code -= split
            self.range -= split
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        model.update(bit)
        return bit


def arith_encode_bits(bits) -> bytes:
    enc = ArithmeticEncoder()
    model = AdaptiveBitModel()
    for b in bits:
        enc.encode_bit(model, int(bool(b)))
    return enc.finish()


def arith_decode_bits(data: bytes, count: int) -> list[int]:
    dec = ArithmeticDecoder(data)
    model = AdaptiveBitModel()
    return [dec.decode_bit(model) for _ in range(count)]


# ---------------------------------------------------------------------------
# document model


@dataclass(frozen=True)
class SequenceHeader:
    width: int
    height: int
    frame_count: int
    stages: int = 8
    downsample: int = 8
    bits: int = 32
    model_hash: bytes = bytes(8)
    block_size: int = 32
    version: int = VERSION

    @property
    def blocks_per_row(self) -> int:
        return self.width // self.block_size

    @property
    def blocks_per_frame(self) -> int:
        return (self.width // self.block_size) * (self.height // self.block_size)

    @property
    def code_shape(self) -> tuple[int, int, int]:
        side = self.block_size // self.downsample
        return side, side, self.bits

    @property
    def bits_per_stage(self) -> int:
        h, w, c = self.code_shape
        return h * w * c


@dataclass
class FrameRecord:
    """One coded frame.

    ``codes`` holds one int8 array of shape (n, h, w, C) with values +/-1 per
    coded block in raster order; its first extent is the block's stage count.
    """

    index: int
    skip_flags: list[bool]
    codes: list[np.ndarray] = field(default_factory=list)

    @property
    def stage_counts(self) -> list[int]:
        return [c.shape[0] for c in self.codes]


@dataclass
class BitstreamDocument:
    header: SequenceHeader
    frames: list[FrameRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# writer / reader


def _pack_counts(frame: FrameRecord, stages: int) -> bytes:
    counts = np.array(frame.stage_counts, dtype=np.int64)
    if counts.size and (counts.min() < 1 or counts.max() > stages):
        raise BitstreamError(f"stage counts must lie in [1, {stages}]")
    bits = ((counts[:, None] - 1) >> np.array([2, 1, 0])) & 1
    return np.packbits(bits.reshape(-1).astype(np.uint8)).tobytes()


def _pack_codes(frame: FrameRecord) -> bytes:
    if not frame.codes:
        return b""
    bits = np.concatenate([(c.reshape(-1) > 0) for c in frame.codes]).astype(np.uint8)
    return np.packbits(bits).tobytes()


def write_frame(frame: FrameRecord, header: SequenceHeader) -> bytes:
    if len(frame.skip_flags) != header.blocks_per_frame:
        raise BitstreamError(f"frame {frame.index}: {len(frame.skip_flags)} flags for {header.blocks_per_frame} blocks")
    coded = sum(1 for s in frame.skip_flags if not s)
    if coded != len(frame.codes):
        raise BitstreamError(f"frame {frame.index}: {coded} coded blocks but {len(frame.codes)} code stacks")
    for c in frame.codes:
        if c.shape[1:] != header.code_shape:
            raise BitstreamError(f"code shape {c.shape[1:]} does not match header {header.code_shape}")
    flags = arith_encode_bits(frame.skip_flags)
    if len(flags) > 0xFFFF:
        raise BitstreamError("flag section too long")
    return (_FRAME_HEADER.pack(SYNC, frame.index, len(flags)) + flags + _pack_counts(frame, header.stages)
            + _pack_codes(frame))


def write_sequence(doc: BitstreamDocument) -> bytes:
    h = doc.header
    if len(h.model_hash) != 8:
        raise BitstreamError("model hash must be 8 bytes")
    if h.frame_count != len(doc.frames):
        raise BitstreamError(f"header announces {h.frame_count} frames, document has {len(doc.frames)}")
    out = bytearray(
        _HEADER.pack(MAGIC, h.version, h.width, h.height, h.frame_count, h.block_size, h.stages, h.downsample,
                     h.bits, h.model_hash)
    )
    for frame in doc.frames:
        out += write_frame(frame, h)
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(f"stream ends inside {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def read_header(data: bytes) -> SequenceHeader:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError("not a PMVC bitstream (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedStreamError("stream ends inside the sequence header")
    magic, version, width, height, frames, block, stages, down, bits, mhash = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"bitstream version {version}, decoder supports {VERSION}")
    return SequenceHeader(width, height, frames, stages, down, bits, mhash, block, version)


def read_sequence(data: bytes, expected_model_hash: bytes | None = None) -> BitstreamDocument:
    header = read_header(data)
    if expected_model_hash is not None and header.model_hash != expected_model_hash:
        raise ModelHashMismatchError(
            f"bitstream was produced with model {header.model_hash.hex()}, decoder has {expected_model_hash.hex()}"
        )
    cur = _Cursor(data)
    cur.pos = _HEADER.size
    doc = BitstreamDocument(header)
    code_h, code_w, code_c = header.code_shape
    per_stage = header.bits_per_stage
    for _ in range(header.frame_count):
        sync, index, flag_len = _FRAME_HEADER.unpack(cur.take(_FRAME_HEADER.size, "a frame header"))
        if sync != SYNC:
            raise CorruptStreamError(f"lost frame sync at byte {cur.pos - _FRAME_HEADER.size}")
        flags = [bool(b) for b in arith_decode_bits(cur.take(flag_len, "the flag section"), header.blocks_per_frame)]
        coded = flags.count(False)
        count_bits = np.unpackbits(
            np.frombuffer(cur.take((coded * STAGE_COUNT_BITS + 7) // 8, "the stage counts"), dtype=np.uint8)
        )[: coded * STAGE_COUNT_BITS].reshape(-1, 3).astype(np.int64)
        counts = (count_bits @ np.array([4, 2, 1]) + 1).tolist()
        if any(n > header.stages for n in counts):
            raise CorruptStreamError(f"frame {index}: stage count exceeds {header.stages}")
        code_bits = per_stage * sum(counts)
        body = np.unpackbits(np.frombuffer(cur.take((code_bits + 7) // 8, "the frame payload"), dtype=np.uint8))
        pos = 0
        codes = []
        for n in counts:
            chunk = body[pos : pos + n * per_stage].astype(np.int8)
            codes.append((2 * chunk - 1).reshape(n, code_h, code_w, code_c))
            pos += n * per_stage
        doc.frames.append(FrameRecord(index, flags, codes))
    if cur.pos != len(data):
        raise CorruptStreamError(f"{len(data) - cur.pos} trailing bytes after the last frame")
    return doc


# ---------------------------------------------------------------------------
# accounting


@dataclass
class BitReport:
    header_bits: int
    flag_bits: int
    stage_count_bits: int
    code_bits: int
    padding_bits: int
    pixels: int

    @property
    def total(self) -> int:
        return self.header_bits + self.flag_bits + self.stage_count_bits + self.code_bits + self.padding_bits

    @property
    def bpp(self) -> float:
        return self.total / self.pixels if self.pixels else 0.0

    def as_dict(self) -> dict:
        return {
            "header_bits": self.header_bits,
            "flag_bits": self.flag_bits,
            "stage_count_bits": self.stage_count_bits,
            "code_bits": self.code_bits,
            "padding_bits": self.padding_bits,
            "total": self.total,
            "bpp": self.bpp,
        }


def bit_accounting(doc: BitstreamDocument) -> BitReport:
    """Exact breakdown of the serialized size of ``doc``; ``total`` equals 8 * len(write_sequence(doc))."""
    h = doc.header
    header_bits = 8 * _HEADER.size
    flag_bits = stage_bits = code_bits = padding = 0
    for frame in doc.frames:
        header_bits += 8 * _FRAME_HEADER.size
        flag_bits += 8 * len(arith_encode_bits(frame.skip_flags))
        s = STAGE_COUNT_BITS * len(frame.codes)
        c = h.bits_per_stage * sum(frame.stage_counts)
        stage_bits += s
        code_bits += c
        padding += (-s) % 8 + (-c) % 8
    return BitReport(header_bits, flag_bits, stage_bits, code_bits, padding, h.width * h.height * h.frame_count)
