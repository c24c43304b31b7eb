"""Seeded, splittable counter-based random streams (Philox)."""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Independent Philox stream for ``seed`` and an optional stream path.

    String stream labels are hashed with CRC32 so callers can name streams,
    e.g. ``make_rng(7, "binarize", epoch)``.
    """
    key = [_label(s) for s in stream]
    seq = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(seq))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in rng.bit_generator.seed_seq.spawn(n)]


def _label(s: int | str) -> int:
    if isinstance(s, str):
        return zlib.crc32(s.encode("utf-8"))
    return int(s)
