"""Motion extension: extrapolate the next frame from the two previous reconstructions.

Vectors are measured by full-search 4x4 block matching between
``ref_prev`` (frame i-2) and ``ref_curr`` (frame i-1) and then re-applied to
``ref_curr``. Nothing here is ever transmitted; the decoder recomputes the same
field from its own reconstructions.

Frames are ``(height, width, 3)`` float arrays in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK = 4
DEFAULT_SEARCH_RANGE = 8


@dataclass(frozen=True)
class MotionField:
    """Per-4x4-block integer vectors; ``vectors[by, bx] = (v_x, v_y)``."""

    vectors: np.ndarray
    search_range: int

    def __post_init__(self):
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError(f"motion vectors must have shape (rows, cols, 2), got {self.vectors.shape}")
        if np.abs(self.vectors).max(initial=0) > self.search_range:
            raise ValueError("motion vector exceeds the search range")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.vectors.shape[0], self.vectors.shape[1]

    @classmethod
    def uniform(cls, height: int, width: int, vx: int, vy: int, search_range: int | None = None) -> "MotionField":
        vectors = np.empty((height // BLOCK, width // BLOCK, 2), dtype=np.int32)
        vectors[..., 0], vectors[..., 1] = vx, vy
        return cls(vectors, search_range if search_range is not None else max(abs(vx), abs(vy)))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    if a.shape[0] % BLOCK or a.shape[1] % BLOCK:
        raise ValueError(f"frame size {a.shape[:2]} is not a multiple of {BLOCK}")


def candidate_order(search_range: int) -> list[tuple[int, int]]:
    """All (v_x, v_y) in the window, in tie-break priority order.

    Smaller L1 norm wins; equal norms fall back to raster order (v_y outer,
    v_x inner, both ascending).
    """
    cands = [(vx, vy) for vy in range(-search_range, search_range + 1) for vx in range(-search_range, search_range + 1)]
    return sorted(cands, key=lambda v: (abs(v[0]) + abs(v[1]), v[1], v[0]))


def estimate_motion_field(ref_prev: np.ndarray, ref_curr: np.ndarray, search_range: int = DEFAULT_SEARCH_RANGE) -> MotionField:
    """SAD full search; block (x, y) of ``ref_curr`` is matched at (x - v_x, y - v_y) in ``ref_prev``.

    Candidates whose reference block would leave the frame are not considered.
    """
    _check_pair(ref_prev, ref_curr)
    if search_range < 0:
        raise ValueError("search range must be non-negative")
    h, w = ref_curr.shape[:2]
    rows, cols = h // BLOCK, w // BLOCK
    prev = ref_prev.astype(np.float64)
    curr = ref_curr.astype(np.float64)
    by = np.arange(rows)[:, None] * BLOCK
    bx = np.arange(cols)[None, :] * BLOCK

    best = np.full((rows, cols), np.inf)
    vectors = np.zeros((rows, cols, 2), dtype=np.int32)
    padded = np.pad(prev, ((search_range, search_range), (search_range, search_range), (0, 0)))
    for vx, vy in candidate_order(search_range):
        # shifted[y, x] = prev[y - vy, x - vx]
        y0, x0 = search_range - vy, search_range - vx
        shifted = padded[y0 : y0 + h, x0 : x0 + w]
        sad = np.abs(curr - shifted).reshape(rows, BLOCK, cols, BLOCK, -1).sum(axis=(1, 3, 4))
        inside = (by - vy >= 0) & (by - vy + BLOCK <= h) & (bx - vx >= 0) & (bx - vx + BLOCK <= w)
        better = inside & (sad < best)
        best[better] = sad[better]
        vectors[better] = (vx, vy)
    return MotionField(vectors, search_range)


def extend_frame(ref_curr: np.ndarray, field: MotionField, return_write_count: bool = False):
    """Build the extended frame by copying each 4x4 block from ``ref_curr`` at (x - v_x, y - v_y).

    The target grid is walked block by block, so every output pixel is written
    exactly once; source coordinates are clamped to the frame.
    """
    h, w = ref_curr.shape[:2]
    if field.grid_shape != (h // BLOCK, w // BLOCK):
        raise ValueError(f"motion field grid {field.grid_shape} does not match frame {ref_curr.shape[:2]}")
    out = np.empty_like(ref_curr)
    writes = np.zeros((h, w), dtype=np.int32)
    offs = np.arange(BLOCK)
    for r in range(field.grid_shape[0]):
        y = r * BLOCK
        for c in range(field.grid_shape[1]):
            x = c * BLOCK
            vx, vy = field.vectors[r, c]
            src_y = np.clip(y - vy + offs, 0, h - 1)
            src_x = np.clip(x - vx + offs, 0, w - 1)
            out[y : y + BLOCK, x : x + BLOCK] = ref_curr[src_y[:, None], src_x[None, :]]
            writes[y : y + BLOCK, x : x + BLOCK] += 1
    if return_write_count:
        return out, writes
    return out


def motion_extend(ref_prev: np.ndarray, ref_curr: np.ndarray, search_range: int = DEFAULT_SEARCH_RANGE) -> np.ndarray:
    return extend_frame(ref_curr, estimate_motion_field(ref_prev, ref_curr, search_range))
