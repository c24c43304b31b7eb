"""Quality and rate-distortion metrics on 8-bit frames."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
CSV_COLUMNS = ("sequence", "mode", "tau_spatial", "tau_temporal", "bpp", "psnr_db", "msssim")
BD_SAMPLES = 1000


class CurveError(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> float:
    """PSNR over all samples; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / err)


def sequence_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame PSNR averaged over frames (lossless frames are skipped; all lossless gives +inf)."""
    values = [psnr(x, y) for x, y in zip(a, b)]
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return fftconvolve(x, window, mode="valid")


def _ssim_terms(x: np.ndarray, y: np.ndarray, max_value: float) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term of two single-channel images."""
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    win = _gaussian_window()
    mx, my = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mx * mx
    syy = _filter(y * y, win) - my * my
    sxy = _filter(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> float:
    """Single-scale SSIM averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean([_ssim_terms(a[..., c], b[..., c], max_value)[0] for c in range(a.shape[-1])]))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = 5, max_value: float = 255.0) -> float:
    """Multi-scale SSIM of (H, W, 3) images, per channel then averaged.

    Frames whose smaller side is below 176 pixels use three scales with the
    first three weights renormalized.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < 176:
        scales = min(scales, 3)
    if min(a.shape[:2]) < 11 * 2 ** (scales - 1):
        raise ValueError(f"image too small for {scales} MS-SSIM scales")
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights /= weights.sum()
    per_channel = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        value = 1.0
        for s in range(scales):
            full, cs = _ssim_terms(x, y, max_value)
            term = full if s == scales - 1 else cs
            value *= max(term, 0.0) ** weights[s]
            x, y = _downsample(x), _downsample(y)
        per_channel.append(value)
    return float(np.mean(per_channel))


def sequence_ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([ms_ssim(x, y) for x, y in zip(a, b)]))


# ---------------------------------------------------------------------------
# Bjontegaard metrics


@dataclass
class RdPoint:
    bpp: float
    psnr: float
    msssim: float = float("nan")

    def __post_init__(self):
        if not (self.bpp > 0 and math.isfinite(self.bpp) and math.isfinite(self.psnr)):
            raise ValueError(f"invalid RD point bpp={self.bpp} psnr={self.psnr}")


def _curve(points) -> tuple[np.ndarray, np.ndarray]:
    pts = [(p.bpp, p.psnr) if isinstance(p, RdPoint) else tuple(p) for p in points]
    if len(pts) < 4:
        raise CurveError("BD metrics need at least 4 points per curve")
    rate = np.array([p[0] for p in pts], dtype=np.float64)
    quality = np.array([p[1] for p in pts], dtype=np.float64)
    if (rate <= 0).any():
        raise CurveError("rates must be positive")
    return np.log10(rate), quality


def _integral_difference(xa, ya, xb, yb) -> float:
    """Mean of (fit_b - fit_a) over the overlap of the x ranges, cubic fits, trapezoid rule."""
    lo, hi = max(xa.min(), xb.min()), min(xa.max(), xb.max())
    if not hi > lo:
        raise CurveError("curves do not overlap")
    pa, pb = np.polyfit(xa, ya, 3), np.polyfit(xb, yb, 3)
    grid = np.linspace(lo, hi, BD_SAMPLES)
    diff = np.polyval(pb, grid) - np.polyval(pa, grid)
    return float(np.trapezoid(diff, grid) / (hi - lo))


def bd_rate(anchor, test) -> float:
    """Average rate difference of ``test`` against ``anchor`` at equal PSNR, in percent (negative saves bits)."""
    ra, qa = _curve(anchor)
    rb, qb = _curve(test)
    return (10.0 ** _integral_difference(qa, ra, qb, rb) - 1.0) * 100.0


def bd_psnr(anchor, test) -> float:
    """Average PSNR difference of ``test`` against ``anchor`` at equal rate, in dB."""
    ra, qa = _curve(anchor)
    rb, qb = _curve(test)
    return _integral_difference(ra, qa, rb, qb)


# ---------------------------------------------------------------------------
# RD sweeps and CSV


@dataclass
class RdRow:
    sequence: str
    mode: str
    tau_spatial: float
    tau_temporal: float
    bpp: float
    psnr_db: float
    msssim: float

    def point(self) -> RdPoint:
        return RdPoint(self.bpp, self.psnr_db, self.msssim)


def rd_sweep(name: str, frames: np.ndarray, model, grid, tau_temporal: float | None = None,
             pipeline_config=None) -> list[RdRow]:
    """Encode ``frames`` once per spatial threshold (8-bit MSE units) and measure each point.

    ``frames`` are uint8 (T, H, W, 3); metrics compare 8-bit exports.
    """
    from .bitstream import bit_accounting
    from .mode_control import DEFAULT_TAU_TEMPORAL_8BIT, Thresholds
    from .pipeline import encode_sequence, to_normalized, to_uint8

    grid = list(grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    tau_temporal = DEFAULT_TAU_TEMPORAL_8BIT if tau_temporal is None else tau_temporal
    x = to_normalized(frames)
    rows = []
    for tau in grid:
        result = encode_sequence(x, model, Thresholds.from_8bit(tau, tau_temporal), pipeline_config)
        rec = to_uint8(result.reconstruction)
        report = bit_accounting(result.document)
        rows.append(RdRow(name, model.mode, float(tau), float(tau_temporal), report.bpp,
                          sequence_psnr(frames, rec), sequence_ms_ssim(frames, rec)))
    return rows


def write_csv(path: str | Path, rows: list[RdRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})


def read_csv(path: str | Path) -> list[RdRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        return [
            RdRow(r["sequence"], r["mode"], *(float(r[k]) for k in CSV_COLUMNS[2:]))
            for r in reader
        ]


def average_curve(rows: list[RdRow]) -> list[RdPoint]:
    """Average several sequences' RD rows at each threshold (rows must share the grid)."""
    by_tau: dict[float, list[RdRow]] = {}
    for r in rows:
        by_tau.setdefault(r.tau_spatial, []).append(r)
    return [
        RdPoint(float(np.mean([r.bpp for r in rs])), float(np.mean([r.psnr_db for r in rs])),
                float(np.mean([r.msssim for r in rs])))
        for _, rs in sorted(by_tau.items())
    ]
