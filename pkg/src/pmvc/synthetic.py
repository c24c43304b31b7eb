"""Procedural video clips with known texture and motion labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .numerics import make_rng

TEXTURES = ("noise", "gradients", "checker", "blobs")
MOTIONS = ("static", "translate", "local-object", "zoom")


@dataclass
class SyntheticDatasetSpec:
    height: int = 64
    width: int = 96
    frames: int = 8
    count: int = 200
    textures: tuple[str, ...] = TEXTURES
    motions: tuple[str, ...] = MOTIONS
    max_speed: int = 3  # pixels per frame for translations
    illumination: float = 0.0  # std of a random per-frame global brightness offset
    seed: int = 0

    def __post_init__(self):
        self.textures = tuple(self.textures)
        self.motions = tuple(self.motions)
        for t in self.textures:
            if t not in TEXTURES:
                raise ValueError(f"unknown texture {t!r}")
        for m in self.motions:
            if m not in MOTIONS:
                raise ValueError(f"unknown motion {m!r}")
        if self.height % 32 or self.width % 32:
            raise ValueError("frame size must be a multiple of 32")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, H, W, 3) float32 on the 8-bit grid of [-1, 1]
    texture: str
    motion: str
    params: dict = field(default_factory=dict)

    def as_uint8(self) -> np.ndarray:
        return np.round((self.frames + 1.0) * 127.5).astype(np.uint8)


def quantize(x: np.ndarray) -> np.ndarray:
    """Clip to [-1, 1] and snap to the nearest 8-bit level."""
    u = np.clip(np.floor((np.clip(x, -1, 1) + 1.0) * 127.5 + 0.5), 0, 255)
    return (u / 127.5 - 1.0).astype(np.float32)


def make_texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """(h, w, 3) texture roughly in [-0.9, 0.9]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "noise":
        sigma = rng.uniform(1.5, 4.0)
        n = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (sigma, sigma, 0))
        n /= n.std() + 1e-9
        return np.tanh(0.45 * n) + rng.uniform(-0.2, 0.2, 3)
    if kind == "gradients":
        out = np.zeros((h, w, 3))
        for _ in range(3):
            theta = rng.uniform(0, 2 * np.pi)
            freq = rng.uniform(0.02, 0.15)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            out += wave[..., None] * rng.uniform(-0.35, 0.35, 3)
        ramp = (xx / w - 0.5)[..., None] * rng.uniform(-0.6, 0.6, 3) + (yy / h - 0.5)[..., None] * rng.uniform(-0.6, 0.6, 3)
        return out + ramp
    if kind == "checker":
        cell = int(rng.integers(6, 20))
        board = ((xx // cell + yy // cell) % 2)[..., None]
        a, b = rng.uniform(-0.7, 0.7, 3), rng.uniform(-0.7, 0.7, 3)
        img = a + board * (b - a)
        return ndimage.gaussian_filter(img, (0.8, 0.8, 0))
    if kind == "blobs":
        out = np.zeros((h, w, 3)) + rng.uniform(-0.4, 0.4, 3)
        for _ in range(int(rng.integers(10, 25))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(4, 16)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            out += g[..., None] * rng.uniform(-0.8, 0.8, 3)
        return np.tanh(out)
    raise ValueError(f"unknown texture {kind!r}")


def _crop(canvas: np.ndarray, top: float, left: float, h: int, w: int) -> np.ndarray:
    ti, li = int(round(top)), int(round(left))
    return canvas[ti : ti + h, li : li + w]


def _zoom_frame(canvas: np.ndarray, h: int, w: int, scale: float) -> np.ndarray:
    ch, cw = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = (yy - h / 2) / scale + ch / 2
    sx = (xx - w / 2) / scale + cw / 2
    return np.stack(
        [ndimage.map_coordinates(canvas[..., c], [sy, sx], order=1, mode="nearest") for c in range(3)], -1
    )


def generate_clip(spec: SyntheticDatasetSpec, texture: str, motion: str, rng: np.random.Generator) -> SyntheticClip:
    h, w, n = spec.height, spec.width, spec.frames
    margin = spec.max_speed * n + 8
    canvas = make_texture(texture, h + 2 * margin, w + 2 * margin, rng)
    params: dict = {}
    frames = []
    if motion == "static":
        frames = [_crop(canvas, margin, margin, h, w)] * n
    elif motion == "translate":
        vx, vy = 0, 0
        while vx == 0 and vy == 0:
            vx, vy = (int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, 2))
        params = {"vx": vx, "vy": vy}
        # content moves by (vx, vy) per frame
        frames = [_crop(canvas, margin - t * vy, margin - t * vx, h, w) for t in range(n)]
    elif motion == "local-object":
        obj_tex = make_texture(TEXTURES[int(rng.integers(len(TEXTURES)))], h, w, rng)
        oh, ow = int(rng.integers(16, h // 2 + 8)), int(rng.integers(16, w // 2 + 8))
        y0, x0 = rng.uniform(0, h - oh), rng.uniform(0, w - ow)
        vx, vy = (int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, 2))
        params = {"vx": vx, "vy": vy, "size": (oh, ow)}
        yy, xx = np.mgrid[0:h, 0:w]
        base = _crop(canvas, margin, margin, h, w)
        for t in range(n):
            top = int(round(np.clip(y0 + t * vy, 0, h - oh)))
            left = int(round(np.clip(x0 + t * vx, 0, w - ow)))
            mask = ((yy >= top) & (yy < top + oh) & (xx >= left) & (xx < left + ow))[..., None]
            shifted = np.roll(obj_tex, (top, left), axis=(0, 1))
            frames.append(np.where(mask, shifted, base))
    elif motion == "zoom":
        rate = rng.uniform(1.01, 1.04) ** (1 if rng.random() < 0.5 else -1)
        params = {"rate": rate}
        frames = [_zoom_frame(canvas, h, w, rate**t) for t in range(n)]
    else:
        raise ValueError(f"unknown motion {motion!r}")
    frames = np.stack(frames).astype(np.float64)
    if spec.illumination > 0 and motion != "static":
        offsets = rng.normal(0.0, spec.illumination, n)
        params["illumination"] = offsets.tolist()
        frames = frames + offsets[:, None, None, None]
    return SyntheticClip(quantize(frames), texture, motion, params)


def generate_dataset(spec: SyntheticDatasetSpec) -> list[SyntheticClip]:
    """Deterministic clips cycling through every (texture, motion) pair."""
    combos = [(t, m) for m in spec.motions for t in spec.textures]
    clips = []
    for i in range(spec.count):
        texture, motion = combos[i % len(combos)]
        clips.append(generate_clip(spec, texture, motion, make_rng(spec.seed, "clip", i)))
    return clips
