"""Desk-scale trained models shared by the slow tests.

Training all four modes takes most of an hour on one CPU core, so the
checkpoints are cached under ``.model-cache/<key>`` in the repository (or
``$PMVC_MODEL_CACHE``). The key covers the training config text and
RECIPE_VERSION, which must be bumped whenever model or training code changes
in a way that invalidates old checkpoints.
"""

from __future__ import annotations

import hashlib
import os
import sys
import time
from functools import lru_cache
from pathlib import Path

from pmvc.model import PMVCModel
from pmvc.train import ABLATION_MODES, TrainConfig, config_to_text, save_config, train_ablation

RECIPE_VERSION = 3
CACHE_ENV = "PMVC_MODEL_CACHE"


def desk_config() -> TrainConfig:
    return TrainConfig(seed=0)


def cache_dir(cfg: TrainConfig) -> Path:
    root = Path(os.environ.get(CACHE_ENV, Path(__file__).resolve().parent.parent / ".model-cache"))
    key = hashlib.sha256(f"{RECIPE_VERSION}\n{config_to_text(cfg)}".encode()).hexdigest()[:12]
    return root / key


@lru_cache(maxsize=None)
def trained_dir() -> Path:
    cfg = desk_config()
    out = cache_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "train.ini")
    t0 = time.time()

    def progress(msg):
        print(f"[desk training {time.time() - t0:7.1f}s] {msg}", file=sys.stderr, flush=True)

    train_ablation(cfg, out, ABLATION_MODES, progress=progress)
    timing = out / "train_seconds.txt"
    if not timing.exists():
        timing.write_text(f"{time.time() - t0:.1f}\n")
    return out


def load(mode: str, stage: str = "final") -> PMVCModel:
    """``stage``: 'final', 'pretrain' (before joint tuning) or 'codec' (shared codec phase)."""
    d = trained_dir()
    name = {"final": f"{mode}.pmck", "pretrain": f"{mode}.pretrain.pmck", "codec": "codec.pmck"}[stage]
    return PMVCModel.load(d / name)


def training_seconds() -> float:
    """Wall time of the run that produced the cache (0 for checkpoints made by an older run)."""
    path = trained_dir() / "train_seconds.txt"
    return float(path.read_text()) if path.exists() else 0.0
