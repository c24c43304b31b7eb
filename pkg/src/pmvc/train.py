"""Three-phase training on synthetic clips.

1. residual codec alone on 32x32 blocks (prediction fixed to zero);
2. predictor alone on prediction error;
3. both together on L_total = L_vcnn + L_res.

Training is teacher-forced: the predictor is conditioned on original
previous frames and original neighbouring blocks rather than on the codec's
reconstructions (optionally perturbed by Gaussian noise to mimic coding
error). Sequential closed-loop reconstruction inside training would serialize
every block of every frame.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, PMVCModel
from .motion import motion_extend
from .numerics import Tensor, adam_step, backward, make_rng, no_grad, ops, step_decay, zero_grad
from .predictor import BLOCK, BlockIndex, PredictionMode, pmcnn_loss
from .residual_codec import progressive_loss, residual_loss
from .synthetic import SyntheticDatasetSpec, generate_dataset

CODEC_LOSSES = ("final", "progressive")
LOG_COLUMNS = ("step", "phase", "epoch", "lr", "loss_vcnn", "loss_res", "loss_total")


@dataclass
class PhaseSchedule:
    epochs: int
    steps_per_epoch: int
    lr: float
    decay: float = 0.1
    period: int = 5  # epochs between decays

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epochs and steps_per_epoch must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return step_decay(self.lr, epoch, self.decay, self.period)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainConfig:
    mode: str = "pmcnn"
    seed: int = 0
    batch_size: int = 8
    blocks_per_frame: int = 2  # blocks of each training frame that enter the loss
    codec_batch_size: int = 16
    codec_loss: str = "progressive"
    monotone_weight: float = 0.0  # progressive loss: penalty on stage-to-stage MSE increases (off by default)
    context_noise: float = 0.02  # std of noise added to teacher-forced conditioning
    codec_gain_min: float = 0.125  # codec blocks: half are scaled by a log-uniform gain in [min, 1]
    intra_weight: float = 0.25  # joint phase: weight of raw-block coding (intra frames share the codec)
    flip: bool = True
    channel_jitter: float = 0.05
    dataset: SyntheticDatasetSpec = field(default_factory=lambda: SyntheticDatasetSpec(illumination=0.05))
    validation_count: int = 16
    codec: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(10, 60, 3e-3, 0.1, 4))
    codec_gain: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(3, 100, 1e-3, 1.0, 5))
    pmcnn: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(20, 15, 3e-3, 0.3, 5))
    hybrid: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(20, 10, 1e-3, 0.3, 5))
    joint: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(8, 50, 3e-4, 0.5, 4))

    def __post_init__(self):
        self.mode = PredictionMode(self.mode).value
        if self.codec_loss not in CODEC_LOSSES:
            raise ValueError(f"codec_loss must be one of {CODEC_LOSSES}")
        if self.batch_size < 1 or self.codec_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if not 0 < self.codec_gain_min <= 1:
            raise ValueError("codec_gain_min must lie in (0, 1]")
        if self.intra_weight < 0 or self.monotone_weight < 0:
            raise ValueError("intra_weight and monotone_weight must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig.desk(self.mode)

    def validation_spec(self) -> SyntheticDatasetSpec:
        return dataclasses.replace(self.dataset, count=self.validation_count, seed=self.dataset.seed + 7919)


# ---------------------------------------------------------------------------
# config files


_SECTIONS = {"dataset": SyntheticDatasetSpec, "codec": PhaseSchedule, "codec_gain": PhaseSchedule,
             "pmcnn": PhaseSchedule,
             "hybrid": PhaseSchedule, "joint": PhaseSchedule}


def _parse_value(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        return tuple(s.strip() for s in text.split(",") if s.strip())
    return type(like)(text.strip())


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_to_text(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    parser["train"] = {f.name: _format_value(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)
                       if f.name not in _SECTIONS}
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def config_from_text(text: str) -> TrainConfig:
    """Parse an INI-style config; unknown keys are errors, missing keys keep defaults."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    base = TrainConfig()
    kwargs = {}
    for section in parser.sections():
        if section == "train":
            target = base
        elif section in _SECTIONS:
            target = getattr(base, section)
        else:
            raise ValueError(f"unknown config section [{section}]")
        known = {f.name for f in dataclasses.fields(target)}
        values = {}
        for key, raw in parser[section].items():
            if key not in known or (section == "train" and key in _SECTIONS):
                raise ValueError(f"unknown config key {section}.{key}")
            values[key] = _parse_value(raw, getattr(target, key))
        if section == "train":
            kwargs.update(values)
        else:
            kwargs[section] = dataclasses.replace(target, **values)
    return TrainConfig(**kwargs)


def load_config(path: str | Path) -> TrainConfig:
    return config_from_text(Path(path).read_text())


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(cfg))


# ---------------------------------------------------------------------------
# logging


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, phase: str, epoch: int, lr: float, vcnn: float, res: float) -> None:
        self.rows.append({"step": len(self.rows), "phase": phase, "epoch": epoch, "lr": lr,
                          "loss_vcnn": vcnn, "loss_res": res, "loss_total": vcnn + res})

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == name]


# ---------------------------------------------------------------------------
# data


class FrameSampler:
    """Draws teacher-forced training samples (frame triplets and blocks) from clips."""

    def __init__(self, clips, search_range: int):
        self.clips = [c.frames for c in clips]
        self.search_range = search_range
        self._extended: dict[tuple[int, int], np.ndarray] = {}
        self.items = [(c, t) for c, f in enumerate(self.clips) for t in range(2, len(f))]
        if not self.items:
            raise ValueError("clips need at least three frames")
        h, w = self.clips[0].shape[1:3]
        self.rows, self.cols = h // BLOCK, w // BLOCK

    def extended(self, c: int, t: int) -> np.ndarray:
        key = (c, t)
        if key not in self._extended:
            f = self.clips[c]
            self._extended[key] = motion_extend(f[t - 2], f[t - 1], self.search_range)
        return self._extended[key]

    def frame_batch(self, rng: np.random.Generator, n: int, items=None):
        picks = items if items is not None else [self.items[i] for i in rng.integers(len(self.items), size=n)]
        prev2 = np.stack([self.clips[c][t - 2] for c, t in picks])
        prev1 = np.stack([self.clips[c][t - 1] for c, t in picks])
        ext = np.stack([self.extended(c, t) for c, t in picks])
        cur = np.stack([self.clips[c][t] for c, t in picks])
        return prev2, prev1, ext, cur

    def random_blocks(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Random 32x32 crops (not grid-aligned) from any frame."""
        out = np.empty((n, BLOCK, BLOCK, 3), dtype=np.float32)
        for k in range(n):
            f = self.clips[int(rng.integers(len(self.clips)))]
            frame = f[int(rng.integers(len(f)))]
            y = int(rng.integers(frame.shape[0] - BLOCK + 1))
            x = int(rng.integers(frame.shape[1] - BLOCK + 1))
            out[k] = frame[y : y + BLOCK, x : x + BLOCK]
        return out


def augment(arrays: list[np.ndarray], rng: np.random.Generator, flip: bool, jitter: float) -> list[np.ndarray]:
    """Same horizontal flip and per-channel offset applied to every array of one sample batch (axis 0)."""
    n = arrays[0].shape[0]
    do_flip = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    offset = rng.uniform(-jitter, jitter, (n, 1, 1, 3)).astype(np.float32) if jitter > 0 else 0.0
    out = []
    for a in arrays:
        a = np.where(do_flip[:, None, None, None], a[:, :, ::-1], a)
        out.append(np.clip(a + offset, -1.0, 1.0).astype(np.float32))
    return out


# ---------------------------------------------------------------------------
# losses


def codec_objective(cfg: TrainConfig):
    if cfg.codec_loss == "progressive":
        return functools.partial(progressive_loss, monotone=cfg.monotone_weight)
    return residual_loss


def predictor_forward(model: PMVCModel, prev2, prev1, ext, cur, block_picks, noise: float = 0.0,
                      rng: np.random.Generator | None = None, frame_only: bool = False):
    """Teacher-forced predictions for ``block_picks`` = [(sample, BlockIndex)]; returns (pred, target).

    ``frame_only`` returns the frame path's estimate at each block instead of
    the mode's prediction (PMCNN mode's first pretraining stage).
    """
    if noise > 0:
        prev2, prev1, ext = (x + rng.normal(0, noise, x.shape).astype(np.float32) for x in (prev2, prev1, ext))
        context_frame = cur + rng.normal(0, noise, cur.shape).astype(np.float32)
    else:
        context_frame = cur
    predictor = model.predictor
    mode = predictor.mode
    ctx = predictor.frame_pass(Tensor(prev2), Tensor(prev1), Tensor(ext)) if mode.uses_frames else None
    indices = [idx for _, idx in block_picks]
    samples = [s for s, _ in block_picks]
    if frame_only:
        pred = ops.concat([ops.crop(ctx.conv26[s : s + 1], i.row * BLOCK, i.col * BLOCK, BLOCK, BLOCK)
                           for s, i in block_picks], axis=0)
    else:
        rec = Tensor(context_frame)
        contexts = [predictor.context_for(ctx, rec, idx, sample=s) if mode.uses_blocks else None
                    for s, idx in block_picks]
        pred = predictor.predict_blocks(ctx, contexts, indices, samples)
    target = np.stack([cur[s, i.row * BLOCK : (i.row + 1) * BLOCK, i.col * BLOCK : (i.col + 1) * BLOCK]
                       for s, i in block_picks])
    return pred, target


def trainable_blocks(sampler: FrameSampler, mode: PredictionMode) -> list[int]:
    """Raster indices whose prediction depends on weights.

    Without a frame path, blocks in the first row or column are predicted as
    zero, so drawing them only dilutes the batch.
    """
    blocks = range(sampler.rows * sampler.cols)
    if mode is PredictionMode.SPATIAL:
        return [j for j in blocks if j >= sampler.cols and j % sampler.cols]
    return list(blocks)


def _block_picks(sampler: FrameSampler, rng, n_frames: int, per_frame: int, mode: PredictionMode):
    candidates = trainable_blocks(sampler, mode) or list(range(sampler.rows * sampler.cols))
    picks = []
    for s in range(n_frames):
        for j in rng.choice(candidates, size=min(per_frame, len(candidates)), replace=False):
            picks.append((s, BlockIndex.from_raster(int(j), sampler.cols)))
    return picks


def all_blocks(sampler: FrameSampler, n_frames: int):
    return [(s, BlockIndex.from_raster(j, sampler.cols)) for s in range(n_frames)
            for j in range(sampler.rows * sampler.cols)]


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationSet:
    blocks: np.ndarray  # codec validation blocks
    frames: tuple  # (prev2, prev1, ext, cur)
    picks: list


def make_validation(cfg: TrainConfig, search_range: int) -> ValidationSet:
    sampler = FrameSampler(generate_dataset(cfg.validation_spec()), search_range)
    rng = make_rng(cfg.seed, "validation")
    items = [sampler.items[int(i)] for i in rng.choice(len(sampler.items), size=min(8, len(sampler.items)),
                                                         replace=False)]
    frames = sampler.frame_batch(rng, len(items), items)
    return ValidationSet(sampler.random_blocks(rng, 64), frames, all_blocks(sampler, len(items)))


def validation_losses(model: PMVCModel, val: ValidationSet, cfg: TrainConfig) -> dict:
    """Eval-mode losses on the frozen validation set (infer-mode binarization)."""
    model.eval()
    with no_grad():
        blocks = Tensor(val.blocks)
        codec_only = float(codec_objective(cfg)(blocks, model.codec.unroll(blocks, None, "infer")).data)
        pred, target = predictor_forward(model, *val.frames, val.picks)
        vcnn = float(pmcnn_loss(pred, target).data)
        r1 = ops.sub(Tensor(target), pred)
        res = float(codec_objective(cfg)(r1, model.codec.unroll(r1, None, "infer")).data)
    model.train()
    return {"codec": codec_only, "vcnn": vcnn, "res": res, "total": vcnn + res}


# ---------------------------------------------------------------------------
# phases


def _run_phase(name: str, schedule: PhaseSchedule, params, step_fn, log: TrainLog) -> None:
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for _ in range(schedule.steps_per_epoch):
            zero_grad(params)
            loss, vcnn, res = step_fn()
            backward(loss)
            adam_step(params, lr)
            log.add(name, epoch, lr, vcnn, res)


def block_gains(rng: np.random.Generator, n: int, gain_min: float) -> np.ndarray:
    """(n, 1, 1, 1) contrast gains: half the blocks keep gain 1, the rest are log-uniform in [gain_min, 1]."""
    gains = np.exp(rng.uniform(np.log(gain_min), 0.0, n))
    gains[rng.random(n) < 0.5] = 1.0
    return gains.astype(np.float32).reshape(n, 1, 1, 1)


def scaled_codec_loss(cfg: TrainConfig, model: PMVCModel, blocks: np.ndarray, gains: np.ndarray, rng) -> Tensor:
    """Codec objective on ``gains * blocks``, with each block's error measured relative to its gain.

    Residuals of well-predicted blocks are low in contrast; scaling teaches
    the later stages to size their output to what is left, and the relative
    error keeps low-contrast blocks from vanishing in the mean.
    """
    outs = model.codec.unroll(Tensor(blocks * gains), None, "train", rng)
    return codec_objective(cfg)(Tensor(blocks), [ops.mul(o, 1.0 / gains) for o in outs])


def pretrain_residual_codec(cfg: TrainConfig, model: PMVCModel, sampler: FrameSampler | None, log: TrainLog,
                            fixed_blocks: np.ndarray | None = None) -> PMVCModel:
    """Fit the codec on zero-prediction blocks (r1 = block).

    A second stage ("codec-gain", schedule ``cfg.codec_gain``) continues on
    contrast-scaled blocks; started from scratch that objective stalls, so it
    only refines a codec that already works. With ``fixed_blocks`` every step
    of the first stage reuses that batch without augmentation and the second
    stage is skipped.
    """
    rng = make_rng(cfg.seed, "codec-phase")
    objective = codec_objective(cfg)
    model.train()

    def blocks():
        (out,) = augment([sampler.random_blocks(rng, cfg.codec_batch_size)], rng, cfg.flip, cfg.channel_jitter)
        return out

    def step():
        r = Tensor(fixed_blocks if fixed_blocks is not None else blocks())
        loss = objective(r, model.codec.unroll(r, None, "train", rng))
        return loss, 0.0, float(loss.data)

    def gain_step():
        b = blocks()
        loss = scaled_codec_loss(cfg, model, b, block_gains(rng, len(b), cfg.codec_gain_min), rng)
        return loss, 0.0, float(loss.data)

    _run_phase("codec", cfg.codec, model.codec.parameters(), step, log)
    if fixed_blocks is None:
        _run_phase("codec-gain", cfg.codec_gain, model.codec.parameters(), gain_step, log)
    return model


def pretrain_pmcnn(cfg: TrainConfig, model: PMVCModel, sampler: FrameSampler, log: TrainLog,
                   frame_warm_start: PMVCModel | None = None) -> PMVCModel:
    """Fit the predictor on teacher-forced prediction error.

    In PMCNN mode this runs in two stages: the frame path alone on its own
    block estimate (schedule ``cfg.pmcnn``), then the whole hybrid predictor
    (schedule ``cfg.hybrid``). ``frame_warm_start`` supplies a model whose
    frame path replaces the first stage.
    """
    params = model.predictor.parameters()
    if not params:
        return model
    rng = make_rng(cfg.seed, "pmcnn-phase")
    hybrid = model.predictor.mode is PredictionMode.PMCNN
    model.train()

    def make_step(frame_only: bool):
        def step():
            batch = augment(list(sampler.frame_batch(rng, cfg.batch_size)), rng, cfg.flip, cfg.channel_jitter)
            picks = _block_picks(sampler, rng, cfg.batch_size, cfg.blocks_per_frame, model.predictor.mode)
            pred, target = predictor_forward(model, *batch, picks, cfg.context_noise, rng, frame_only=frame_only)
            loss = pmcnn_loss(pred, target)
            return loss, float(loss.data), 0.0

        return step

    if not hybrid:
        _run_phase("pmcnn", cfg.pmcnn, params, make_step(False), log)
        return model
    if frame_warm_start is not None:
        model.copy_from(frame_warm_start, "predictor.frame_path")
    else:
        _run_phase("pmcnn-frame", cfg.pmcnn, model.predictor.frame_path.parameters(), make_step(True), log)
    _run_phase("pmcnn", cfg.hybrid, params, make_step(False), log)
    return model


def joint_step_loss(model: PMVCModel, cfg: TrainConfig, batch, picks, rng):
    """(L_total, L_vcnn, L_res) for one teacher-forced batch."""
    pred, target = predictor_forward(model, *batch, picks, cfg.context_noise, rng)
    l_vcnn = pmcnn_loss(pred, target)
    r1 = ops.sub(Tensor(target), pred)
    l_res = codec_objective(cfg)(r1, model.codec.unroll(r1, None, "train", rng))
    return ops.add(l_vcnn, l_res), l_vcnn, l_res


def joint_tune(cfg: TrainConfig, model: PMVCModel, sampler: FrameSampler, log: TrainLog) -> PMVCModel:
    """Tune predictor and codec together on L_total.

    Intra frames are coded with zero prediction by the same codec, so the
    optimized objective also carries ``intra_weight`` times the codec loss on
    raw blocks; without it the codec drifts to residual statistics and intra
    frames become expensive. The log records L_total alone.
    """
    rng = make_rng(cfg.seed, "joint-phase")
    model.train()

    def step():
        batch = augment(list(sampler.frame_batch(rng, cfg.batch_size)), rng, cfg.flip, cfg.channel_jitter)
        picks = _block_picks(sampler, rng, cfg.batch_size, cfg.blocks_per_frame, model.predictor.mode)
        total, l_vcnn, l_res = joint_step_loss(model, cfg, batch, picks, rng)
        loss = total
        if cfg.intra_weight > 0:
            raw = sampler.random_blocks(rng, cfg.batch_size)
            intra = scaled_codec_loss(cfg, model, raw, block_gains(rng, len(raw), cfg.codec_gain_min), rng)
            loss = ops.add(total, ops.mul(intra, cfg.intra_weight))
        return loss, float(l_vcnn.data), float(l_res.data)

    _run_phase("joint", cfg.joint, model.parameters(), step, log)
    return model


def train(cfg: TrainConfig, model: PMVCModel | None = None, phases=("codec", "pmcnn", "joint"),
          sampler: FrameSampler | None = None) -> tuple[PMVCModel, TrainLog]:
    model = model or PMVCModel(cfg.model_config(), seed=cfg.seed)
    sampler = sampler or FrameSampler(generate_dataset(cfg.dataset), model.cfg.search_range)
    log = TrainLog()
    runners = {"codec": pretrain_residual_codec, "pmcnn": pretrain_pmcnn, "joint": joint_tune}
    for phase in phases:
        runners[phase](cfg, model, sampler, log)
    model.eval()
    return model, log


ABLATION_MODES = ("pmcnn", "temporal", "spatial", "nopred")


def train_ablation(cfg: TrainConfig, out_dir: str | Path, modes=ABLATION_MODES, progress=None) -> dict[str, Path]:
    """Train one model per prediction mode with a shared pretrained codec.

    The codec phase is mode independent, so it runs once; each mode then
    pretrains its predictor and is jointly tuned. Every phase leaves a
    checkpoint (``codec.pmck``, ``<mode>.pretrain.pmck``, ``<mode>.pmck``) and
    existing checkpoints are reused, so an interrupted run resumes.
    ``cfg.mode`` is ignored.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = progress or (lambda msg: None)
    sampler = FrameSampler(generate_dataset(cfg.dataset), ModelConfig.desk("nopred").search_range)
    codec_path = out / "codec.pmck"
    if codec_path.exists():
        codec_model = PMVCModel.load(codec_path)
    else:
        say("codec phase")
        ccfg = dataclasses.replace(cfg, mode="nopred")
        codec_model = PMVCModel(ccfg.model_config(), seed=cfg.seed)
        log = TrainLog()
        pretrain_residual_codec(ccfg, codec_model, sampler, log)
        codec_model.save(codec_path)
        log.write_csv(out / "codec.log.csv")
    paths = {}
    # temporal first: its pretrained frame path is PMCNN's first stage
    order = sorted(modes, key=lambda m: (m != "temporal", ABLATION_MODES.index(m)))
    for mode in order:
        final = out / f"{mode}.pmck"
        paths[mode] = final
        if final.exists():
            continue
        mcfg = dataclasses.replace(cfg, mode=mode)
        pre_path = out / f"{mode}.pretrain.pmck"
        log = TrainLog()
        if pre_path.exists():
            model = PMVCModel.load(pre_path)
        else:
            say(f"{mode}: predictor phase")
            model = PMVCModel(mcfg.model_config(), seed=cfg.seed)
            model.copy_from(codec_model, "codec")
            warm = out / "temporal.pretrain.pmck"
            warm_model = PMVCModel.load(warm) if mode == "pmcnn" and warm.exists() else None
            pretrain_pmcnn(mcfg, model, sampler, log, frame_warm_start=warm_model)
            model.save(pre_path)
        say(f"{mode}: joint phase")
        joint_tune(mcfg, model, sampler, log)
        model.eval()
        model.save(final)
        log.write_csv(out / f"{mode}.log.csv")
    return {m: paths[m] for m in modes}
