import dataclasses

import numpy as np
import pytest

from pmvc.model import PMVCModel
from pmvc.numerics import Tensor, make_rng, no_grad
from pmvc.predictor import BlockIndex, PredictionMode
from pmvc.residual_codec import residual_loss
from pmvc.synthetic import SyntheticDatasetSpec, generate_dataset
from pmvc.train import (
    FrameSampler,
    PhaseSchedule,
    TrainConfig,
    TrainLog,
    config_from_text,
    config_to_text,
    joint_step_loss,
    load_config,
    make_validation,
    pretrain_pmcnn,
    pretrain_residual_codec,
    save_config,
    train,
    trainable_blocks,
    validation_losses,
)


def tiny_config(mode="pmcnn", **kw) -> TrainConfig:
    base = dict(
        mode=mode,
        batch_size=2,
        blocks_per_frame=1,
        codec_batch_size=4,
        validation_count=2,
        dataset=SyntheticDatasetSpec(frames=4, count=4),
        codec=PhaseSchedule(2, 2, 1e-3, 0.1, 1),
        codec_gain=PhaseSchedule(1, 2, 1e-3),
        pmcnn=PhaseSchedule(2, 2, 1e-3, 0.1, 1),
        hybrid=PhaseSchedule(1, 2, 1e-3),
        joint=PhaseSchedule(1, 2, 1e-4, 1.0, 5),
    )
    base.update(kw)
    return TrainConfig(**base)


# --- synthetic data ---------------------------------------------------------


def test_static_clip_frames_identical():
    clips = generate_dataset(SyntheticDatasetSpec(count=4, motions=("static",)))
    for clip in clips:
        assert clip.motion == "static"
        assert all(np.array_equal(clip.frames[0], f) for f in clip.frames[1:])


def test_translate_clip_is_shifted():
    clips = generate_dataset(SyntheticDatasetSpec(count=4, motions=("translate",)))
    for clip in clips:
        vx, vy = clip.params["vx"], clip.params["vy"]
        h, w = clip.frames.shape[1:3]
        for t in range(len(clip.frames) - 1):
            a, b = clip.frames[t], clip.frames[t + 1]
            # content at (y, x) in frame t appears at (y + vy, x + vx) in frame t + 1
            src = a[max(0, -vy) : h - max(0, vy), max(0, -vx) : w - max(0, vx)]
            dst = b[max(0, vy) : h - max(0, -vy), max(0, vx) : w - max(0, -vx)]
            np.testing.assert_array_equal(src, dst)


def test_dataset_reproducible_from_seed():
    spec = SyntheticDatasetSpec(count=8, seed=11)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    c = generate_dataset(dataclasses.replace(spec, seed=12))
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_dataset_labels_and_range():
    clips = generate_dataset(SyntheticDatasetSpec(count=16))
    assert {c.motion for c in clips} == {"static", "translate", "local-object", "zoom"}
    assert {c.texture for c in clips} == {"noise", "gradients", "checker", "blobs"}
    for c in clips:
        assert c.frames.shape == (8, 64, 96, 3) and c.frames.dtype == np.float32
        assert c.frames.min() >= -1 and c.frames.max() <= 1
        np.testing.assert_array_equal((c.as_uint8() / 127.5 - 1).astype(np.float32), c.frames)


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(height=50)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(motions=("spin",))


# --- codec pretraining -----------------------------------------------------


def fixed_blocks(n=4):
    clip = generate_dataset(SyntheticDatasetSpec(count=1, textures=("gradients",), motions=("static",)))[0]
    f = clip.frames[0]
    return np.stack([f[y : y + 32, x : x + 32] for y, x in [(0, 0), (32, 32), (0, 64), (16, 40)][:n]])


def test_codec_loss_decreases_on_fixed_batch():
    cfg = tiny_config(codec=PhaseSchedule(1, 100, 1e-3))
    model = PMVCModel(cfg.model_config(), seed=0)
    log = TrainLog()
    pretrain_residual_codec(cfg, model, None, log, fixed_blocks=fixed_blocks())
    losses = np.array([r["loss_res"] for r in log.rows])
    windows = losses.reshape(4, 25).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_zero_lr_leaves_parameters_unchanged():
    cfg = tiny_config(codec=PhaseSchedule(1, 3, 0.0), codec_gain=PhaseSchedule(1, 2, 0.0),
                      pmcnn=PhaseSchedule(1, 2, 0.0), hybrid=PhaseSchedule(1, 2, 0.0), joint=PhaseSchedule(1, 2, 0.0))
    model = PMVCModel(cfg.model_config(), seed=0)
    before = [p.data.copy() for p in model.parameters()]
    train(cfg, model)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


@pytest.mark.slow
def test_codec_overfits_single_batch():
    cfg = tiny_config(codec=PhaseSchedule(3, 200, 3e-3, 0.3, 1), codec_loss="final")
    model = PMVCModel(cfg.model_config(), seed=0)
    blocks = fixed_blocks(1)
    pretrain_residual_codec(cfg, model, None, TrainLog(), fixed_blocks=blocks)
    model.eval()
    with no_grad():
        mse = float(residual_loss(blocks, model.codec.unroll(Tensor(blocks), None, "infer")).data)
    assert mse < 1e-3


# --- predictor and joint phases ----------------------------------------------


def test_total_loss_is_sum_of_terms():
    cfg = tiny_config()
    model = PMVCModel(cfg.model_config(), seed=0)
    sampler = FrameSampler(generate_dataset(cfg.dataset), 8)
    rng = make_rng(0, "t")
    batch = sampler.frame_batch(rng, 2)
    picks = [(0, BlockIndex(0, 0, 3)), (1, BlockIndex(1, 2, 3))]
    total, l_vcnn, l_res = joint_step_loss(model, cfg, batch, picks, rng)
    assert abs(float(total.data) - (float(l_vcnn.data) + float(l_res.data))) < 1e-6
    _, log = train(cfg, PMVCModel(cfg.model_config(), seed=0), phases=("joint",), sampler=sampler)
    for row in log.rows:
        assert abs(row["loss_total"] - row["loss_vcnn"] - row["loss_res"]) < 1e-6


def test_learning_rate_decays_at_epoch_boundaries():
    cfg = tiny_config(codec=PhaseSchedule(5, 2, 1e-3, 0.1, 2))
    _, log = train(cfg, phases=("codec",))
    lrs = [(r["epoch"], r["lr"]) for r in log.phase("codec")]
    assert len(lrs) == 10
    expected = {0: 1e-3, 1: 1e-3, 2: 1e-4, 3: 1e-4, 4: 1e-5}
    for epoch, lr in lrs:
        assert lr == pytest.approx(expected[epoch], rel=1e-12)


def test_log_csv(tmp_path):
    cfg = tiny_config()
    _, log = train(cfg)
    assert [r["phase"] for r in log.rows] == ["codec"] * 4 + ["codec-gain"] * 2 + ["pmcnn-frame"] * 4 + ["pmcnn"] * 2 + ["joint"] * 2
    path = tmp_path / "log.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,phase,epoch,lr,loss_vcnn,loss_res,loss_total" and len(lines) == 15


def test_pmcnn_frame_stage_trains_only_frame_path():
    cfg = tiny_config(hybrid=PhaseSchedule(0, 0, 1e-3))
    model = PMVCModel(cfg.model_config(), seed=0)
    block = [p.data.copy() for p in model.predictor.block_path.parameters()]
    frame = [p.data.copy() for p in model.predictor.frame_path.parameters()]
    train(cfg, model, phases=("pmcnn",))
    assert all(np.array_equal(a, p.data) for a, p in zip(block, model.predictor.block_path.parameters()))
    assert not all(np.array_equal(a, p.data) for a, p in zip(frame, model.predictor.frame_path.parameters()))


def test_pmcnn_warm_start_copies_frame_path():
    cfg = tiny_config(hybrid=PhaseSchedule(0, 0, 1e-3))
    donor = PMVCModel(tiny_config("temporal").model_config(), seed=3)
    model = PMVCModel(cfg.model_config(), seed=0)
    sampler = FrameSampler(generate_dataset(cfg.dataset), 8)
    log = TrainLog()
    pretrain_pmcnn(cfg, model, sampler, log, frame_warm_start=donor)
    assert not log.rows
    for a, b in zip(donor.predictor.frame_path.parameters(), model.predictor.frame_path.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_nopred_has_no_predictor_phase():
    cfg = tiny_config("nopred")
    _, log = train(cfg)
    assert not log.phase("pmcnn") and log.phase("joint")


def test_spatial_training_draws_interior_blocks():
    sampler = FrameSampler(generate_dataset(SyntheticDatasetSpec(count=1, frames=3)), 8)
    assert trainable_blocks(sampler, PredictionMode.SPATIAL) == [4, 5]
    assert trainable_blocks(sampler, PredictionMode.PMCNN) == list(range(6))


def test_training_is_reproducible():
    cfg = tiny_config("temporal")
    val = make_validation(cfg, 8)
    results = []
    for _ in range(2):
        model, _ = train(cfg)
        results.append(validation_losses(model, val, cfg))
    for key in results[0]:
        assert abs(results[0][key] - results[1][key]) < 1e-5


# --- config -------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = tiny_config("spatial", seed=9, flip=False, codec_loss="final",
                      dataset=SyntheticDatasetSpec(frames=5, count=7, motions=("zoom", "static"), illumination=0.03))
    assert config_from_text(config_to_text(cfg)) == cfg
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_config_partial_and_errors():
    cfg = config_from_text("[train]\nmode = temporal\n[joint]\nlr = 0.0005\n")
    assert cfg.mode == "temporal" and cfg.joint.lr == 5e-4 and cfg.joint.epochs == TrainConfig().joint.epochs
    with pytest.raises(ValueError):
        config_from_text("[train]\nbogus = 1\n")
    with pytest.raises(ValueError):
        config_from_text("[extra]\nx = 1\n")
    with pytest.raises(ValueError):
        config_from_text("[codec]\ndecay = 1.5\n")
    with pytest.raises(ValueError):
        config_from_text("[train]\nmode = sideways\n")
