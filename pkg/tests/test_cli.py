import json

import numpy as np
import pytest

from pmvc import cli
from pmvc.evalmetrics import RdRow, psnr, read_csv, sequence_psnr
from pmvc.model import ModelConfig, PMVCModel
from pmvc.pipeline import read_frames, write_frames
from pmvc.synthetic import SyntheticDatasetSpec, generate_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for mode in ("pmcnn", "spatial", "temporal", "nopred"):
        PMVCModel(ModelConfig.desk(mode), seed=5).save(root / f"{mode}.pmck")
    clip = generate_dataset(SyntheticDatasetSpec(frames=4, count=1, seed=3))[0]
    write_frames(root / "clip", clip.as_uint8())
    return root


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_encode_decode_round_trip(workspace, capsys, tmp_path):
    stream = tmp_path / "clip.pmvc"
    code, out, _ = run(capsys, "encode", "--input", workspace / "clip", "--model", workspace / "pmcnn.pmck",
                       "--output", stream, "--tau-spatial", "150")
    assert code == 0
    report = json.loads(out)
    assert report["total"] == 8 * stream.stat().st_size == 8 * report["file_bytes"]
    code, out, _ = run(capsys, "decode", "--bitstream", stream, "--model", workspace / "pmcnn.pmck",
                       "--output", tmp_path / "dec")
    assert code == 0
    original = read_frames(workspace / "clip")
    decoded = read_frames(tmp_path / "dec")
    assert sequence_psnr(original, decoded) == report["psnr_db"]


def test_encode_is_deterministic(workspace, capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "encode", "--input", workspace / "clip", "--model", workspace / "nopred.pmck",
                   "--output", tmp_path / name)[0] == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_decode_png_output(workspace, capsys, tmp_path):
    stream = tmp_path / "s"
    run(capsys, "encode", "--input", workspace / "clip", "--model", workspace / "nopred.pmck", "--output", stream,
        "--stages", "2")
    assert run(capsys, "decode", "--bitstream", stream, "--model", workspace / "nopred.pmck",
               "--output", tmp_path / "png", "--png")[0] == 0
    assert len(list((tmp_path / "png").glob("*.png"))) == 4


def test_missing_model_is_clean_error(workspace, capsys, tmp_path):
    code, _, err = run(capsys, "encode", "--input", workspace / "clip", "--model", tmp_path / "none.pmck",
                       "--output", tmp_path / "x")
    assert code == cli.EXIT_MISSING_FILE
    assert err.startswith("error: missing-file:") and err.count("\n") == 1


def test_wrong_model_for_bitstream(workspace, capsys, tmp_path):
    stream = tmp_path / "s"
    run(capsys, "encode", "--input", workspace / "clip", "--model", workspace / "pmcnn.pmck", "--output", stream)
    code, _, err = run(capsys, "decode", "--bitstream", stream, "--model", workspace / "nopred.pmck",
                       "--output", tmp_path / "d")
    assert code == cli.EXIT_BITSTREAM and "ModelHashMismatchError" in err


def test_corrupt_bitstream(workspace, capsys, tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(capsys, "decode", "--bitstream", bad, "--model", workspace / "pmcnn.pmck",
                       "--output", tmp_path / "d")
    assert code == cli.EXIT_BITSTREAM and "BadMagicError" in err


def test_bad_stage_count(workspace, capsys, tmp_path):
    code, _, err = run(capsys, "encode", "--input", workspace / "clip", "--model", workspace / "pmcnn.pmck",
                       "--output", tmp_path / "x", "--stages", "9")
    assert code == cli.EXIT_BAD_INPUT and err.startswith("error: bad-stages")


def test_corrupt_checkpoint(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.pmck"
    bad.write_bytes(b"nope")
    code, _, _ = run(capsys, "encode", "--input", workspace / "clip", "--model", bad, "--output", tmp_path / "x")
    assert code == cli.EXIT_CHECKPOINT


def test_usage_error(capsys):
    assert run(capsys, "encode")[0] == cli.EXIT_USAGE


def test_exit_codes_are_distinct():
    codes = [cli.EXIT_OK, cli.EXIT_UNEXPECTED, cli.EXIT_USAGE, cli.EXIT_MISSING_FILE, cli.EXIT_BITSTREAM,
             cli.EXIT_CHECKPOINT, cli.EXIT_BAD_INPUT, cli.EXIT_INVARIANT]
    assert len(set(codes)) == len(codes)


def test_eval_grid_rows(workspace, capsys, tmp_path):
    out = tmp_path / "rd.csv"
    code, _, _ = run(capsys, "eval", "--model", workspace / "temporal.pmck", "--dataset", workspace / "clip",
                     "--grid", "400,200,100,50", "--output", out)
    assert code == 0
    rows = read_csv(out)
    assert len(rows) == 4 and {r.mode for r in rows} == {"temporal"}
    assert out.with_suffix(".gp").exists() and out.with_suffix(".dat").exists()


def test_eval_parallel_matches_serial(workspace, capsys, tmp_path):
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / f"rd{jobs}.csv"
        code, _, _ = run(capsys, "eval", "--model", workspace / "nopred.pmck", "--synthetic", "2", "--frames", "3",
                         "--grid", "400,100", "--jobs", jobs, "--output", out)
        assert code == 0
        outs.append(read_csv(out))
    assert outs[0] == outs[1] and len(outs[0]) == 4


def test_eval_empty_grid(workspace, capsys, tmp_path):
    code, _, _ = run(capsys, "eval", "--model", workspace / "temporal.pmck", "--dataset", workspace / "clip",
                     "--grid", ",", "--output", tmp_path / "x.csv")
    assert code == cli.EXIT_BAD_INPUT


def test_ablate_table_and_check(workspace, capsys, monkeypatch):
    gain = {"nopred": 1.0, "spatial": 0.9, "temporal": 0.7, "pmcnn": 0.6}

    def fake_sweep(name, frames, model, grid, tau_temporal, config=None):
        return [RdRow(name, model.mode, tau, tau_temporal, gain[model.mode] * 0.1 * (i + 1), 25.0 + 3 * i, 0.9)
                for i, tau in enumerate(sorted(grid, reverse=True))]

    monkeypatch.setattr(cli.evalmetrics, "rd_sweep", fake_sweep)
    code, out, _ = run(capsys, "ablate", "--model-dir", workspace, "--dataset", workspace / "clip",
                       "--grid", "800,400,200,100", "--check")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 5 and lines[1].startswith("pmcnn") and "-40.00%" in lines[1]
    assert "nopred" in lines[-1] and "+0.00%" in lines[-1]
    gain["spatial"] = 1.2
    code, _, err = run(capsys, "ablate", "--model-dir", workspace, "--dataset", workspace / "clip",
                       "--grid", "800,400,200,100", "--check")
    assert code == cli.EXIT_INVARIANT and err.startswith("error: ")


def test_ablate_needs_anchor(workspace, capsys):
    code, _, err = run(capsys, "ablate", "--model-dir", workspace, "--dataset", workspace / "clip",
                       "--grid", "400,200,100,50", "--modes", "temporal")
    assert code == cli.EXIT_BAD_INPUT and err.startswith("error: no-anchor")


def test_seed_environment_fallback(monkeypatch):
    monkeypatch.setenv("PMVC_SEED", "17")
    assert cli.resolve_seed(None) == 17
    assert cli.resolve_seed(3) == 3
    monkeypatch.setenv("PMVC_SEED", "x")
    with pytest.raises(cli.CliError):
        cli.resolve_seed(None)


def test_synthetic_dataset_depends_on_seed(monkeypatch):
    args = cli.build_parser().parse_args(["eval", "--model", "m", "--synthetic", "1", "--frames", "3"])
    monkeypatch.setenv("PMVC_SEED", "1")
    a = cli._sequences(args)[0][1]
    monkeypatch.setenv("PMVC_SEED", "2")
    b = cli._sequences(args)[0][1]
    assert a.shape == (3, 64, 96, 3) and not np.array_equal(a, b)
    assert psnr(a, a) == float("inf")


def test_train_all_modes(capsys, tmp_path):
    from pmvc.train import PhaseSchedule, TrainConfig, save_config

    cfg = TrainConfig(batch_size=1, blocks_per_frame=1, codec_batch_size=2, validation_count=1,
                      dataset=SyntheticDatasetSpec(frames=3, count=2),
                      codec=PhaseSchedule(1, 1, 1e-3), pmcnn=PhaseSchedule(1, 1, 1e-3), joint=PhaseSchedule(1, 1, 1e-4))
    save_config(cfg, tmp_path / "tiny.ini")
    code, out, err = run(capsys, "train", "--config", tmp_path / "tiny.ini", "--all-modes", "--out", tmp_path / "m")
    assert code == 0
    report = json.loads(out)
    assert set(report["checkpoints"]) == {"pmcnn", "temporal", "spatial", "nopred"}
    for mode, path in report["checkpoints"].items():
        assert PMVCModel.load(path).mode == mode
    assert "codec phase" in err
    # a second run reuses every checkpoint
    assert run(capsys, "train", "--config", tmp_path / "tiny.ini", "--all-modes", "--out", tmp_path / "m")[2] == ""
