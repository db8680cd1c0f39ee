import json

import numpy as np
import pytest

from margiheat import cli, data_synth, skeleton
from margiheat.heatmap_ops import MarginalHeatmapSet, marginal_coords
from margiheat.network import MargiNet, ModelConfig, save_checkpoint
from margiheat.pnm import read_pgm, write_pgm
from margiheat.skeleton import Pose3D, Space


def write_config(path, **values):
    base = dict(n_stages=1, stage_width=4, fe_channels="4 4 4", input_size=16, heatmap_size=8, batch_size=2,
                n3d=1, n2d=1, total_iters=2, n_train=2, n_train_2d=2, n_test=2, log_interval=1)
    base.update(values)
    path.write_text("# test config\n" + "".join(f"{k} = {v}\n" for k, v in base.items()))
    return path


def test_no_args_is_usage_error(capsys):
    assert cli.main([]) == 2


def test_train_and_resume(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", checkpoint_interval=1)
    assert cli.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# train config: ")
    assert json.loads(out.splitlines()[0].split(": ", 1)[1])["total_iters"] == 2
    assert (tmp_path / "run" / "ckpt_0000002.mhpm").exists()
    args = ["train", "--config", str(cfg), "--out-dir", str(tmp_path / "run"),
            "--resume", str(tmp_path / "run" / "ckpt_0000001.mhpm")]
    assert cli.main(args) == 0


def test_train_unknown_key_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", learning_speed=3)
    assert cli.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2
    assert "learning_speed" in capsys.readouterr().err


def test_train_missing_config_is_usage_error(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope"), "--out-dir", str(tmp_path)]) == 2


def test_train_invalid_value_is_runtime_error(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", n3d=5)
    assert cli.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def _pose_files(tmp_path, rng):
    gts = [(f"p{i}", Pose3D(rng.normal(size=(17, 3)) * 300, Space.MILLIMETRES_ROOT_RELATIVE)) for i in range(4)]
    preds = [(pid, Pose3D(p.joints + rng.normal(size=(17, 3)) * 20, p.space)) for pid, p in gts]
    skeleton.write_poses(tmp_path / "gt.jsonl", gts)
    skeleton.write_poses(tmp_path / "pred.jsonl", preds)
    return tmp_path / "pred.jsonl", tmp_path / "gt.jsonl"


def test_eval_outputs(tmp_path, rng, capsys):
    pred, gt = _pose_files(tmp_path, rng)
    args = ["eval", "--pred", str(pred), "--gt", str(gt), "--procrustes", "--csv", str(tmp_path / "r.csv"),
            "--json", str(tmp_path / "r.json")]
    assert cli.main(args) == 0
    out = capsys.readouterr().out
    assert out.startswith("# eval config: ") and "MPJPE" in out
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["procrustes_applied"] is True and report["n_poses"] == 4
    assert len((tmp_path / "r.csv").read_text().splitlines()) >= 5


def test_eval_malformed_file_names_line(tmp_path, rng, capsys):
    pred, gt = _pose_files(tmp_path, rng)
    lines = pred.read_text().splitlines()
    lines[2] = lines[2][:-5]
    pred.write_text("\n".join(lines) + "\n")
    assert cli.main(["eval", "--pred", str(pred), "--gt", str(gt)]) == 1
    assert ":3:" in capsys.readouterr().err


def test_eval_missing_file(tmp_path):
    assert cli.main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b")]) == 1


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--n-seeds", "1"]) == 0
    assert "all gradient checks passed" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--n-seeds", "1", "--tolerance", "0"]) == 1
    assert "FAILED" in capsys.readouterr().out


def test_export_heatmaps(tmp_path, capsys):
    cfg = ModelConfig(n_joints=17, input_size=16, heatmap_size=8, fe_channels=(4, 4, 4), stage_width=4)
    model = MargiNet(cfg, seed=2)
    save_checkpoint(model, tmp_path / "m.mhpm")
    ex = data_synth.generate_example(0, 16, augmented=False)
    write_pgm(tmp_path / "img.pgm", ex.image.reshape(48, 16), normalize=False)
    np.save(tmp_path / "img.npy", ex.image)
    out = tmp_path / "hm"
    assert cli.main(["export-heatmaps", "--checkpoint", str(tmp_path / "m.mhpm"), "--input", str(tmp_path / "img.npy"),
                     "--out-dir", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 51
    coords = json.loads((out / "coords.json").read_text())
    pred = model.forward(ex.image[None].astype(np.float32))[-1]
    mu = marginal_coords(pred.heatmaps, validate=False)[0]
    got = np.array([coords["joints"][n]["pixels"] for n in skeleton.JOINT_NAMES])
    np.testing.assert_allclose(got, mu, atol=1e-4)
    hm, _ = read_pgm(out / "neck_zy.pgm")
    assert hm.shape == (8, 8) and hm.max() == 1.0
    # The stacked PGM input gives the same answer up to 16-bit quantization.
    assert cli.main(["export-heatmaps", "--checkpoint", str(tmp_path / "m.mhpm"), "--input", str(tmp_path / "img.pgm"),
                     "--out-dir", str(tmp_path / "hm2")]) == 0
    got2 = json.loads((tmp_path / "hm2" / "coords.json").read_text())
    assert abs(got2["joints"]["neck"]["pixels"][0] - coords["joints"]["neck"]["pixels"][0]) < 1e-3


def test_export_missing_checkpoint(tmp_path):
    np.save(tmp_path / "x.npy", np.zeros((3, 16, 16)))
    args = ["export-heatmaps", "--checkpoint", str(tmp_path / "none.mhpm"), "--input", str(tmp_path / "x.npy"),
            "--out-dir", str(tmp_path / "o")]
    assert cli.main(args) == 1


def test_bench_strategies(tmp_path, capsys):
    assert cli.main(["bench-strategies", "--trials", "200", "--out", str(tmp_path / "s.csv"),
                     "--memory-csv", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("strategy,") and len(lines) == 3
    mem = (tmp_path / "m.csv").read_text().splitlines()
    assert [line.split(",")[4] for line in mem[1:]] == ["3/16", "3/32", "3/64"]


def test_bench_zero_trials(capsys):
    assert cli.main(["bench-strategies", "--trials", "0"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1] == ",".join(("strategy", "trials", "noise", "size", "sigma", "mean_axis_error_px",
                               "mean_euclidean_error_px"))
    assert not any(line.startswith("argmax") for line in out)


def test_gen_data(tmp_path, capsys):
    assert cli.main(["gen-data", "--n", "10", "--seed", "4", "--size", "16", "--out-dir", str(tmp_path / "a")]) == 0
    assert cli.main(["gen-data", "--n", "10", "--seed", "4", "--size", "16", "--out-dir", str(tmp_path / "b")]) == 0
    assert len(list((tmp_path / "a" / "images").glob("*.pgm"))) == 10
    assert len((tmp_path / "a" / "poses.jsonl").read_text().splitlines()) == 10
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert cli.main(["gen-data", "--n", "3", "--n2d", "5", "--out-dir", str(tmp_path / "c")]) == 2


def test_config_parser_values(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", regularize="no", sigma_px="auto", lr_max="0.02  # inline comment")
    values = cli.read_config(cfg)
    assert values["regularize"] is False and values["sigma_px"] is None
    assert values["lr_max"] == 0.02 and values["fe_channels"] == (4, 4, 4)
    (tmp_path / "bad.cfg").write_text("n_stages = two\n")
    with pytest.raises(cli.UsageError):
        cli.read_config(tmp_path / "bad.cfg")
