import json

import pytest

from maskanim.cli import run
from maskanim.core import load_mask_png


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Toy data plus a one-epoch training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run([
        "make-toy-data", "--out", str(root / "data"), "--videos", "4", "--frames", "6",
        "--res", "64", "--seed", "7",
    ]) == 0
    assert run([
        "train", "--data", str(root / "data"), "--out", str(root / "run"),
        "--set", "epochs=1", "--set", "base_channels=4", "--set", "max_channels=16",
        "--seed", "3",
    ]) == 0
    return root


class TestMakeToyData:
    def test_layout(self, cli_workspace):
        data = cli_workspace / "data"
        assert len(list((data / "train").iterdir())) == 4
        assert len(list((data / "test").iterdir())) == 1
        vid = data / "train" / "vid_000"
        assert len(list(vid.glob("frame_*.png"))) == 6
        assert (vid / "keypoints.json").exists()

    def test_exit_code_zero(self, tmp_path):
        assert run(["make-toy-data", "--out", str(tmp_path / "d"), "--videos", "1", "--frames", "2"]) == 0


class TestTrain:
    def test_artifacts(self, cli_workspace):
        run_dir = cli_workspace / "run"
        assert (run_dir / "final.ckpt").exists()
        assert (run_dir / "config.ini").exists()
        assert (run_dir / "resolved_config.ini").exists()
        assert (run_dir / "train_log.jsonl").exists()
        records = [json.loads(l) for l in (run_dir / "train_log.jsonl").read_text().splitlines()]
        assert all("lr" in r and "loss_total" in r for r in records)

    def test_cli_override_beats_config_file(self, cli_workspace, tmp_path):
        cfg_file = tmp_path / "my.ini"
        cfg_file.write_text(
            "[pipeline]\nframe_resolution = 64\nmask_resolution = 16\n"
            "base_channels = 4\nmax_channels = 16\nencoder_depth = 3\n"
            "epochs = 3\nlr_decay_epochs = \nnum_threads = 1\n"
        )
        out = tmp_path / "run"
        assert run([
            "train", "--config", str(cfg_file), "--data", str(cli_workspace / "data"),
            "--out", str(out), "--set", "epochs=1",
        ]) == 0
        resolved = (out / "resolved_config.ini").read_text()
        assert "epochs = 1" in resolved
        assert len(list(out.glob("epoch_*.ckpt"))) == 1

    def test_bad_override_is_usage_error(self, cli_workspace, tmp_path):
        code = run([
            "train", "--data", str(cli_workspace / "data"), "--out", str(tmp_path),
            "--set", "nonsense=1",
        ])
        assert code == 2

    def test_missing_data_is_usage_error(self, tmp_path):
        code = run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == 2


class TestReconstruct:
    def test_n_minus_one_frames(self, cli_workspace, tmp_path):
        code = run([
            "reconstruct", "--checkpoint", str(cli_workspace / "run" / "final.ckpt"),
            "--video", str(cli_workspace / "data" / "test" / "vid_000"),
            "--out", str(tmp_path / "gen"),
        ])
        assert code == 0
        frames = list((tmp_path / "gen" / "vid_000").glob("frame_*.png"))
        assert len(frames) == 5  # 6-frame clip -> 5 generated

    def test_missing_checkpoint(self, tmp_path):
        code = run([
            "reconstruct", "--checkpoint", str(tmp_path / "none.ckpt"),
            "--video", str(tmp_path), "--out", str(tmp_path / "g"),
        ])
        assert code == 2


class TestAnimate:
    def test_modes_and_intermediates(self, cli_workspace, tmp_path):
        source = cli_workspace / "data" / "test" / "vid_000" / "frame_00000.png"
        code = run([
            "animate", "--checkpoint", str(cli_workspace / "run" / "final.ckpt"),
            "--source", str(source),
            "--driving", str(cli_workspace / "data" / "train" / "vid_001"),
            "--mode", "no_id", "--out", str(tmp_path / "anim"), "--dump-intermediates",
        ])
        assert code == 0
        assert len(list((tmp_path / "anim").glob("frame_*.png"))) == 6
        panels = list((tmp_path / "anim" / "intermediates").glob("00000_*.png"))
        assert len(panels) == 8


class TestEvaluate:
    def test_self_evaluation_report(self, cli_workspace, tmp_path):
        code = run([
            "evaluate", "--generated", str(cli_workspace / "data" / "test"),
            "--truth", str(cli_workspace / "data" / "test"),
            "--detector", "toy", "--embedder", "toy",
            "--out", str(tmp_path / "report"),
        ])
        assert code == 0
        rows = (tmp_path / "report" / "report.csv").read_text().splitlines()
        header = rows[0].split(",")
        assert "ssim" in header and "l1" in header
        payload = json.loads((tmp_path / "report" / "report.json").read_text())
        assert payload["aggregate"]["l1"] == 0.0
        assert payload["aggregate"]["akd"] == 0.0
        assert payload["aggregate"]["mkr"] == 0.0

    def test_reconstruction_then_evaluate(self, cli_workspace, tmp_path):
        assert run([
            "reconstruct", "--checkpoint", str(cli_workspace / "run" / "final.ckpt"),
            "--video", str(cli_workspace / "data" / "test" / "vid_000"),
            "--out", str(tmp_path / "gen"),
        ]) == 0
        code = run([
            "evaluate", "--generated", str(tmp_path / "gen"),
            "--truth", str(cli_workspace / "data" / "test"),
            "--out", str(tmp_path / "report"),
        ])
        assert code == 0
        payload = json.loads((tmp_path / "report" / "report.json").read_text())
        assert 0.0 <= payload["aggregate"]["l1"] <= 1.0


class TestPerturb:
    def test_test_op_roundtrip(self, cli_workspace, tmp_path):
        mask_png = cli_workspace / "data" / "train" / "vid_000" / "mask_00000.png"
        out = tmp_path / "pert.png"
        assert run(["perturb", "--op", "test", str(mask_png), str(out)]) == 0
        loaded = load_mask_png(out)
        assert loaded.data.min() >= 0 and loaded.data.max() <= 1

    def test_train_op_seeded_deterministic(self, cli_workspace, tmp_path):
        mask_png = cli_workspace / "data" / "train" / "vid_000" / "mask_00000.png"
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        assert run(["perturb", "--op", "train", "--seed", "5", str(mask_png), str(a)]) == 0
        assert run(["perturb", "--op", "train", "--seed", "5", str(mask_png), str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == 2

    def test_unknown_flag(self):
        assert run(["perturb", "--op", "test", "--bogus", "a", "b"]) == 2

    def test_unreadable_input_path(self, tmp_path):
        assert run(["perturb", "--op", "test", str(tmp_path / "nope.png"), str(tmp_path / "o.png")]) == 2
