# backend/tests/test_cli.py
import json
from unittest.mock import patch

import pandas as pd
import pytest

import cli
from config import Settings
from shared.errors import NumericalError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    dataset_config = root / "dataset.json"
    dataset_config.write_text(json.dumps({
        "n_train_identities": 1,
        "n_test_identities": 1,
        "frames": 10,
        "motions": [{"name": "knee", "kind": "knee_raise"}],
    }))
    assert cli.main(["synth", "--out", str(data), "--config", str(dataset_config)]) == 0

    train_config = root / "train.json"
    train_config.write_text(json.dumps({
        "version": 1, "epochs": 1, "feature_dim": 8, "code_dim": 8, "width": 16, "n_blocks": 1,
        "k_eig": 16, "samples_per_frame": 64, "dtype": "float64",
    }))
    ckpt = root / "model.pt"
    assert cli.main(["train", "--config", str(train_config), "--data", str(data), "--out", str(ckpt)]) == 0
    return {"root": root, "data": data, "ckpt": ckpt}


class TestCli:

    def test_synth_writes_manifest(self, workspace):
        """synth produces a dataset manifest"""
        manifest = json.loads((workspace["data"] / "manifest.json").read_text())
        assert len(manifest["entries"]) == 2

    def test_train_writes_checkpoint(self, workspace):
        """train leaves a checkpoint on disk"""
        assert workspace["ckpt"].exists()

    def test_eval_json(self, workspace, tmp_path):
        """eval writes the metrics report"""
        out = tmp_path / "report.json"
        code = cli.main(["eval", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]), "--json", str(out)])
        assert code == 0
        assert json.loads(out.read_text())["split"] == "test"

    def test_robustness_csv(self, workspace, tmp_path):
        """robustness writes one CSV row per variant"""
        out = tmp_path / "dev.csv"
        code = cli.main([
            "robustness", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
            "--variants", "ds2", "--csv", str(out),
        ])
        assert code == 0
        assert pd.read_csv(out)["variant"].tolist() == ["ds2"]

    def test_transfer(self, workspace, tmp_path):
        """transfer exports frames for the target motion"""
        data = workspace["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        entry = manifest["entries"][0]
        code = cli.main([
            "transfer", "--ckpt", str(workspace["ckpt"]), "--source", str(data / entry["source"]),
            "--motion", str(data / entry["path"]), "--out", str(tmp_path / "out"), "--format", "ply",
        ])
        assert code == 0
        assert (tmp_path / "out" / "frame_0009.ply").exists()

    def test_embed_with_mds(self, workspace, tmp_path):
        """embed exports codes and MDS trajectories"""
        data = workspace["data"]
        motions = [str(data / e["path"]) for e in json.loads((data / "manifest.json").read_text())["entries"]]
        codes_dir = tmp_path / "codes"
        mds = tmp_path / "mds.csv"
        code = cli.main([
            "embed", "--ckpt", str(workspace["ckpt"]), "--motion", *motions,
            "--csv", str(codes_dir), "--mds", str(mds),
        ])
        assert code == 0
        assert len(pd.read_csv(mds)) == 20

    def test_bench_empty(self, tmp_path):
        """bench with no resolutions prints an empty table"""
        out = tmp_path / "bench.csv"
        assert cli.main(["bench", "--resolutions", "", "--frames", "5", "--csv", str(out)]) == 0
        assert pd.read_csv(out).empty

    def test_bad_variant_exit_code(self, workspace):
        """Invalid input exits with 2"""
        code = cli.main(["robustness", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
                         "--variants", "ds9"])
        assert code == 2

    def test_missing_checkpoint_exit_code(self, workspace, tmp_path):
        """A missing checkpoint is a validation failure"""
        code = cli.main(["eval", "--ckpt", str(tmp_path / "none.pt"), "--data", str(workspace["data"])])
        assert code == 2

    def test_numerical_error_exit_code(self, workspace):
        """Numerical failures exit with 3"""
        with patch("cli.evaluate", side_effect=NumericalError("nan", stage="rollout")):
            code = cli.main(["eval", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"])])
        assert code == 3


class TestSettings:

    def test_environment_prefix(self, monkeypatch):
        """Settings read MESHMOTION_ variables"""
        monkeypatch.setenv("MESHMOTION_LOG_LEVEL", "debug")
        monkeypatch.setenv("MESHMOTION_K_EIG", "32")
        settings = Settings()
        assert settings.log_level == "DEBUG"
        assert settings.k_eig == 32

    def test_invalid_dtype(self, monkeypatch):
        """Unsupported dtypes are rejected"""
        monkeypatch.setenv("MESHMOTION_DEFAULT_DTYPE", "float16")
        with pytest.raises(ValueError):
            Settings()
