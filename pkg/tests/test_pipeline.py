"""
Tests for the command orchestration in src.pipeline.

The end-to-end tests run the tiny configuration on a handful of synthetic
pairs, so every command executes for real on CPU.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from src.errors import UsageError
from src.imaging import load_png, save_png
from src.pipeline import (
    CommandResult,
    cmd_eval,
    cmd_finetune,
    cmd_generate,
    cmd_plot_pr,
    cmd_probe,
    cmd_saliency,
    cmd_synth,
    cmd_train,
    prepare_out_dir,
)
from src.sketch_vector import read_ndjson


@pytest.fixture
def dataset_dir(tmp_path, tiny_config):
    result = cmd_synth(tiny_config, str(tmp_path / "data"))
    assert result.success, result.error
    return tmp_path / "data"


@pytest.fixture
def trained(tmp_path, tiny_config, dataset_dir):
    result = cmd_train(tiny_config, str(dataset_dir / "manifest.json"), str(tmp_path / "run"))
    assert result.success, result.error
    return tmp_path / "run" / "last.pt"


class TestCommandResult:
    """Test the CommandResult dataclass."""

    def test_success_follows_exit_code(self):
        """Test only exit code 0 counts as success."""
        assert CommandResult(0).success
        assert not CommandResult(1).success
        assert not CommandResult(2).success


class TestPrepareOutDir:
    """Test prepare_out_dir()."""

    def test_creates_directory(self, tmp_path):
        """Test a missing directory is created."""
        assert prepare_out_dir(str(tmp_path / "a" / "b")).is_dir()

    def test_refuses_non_empty(self, tmp_path):
        """Test a non-empty directory needs force."""
        (tmp_path / "file.txt").write_text("x")

        with pytest.raises(UsageError, match="--force"):
            prepare_out_dir(str(tmp_path))
        assert prepare_out_dir(str(tmp_path), force=True) == tmp_path

    def test_refuses_file(self, tmp_path):
        """Test an existing file is not a directory."""
        path = tmp_path / "file.txt"
        path.write_text("x")

        with pytest.raises(UsageError):
            prepare_out_dir(str(path))


class TestSynthAndTrain:
    """Test cmd_synth() and cmd_train()."""

    def test_synth_outputs(self, dataset_dir, tiny_config):
        """Test the manifest and NDJSON sketches are written."""
        manifest = json.loads((dataset_dir / "manifest.json").read_text())

        assert len(manifest["entries"]) == 6
        assert len(read_ndjson(dataset_dir / "sketches.ndjson")) == 6

    def test_synth_refuses_existing_output(self, dataset_dir, tiny_config):
        """Test rerunning into the same directory is a usage error."""
        result = cmd_synth(tiny_config, str(dataset_dir))

        assert result.exit_code == 2
        assert "--force" in result.error

    def test_train_outputs(self, trained):
        """Test training writes its config, log and checkpoints."""
        run = trained.parent

        assert trained.exists()
        assert (run / "epoch_001.pt").exists()
        assert (run / "train_log.jsonl").exists()
        assert json.loads((run / "config.json").read_text())["M"] == 2

    def test_train_missing_manifest(self, tmp_path, tiny_config):
        """Test a missing manifest fails with exit code 1."""
        result = cmd_train(tiny_config, str(tmp_path / "absent.json"), str(tmp_path / "run"))

        assert result.exit_code == 1
        assert "Manifest not found" in result.error


class TestInference:
    """Test cmd_generate() and cmd_saliency()."""

    def test_generate(self, trained, dataset_dir, tmp_path):
        """Test one NDJSON record, a rendering and attention frames per photo."""
        photo = dataset_dir / "photos" / "test_0000.png"

        result = cmd_generate(str(trained), [str(photo)], str(tmp_path / "gen"), greedy=True, every=5)

        assert result.success, result.error
        assert result.artifacts[0].endswith("sketches.ndjson")
        assert len(Path(result.artifacts[0]).read_text().splitlines()) == 1
        assert (tmp_path / "gen" / "test_0000_sketch.png").exists()
        assert any("_attention_" in a for a in result.artifacts)

    def test_saliency_matches_photo_size(self, trained, tmp_path):
        """Test saliency maps come back at each photo's own resolution."""
        photo = save_png(tmp_path / "wide.png", np.random.default_rng(0).uniform(0, 1, (80, 96, 3)))

        result = cmd_saliency(str(trained), [photo], str(tmp_path / "maps"), float_sidecar=True)

        assert result.success, result.error
        assert load_png(tmp_path / "maps" / "wide.png").shape[:2] == (80, 96)
        assert np.load(tmp_path / "maps" / "wide.npy").shape == (80, 96)

    def test_saliency_is_deterministic(self, trained, dataset_dir, tmp_path):
        """Test repeated free-running saliency gives identical files."""
        photo = str(dataset_dir / "photos" / "test_0001.png")

        cmd_saliency(str(trained), [photo], str(tmp_path / "a"))
        cmd_saliency(str(trained), [photo], str(tmp_path / "b"))

        assert (tmp_path / "a" / "test_0001.png").read_bytes() == (tmp_path / "b" / "test_0001.png").read_bytes()

    def test_teacher_forced_needs_data(self, trained, tmp_path):
        """Test teacher-forced saliency without a manifest is a usage error."""
        result = cmd_saliency(str(trained), [], str(tmp_path / "maps"), mode="teacher_forced")

        assert result.exit_code == 2

    def test_teacher_forced_from_manifest(self, trained, dataset_dir, tmp_path):
        """Test teacher-forced saliency writes one map per test photo."""
        result = cmd_saliency(
            str(trained), [], str(tmp_path / "maps"), mode="teacher_forced",
            data=str(dataset_dir / "manifest.json"),
        )

        assert result.success, result.error
        assert sorted(p.name for p in (tmp_path / "maps").iterdir()) == ["test_0000.png", "test_0001.png"]


class TestEvaluation:
    """Test cmd_eval(), the protocols and cmd_plot_pr()."""

    def test_oracle_without_checkpoint(self, dataset_dir, tmp_path, tiny_config):
        """Test the oracle mode alone scores perfectly."""
        result = cmd_eval(None, str(dataset_dir / "manifest.json"), str(tmp_path / "eval"), oracle=True,
                          config=tiny_config)

        assert result.success, result.error
        report = json.loads((tmp_path / "eval" / "eval_report.json").read_text())
        assert list(report) == ["oracle"]
        assert report["oracle"]["max_fbeta"] == pytest.approx(1.0)
        assert (tmp_path / "eval" / "pr_curve.png").exists()

    def test_eval_needs_checkpoint_or_oracle(self, dataset_dir, tmp_path):
        """Test evaluation without anything to score is a usage error."""
        result = cmd_eval(None, str(dataset_dir / "manifest.json"), str(tmp_path / "eval"))

        assert result.exit_code == 2

    def test_eval_checkpoint(self, trained, dataset_dir, tmp_path):
        """Test every configured mode and the oracle are reported."""
        result = cmd_eval(str(trained), str(dataset_dir / "manifest.json"), str(tmp_path / "eval"), oracle=True)

        assert result.success, result.error
        report = json.loads((tmp_path / "eval" / "eval_report.json").read_text())
        assert sorted(report) == ["free_running", "oracle", "teacher_forced"]
        for mode in report:
            assert (tmp_path / "eval" / f"per_image_{mode}.csv").exists()
            assert (tmp_path / "eval" / f"pr_{mode}.csv").exists()

    def test_probe_and_finetune(self, trained, dataset_dir, tmp_path, tiny_config):
        """Test both protocols write a report and per-image rows."""
        manifest = str(dataset_dir / "manifest.json")

        probe = cmd_probe(str(trained), manifest, str(tmp_path / "probe"), tiny_config, kernel=3)
        finetune = cmd_finetune(None, manifest, str(tmp_path / "ft"), tiny_config, fraction=0.5)

        assert probe.success, probe.error
        assert finetune.success, finetune.error
        assert json.loads((tmp_path / "probe" / "probe_k3_report.json").read_text())["backbone_unchanged"] is True
        assert json.loads((tmp_path / "ft" / "finetune_0.5_report.json").read_text())["subset_size"] == 2

    def test_plot_pr(self, dataset_dir, tmp_path, tiny_config):
        """Test PR CSVs written by evaluation can be overlaid."""
        cmd_eval(None, str(dataset_dir / "manifest.json"), str(tmp_path / "eval"), oracle=True, config=tiny_config)

        result = cmd_plot_pr([str(tmp_path / "eval" / "pr_oracle.csv")], str(tmp_path / "pr.png"))

        assert result.success, result.error
        assert Path(result.artifacts[0]).exists()

    def test_reruns_are_byte_identical(self, tmp_path, tiny_config):
        """Test synth, train and eval with one seed reproduce the log and report exactly."""
        outputs = []
        for name in ("a", "b"):
            root = tmp_path / name
            cmd_synth(tiny_config, str(root / "data"))
            cmd_train(tiny_config, str(root / "data" / "manifest.json"), str(root / "run"))
            result = cmd_eval(str(root / "run" / "last.pt"), str(root / "data" / "manifest.json"), str(root / "eval"))
            assert result.success, result.error
            outputs.append(((root / "run" / "train_log.jsonl").read_bytes(),
                            (root / "eval" / "eval_report.json").read_bytes()))

        assert outputs[0] == outputs[1]

    def test_plot_pr_missing_curve(self, tmp_path):
        """Test a missing CSV is a usage error."""
        assert cmd_plot_pr([str(tmp_path / "absent.csv")], str(tmp_path / "pr.png")).exit_code == 2
        assert cmd_plot_pr([], str(tmp_path / "pr.png")).exit_code == 2
