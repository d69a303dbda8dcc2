"""
Tests for the standalone scripts: synthetic dataset generation and the
multi-seed ablation gate.
"""

import json

import numpy as np
import pytest

from app.services.depth_io import read_depth_png16
from app.services.experiment_service import ExperimentConfig
from app.services.scene_service import load_scene_spec
from data.generate_sample_data import write_dataset
from evaluate import AblationEvaluator


class TestGenerateSampleData:
    """Tests for the dataset writer."""

    def test_layout(self, tmp_path):
        written = write_dataset(tmp_path, n_scenes=3, seed=2, pattern_kind="rows", step=4, count=100,
                                height=16, width=16, noise_sigma=0.0)
        assert written == 3
        for folder, suffix in (("gt", "png"), ("sparse", "png"), ("guide", "pgm"), ("specs", "txt")):
            assert len(list((tmp_path / folder).glob(f"*.{suffix}"))) == 3
        index = (tmp_path / "index.csv").read_text().strip().split("\n")
        assert index[0] == "scene,objects,samples"
        assert index[1].startswith("scene_0000,")

    def test_sparse_matches_ground_truth(self, tmp_path):
        write_dataset(tmp_path, n_scenes=1, seed=5, pattern_kind="uniform", step=4, count=20,
                      height=16, width=16, noise_sigma=0.0)
        gt = read_depth_png16(tmp_path / "gt" / "scene_0000.png")
        sparse = read_depth_png16(tmp_path / "sparse" / "scene_0000.png")
        assert int(sparse.valid.sum()) == 20
        np.testing.assert_array_equal(sparse.depth[sparse.valid], gt.depth[sparse.valid])
        assert load_scene_spec(tmp_path / "specs" / "scene_0000.txt").height == 16


class TestAblationGate:
    """Tests for the multi-seed evaluator on a tiny configuration."""

    @pytest.fixture
    def evaluator(self, tmp_path):
        config = ExperimentConfig(n_train=3, n_eval=2, height=8, width=8, row_step=2,
                                  epochs=2, batch_size=2, hidden_channels=4)
        gate = AblationEvaluator(seeds=[0, 1], required_wins=0, base_config=config)
        gate.results_path = tmp_path / "evaluation_results.json"
        return gate

    def test_run_seed(self, evaluator):
        result = evaluator.run_seed(1)
        assert result["seed"] == 1
        assert [row["config"] for row in result["rows"]] == ["SP/MSE", "DC/MSE", "SP/CE", "DC/CE"]
        assert isinstance(result["dc_ce_best"], bool)

    def test_results_file(self, evaluator, capsys):
        summary = evaluator.run_evaluation()
        assert summary["passed"]
        saved = json.loads(evaluator.results_path.read_text())
        assert [entry["seed"] for entry in saved["seeds"]] == [0, 1]
        assert saved["grid"]["n_bins"] == 16
        assert "PASS" in capsys.readouterr().out
