"""
Desk-scale acceptance runs: training, ablation and protocol directions.

These train the default desk configuration on 500 synthetic pairs several
times over and take tens of minutes on a CPU. They are deselected by default;
run them with ``pytest -m slow``.
"""

import statistics
from dataclasses import replace

import pytest

from src.checkpoint import restore_model
from src.config import TrainConfig
from src.data import build_datasets, generate_synthetic_dataset
from src.protocols import finetune_fraction, linear_probe, load_encoder, run_ablation_suite
from src.trainer import evaluate, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_config():
    return TrainConfig.desk_scale()


@pytest.fixture(scope="module")
def desk_samples(desk_config):
    return generate_synthetic_dataset(desk_config.synth)


@pytest.fixture(scope="module")
def desk_runs(desk_config, desk_samples, tmp_path_factory):
    """One trained model per seed with its training result and free-running evaluation."""
    runs = []
    for seed in SEEDS:
        config = replace(desk_config, seed=seed)
        datasets, scale = build_datasets(desk_samples, config)
        result = train(config, datasets["train"], str(tmp_path_factory.mktemp(f"desk_{seed}")), scale)
        model, _, _ = restore_model(result.checkpoint_path)
        evaluation = evaluate(model, datasets["test"], config, modes=["free_running"])
        runs.append((result, evaluation.reports["free_running"], datasets))
    return runs


def _median(values):
    return statistics.median(values)


class TestDeskTraining:
    """Training the desk configuration on synthetic pairs."""

    def test_stroke_loss_halves(self, desk_runs):
        """Test the last epoch's stroke loss is below half the first epoch's."""
        ratios = []
        for result, _, _ in desk_runs:
            first, last = result.stroke_trend()
            ratios.append(last / first if first > 0 else last - first)

        assert _median(ratios) < 0.5

    def test_attention_concentrates_on_objects(self, desk_runs):
        """Test attention mass inside the object is at least twice its area fraction."""
        ratios = [r.extra["attention_mass_inside"] / r.extra["mask_area_fraction"] for _, r, _ in desk_runs]

        assert _median(ratios) >= 2.0

    def test_max_fbeta(self, desk_runs):
        """Test the test-split max F-beta reaches 0.5."""
        assert _median([r.max_fbeta for _, r, _ in desk_runs]) >= 0.5


class TestProtocolDirections:
    """Probing and fine-tuning orderings over three seeds."""

    def test_trained_features_probe_better(self, desk_runs, desk_config):
        """Test probing a trained encoder beats probing a random one."""
        trained, random = [], []
        for seed, (result, _, datasets) in zip(SEEDS, desk_runs):
            args = (datasets["train"], datasets["test"], desk_config)
            trained.append(linear_probe(load_encoder(result.checkpoint_path, desk_config), *args, seed=seed))
            random.append(linear_probe(load_encoder(None, desk_config, seed), *args, seed=seed))

        assert _median([p.report.max_fbeta for p in trained]) > _median([p.report.max_fbeta for p in random])

    def test_wider_probe_is_not_worse(self, desk_runs, desk_config):
        """Test a 3x3 probe matches or beats a 1x1 probe."""
        scores = {1: [], 3: []}
        for seed, (result, _, datasets) in zip(SEEDS, desk_runs):
            encoder = load_encoder(result.checkpoint_path, desk_config)
            for kernel in scores:
                probe = linear_probe(encoder, datasets["train"], datasets["test"], desk_config, kernel=kernel, seed=seed)
                scores[kernel].append(probe.report.max_fbeta)

        assert _median(scores[3]) >= _median(scores[1])

    def test_finetuning_fractions(self, desk_runs, desk_config):
        """Test 10% of the labels beat 1%, and sketch pretraining helps at 1%."""
        ten, one, one_random = [], [], []
        for seed, (result, _, datasets) in zip(SEEDS, desk_runs):
            args = (datasets["train"], datasets["test"], desk_config)
            encoder = load_encoder(result.checkpoint_path, desk_config)
            ten.append(finetune_fraction(encoder, *args, 0.1, seed=seed).report.max_fbeta)
            one.append(finetune_fraction(encoder, *args, 0.01, seed=seed).report.max_fbeta)
            random = load_encoder(None, desk_config, seed)
            one_random.append(finetune_fraction(random, *args, 0.01, seed=seed).report.max_fbeta)

        assert _median(ten) >= _median(one)
        assert _median(one) >= _median(one_random)


class TestAblationDirections:
    """Ablated variants against the full model."""

    def test_full_model_is_best(self, desk_config, desk_samples, tmp_path):
        """Test removing equivariance, 2D attention or multiple scales does not help."""
        config = replace(desk_config, eval_modes=("free_running",))

        result = run_ablation_suite(
            config, desk_samples, str(tmp_path), variants=["full", "no_eqv", "attention_1d", "single_scale"],
            seeds=SEEDS,
        )

        medians = {}
        for row in result.rows:
            medians.setdefault(row["variant"], []).append(row["max_fbeta"])
        full = _median(medians.pop("full"))
        for variant, scores in medians.items():
            assert full >= _median(scores), variant

    def test_mixture_sweep_peaks_above_minimum(self, desk_config, desk_samples, tmp_path):
        """Test the best mixture size is not the smallest one tried."""
        config = replace(desk_config, eval_modes=("free_running",))

        result = run_ablation_suite(config, desk_samples, str(tmp_path), variants=["gmm_m1"], seeds=SEEDS, mixtures=(5, 10))

        medians = {}
        for row in result.rows:
            medians.setdefault(row["variant"], []).append(row["max_fbeta"])
        best = max(medians, key=lambda name: _median(medians[name]))
        assert best != "gmm_m1"
