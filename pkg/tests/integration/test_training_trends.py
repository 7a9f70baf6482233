"""
Integration tests for customization trends across loss variants.

These train several models on ten-class worlds and are marked slow.
"""

import numpy as np
import pytest

from src.customizer import TrainConfig, Variant, query_knowledge, split_holdout, train
from src.fm_oracle import SampleStream, build_pool, fm_accuracy, world_create
from src.gatekeeper import edge_fraction, upload_fraction, uncertainty_batch

TREND_SEEDS = (0, 1, 2, 3, 4)


def make_setting(seed, noise_sigma, samples=400):
    world = world_create(seed=seed, num_classes=10, input_dim=64, embed_dim=16, noise_sigma=noise_sigma)
    pool = build_pool(world, world.class_names)
    dataset = SampleStream(world, seed=4).take(samples)
    return world, pool, dataset, query_knowledge(world, pool, dataset)


@pytest.fixture(scope="module")
def setting():
    return make_setting(11, 0.15)


def run(setting, variant, epochs, seed=2):
    world, pool, dataset, knowledge = setting
    cfg = TrainConfig(epochs=epochs, batch_size=32, learning_rate=0.05, seed=seed)
    return train(world, pool, dataset, cfg, variant, hidden_dim=32, knowledge=knowledge)


@pytest.mark.integration
@pytest.mark.slow
class TestVariantTrends:
    """Semantic customization against the distillation and fine-tuning baselines."""

    def test_semantic_beats_vanilla_distillation_across_seeds(self):
        """Paired over five noisy worlds, the mean held-out gap is non-negative."""
        gaps = []
        for seed in TREND_SEEDS:
            noisy = make_setting(seed, 0.3)
            _, semantic = run(noisy, Variant.SEMANTIC, epochs=8, seed=seed)
            _, vanilla = run(noisy, Variant.VANILLA_KD, epochs=8, seed=seed)
            gaps.append(semantic.final_accuracy - vanilla.final_accuracy)
        assert np.mean(gaps) >= 0.0

    @pytest.mark.parametrize("variant", list(Variant))
    def test_loss_falls(self, setting, variant):
        _, log = run(setting, variant, epochs=10)
        assert log.losses[-1] < log.losses[0]

    def test_semantic_approaches_the_foundation_model(self, setting):
        world, pool, dataset, _ = setting
        _, holdout = split_holdout(dataset)
        _, log = run(setting, Variant.SEMANTIC, epochs=60)
        assert log.final_accuracy >= 0.9 * fm_accuracy(world, pool, holdout)

    def test_accuracy_improves_with_training(self, setting):
        _, log = run(setting, Variant.SEMANTIC, epochs=30)
        assert log.records[-1].holdout_accuracy >= log.records[0].holdout_accuracy


@pytest.mark.integration
@pytest.mark.slow
class TestCollectionTrends:
    """More collected samples mean fewer uploads and more edge processing."""

    EDGE_THRESHOLD = 0.5
    UPLOAD_THRESHOLD = 0.99

    @pytest.fixture(scope="class")
    def margins(self):
        world, pool, dataset, knowledge = make_setting(11, 0.1, samples=1600)
        eval_raws = np.vstack([s.raw for s in SampleStream(world, seed=99, start_id=100_000).take(300)])
        cfg = TrainConfig(epochs=30, batch_size=32, learning_rate=0.05, seed=2)
        result = {}
        for count in (100, 1600):
            model, _ = train(
                world, pool, dataset[:count], cfg, Variant.SEMANTIC, hidden_dim=32, knowledge=knowledge[:count]
            )
            result[count] = uncertainty_batch(model, pool, eval_raws)[0]
        return result

    def test_upload_fraction_falls(self, margins):
        assert upload_fraction(margins[1600], self.UPLOAD_THRESHOLD) < upload_fraction(
            margins[100], self.UPLOAD_THRESHOLD
        )

    def test_edge_fraction_rises(self, margins):
        assert edge_fraction(margins[1600], self.EDGE_THRESHOLD) > edge_fraction(margins[100], self.EDGE_THRESHOLD)
