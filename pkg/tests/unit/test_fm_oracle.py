"""
Unit tests for the synthetic foundation model.

Tests world construction, sample streams, the sensor and text encoders,
knowledge queries and cloud-side prediction.
"""

import numpy as np
import pytest

from src.embeddings import PromptTemplate, TextEmbeddingPool
from src.error_handler import DimensionMismatchError, EmptyPoolError, InvalidConfigError, UnknownClassError
from src.fm_oracle import (
    MAX_PROTOTYPE_COSINE,
    SampleStream,
    build_pool,
    fm_accuracy,
    fm_encode,
    fm_encode_batch,
    fm_predict,
    fm_predict_batch,
    fm_text_encode,
    knowledge_query,
    query_with_embedding,
    sample_draw,
    world_create,
)


@pytest.mark.unit
class TestWorldCreate:
    """Test synthetic world construction."""

    def test_deterministic(self):
        """The same seed builds the same world."""
        a = world_create(seed=11, num_classes=5, input_dim=24, embed_dim=8)
        b = world_create(seed=11, num_classes=5, input_dim=24, embed_dim=8)
        np.testing.assert_array_equal(a.prototypes, b.prototypes)
        np.testing.assert_array_equal(a.base_inputs, b.base_inputs)

    @pytest.mark.parametrize("num_classes,embed_dim", [(4, 8), (10, 64), (12, 8)])
    def test_prototypes_separated(self, num_classes, embed_dim):
        """Prototypes are unit vectors with pairwise cosine below the separation bound."""
        world = world_create(seed=2, num_classes=num_classes, input_dim=2 * embed_dim, embed_dim=embed_dim)
        protos = world.prototypes
        np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0)
        gram = protos @ protos.T
        off_diagonal = gram[~np.eye(num_classes, dtype=bool)]
        assert off_diagonal.max() < MAX_PROTOTYPE_COSINE

    def test_simplex_geometry_when_classes_fit(self):
        """With C <= D the prototypes are equiangular at cosine -1/(C-1)."""
        world = world_create(seed=4, num_classes=5, input_dim=32, embed_dim=8)
        gram = world.prototypes @ world.prototypes.T
        off_diagonal = gram[~np.eye(5, dtype=bool)]
        np.testing.assert_allclose(off_diagonal, -0.25, atol=1e-10)

    def test_base_input_encodes_onto_prototype(self, small_world):
        """The noiseless input of each class maps exactly onto its prototype."""
        for name in small_world.class_names:
            encoded = fm_encode(small_world, small_world.base_input(name))
            np.testing.assert_allclose(encoded.values, small_world.prototype(name).values, atol=1e-9)

    def test_default_class_names(self, small_world):
        assert small_world.class_names == ("class_00", "class_01", "class_02", "class_03")

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_classes": 1},
            {"num_classes": 3, "input_dim": 4, "embed_dim": 8},
            {"num_classes": 3, "embed_dim": 0},
            {"num_classes": 3, "noise_sigma": -0.1},
            {"num_classes": 2, "class_names": ["a", "a"]},
            {"num_classes": 2, "class_names": ["a"]},
        ],
    )
    def test_invalid_parameters(self, kwargs):
        params = {"seed": 0, "input_dim": 16, "embed_dim": 8}
        params.update(kwargs)
        with pytest.raises(InvalidConfigError):
            world_create(**params)

    def test_unknown_class(self, small_world):
        with pytest.raises(UnknownClassError):
            small_world.class_index("giraffe")


@pytest.mark.unit
class TestSampleStream:
    """Test sample generation."""

    def test_ids_sequential(self, small_world):
        samples = SampleStream(small_world, seed=0, start_id=10).take(5)
        assert [s.id for s in samples] == [10, 11, 12, 13, 14]

    def test_reproducible(self, small_world):
        """Equal seeds give identical streams; different seeds differ."""
        a = SampleStream(small_world, seed=5).take(20)
        b = SampleStream(small_world, seed=5).take(20)
        c = SampleStream(small_world, seed=6).take(20)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.raw, y.raw)
            assert x.true_class == y.true_class
        assert any(not np.array_equal(x.raw, z.raw) for x, z in zip(a, c))

    def test_restricted_classes(self, small_world):
        stream = SampleStream(small_world, ["class_01", "class_02"], seed=0)
        assert {s.true_class for s in stream.take(50)} == {"class_01", "class_02"}
        stream.set_classes(["class_03"])
        assert stream.draw().true_class == "class_03"

    def test_noise_scale(self, small_world):
        """Raw noise around the base input has standard deviation sigma."""
        rng = np.random.default_rng(0)
        draws = np.vstack([sample_draw(small_world, "class_00", rng).raw for _ in range(400)])
        residual = draws - small_world.base_input("class_00")
        assert residual.std() == pytest.approx(small_world.noise_sigma, rel=0.1)

    def test_unknown_class_rejected(self, small_world):
        with pytest.raises(UnknownClassError):
            SampleStream(small_world, ["nope"])

    def test_sample_raw_read_only(self, small_world):
        sample = SampleStream(small_world).draw()
        with pytest.raises(ValueError):
            sample.raw[0] = 1.0


@pytest.mark.unit
class TestEncoders:
    """Test the FM sensor and text encoders."""

    def test_sensor_encoder_unit_norm(self, small_world, small_dataset):
        for sample in small_dataset[:20]:
            assert np.linalg.norm(fm_encode(small_world, sample.raw).values) == pytest.approx(1.0)

    def test_batch_matches_single(self, small_world, small_dataset):
        raws = np.vstack([s.raw for s in small_dataset[:10]])
        batch = fm_encode_batch(small_world, raws)
        for row, raw in zip(batch, raws):
            np.testing.assert_allclose(row, fm_encode(small_world, raw).values, atol=1e-12)

    def test_dimension_checked(self, small_world):
        with pytest.raises(DimensionMismatchError):
            fm_encode(small_world, np.ones(small_world.input_dim + 1))

    def test_fm_noise_is_replayable(self):
        """With FM noise and no explicit stream, equal inputs encode identically."""
        world = world_create(seed=1, num_classes=3, input_dim=16, embed_dim=8, fm_noise_sigma=0.2)
        raw = world.base_input("class_00")
        first, second = fm_encode(world, raw), fm_encode(world, raw.copy())
        np.testing.assert_array_equal(first.values, second.values)
        assert not np.allclose(first.values, world.prototype("class_00").values)

    def test_text_encoder_exact_for_world_classes(self, small_world):
        text = fm_text_encode(small_world, "class_02", PromptTemplate())
        np.testing.assert_array_equal(text.values, small_world.prototype("class_02").values)

    def test_text_encoder_hashes_open_set_names(self, small_world):
        """Unknown names get a deterministic unit vector that depends on the prompt."""
        a = fm_text_encode(small_world, "unicorn", PromptTemplate())
        b = fm_text_encode(small_world, "unicorn", PromptTemplate())
        c = fm_text_encode(small_world, "unicorn", PromptTemplate("a sketch of a {CLS}"))
        np.testing.assert_array_equal(a.values, b.values)
        assert np.linalg.norm(a.values) == pytest.approx(1.0)
        assert not np.allclose(a.values, c.values)


@pytest.mark.unit
class TestKnowledgeQuery:
    """Test knowledge queries and FM prediction."""

    def test_pool_grows_by_version(self, small_world):
        pool = build_pool(small_world, ["class_00", "class_01"])
        assert pool.version == 2
        grown = build_pool(small_world, ["unicorn"], pool=pool)
        assert grown.version == 3
        assert grown.class_names == ["class_00", "class_01", "unicorn"]

    def test_pseudo_label_of_base_input(self, small_world, small_pool):
        """A noiseless input is labelled with its own class at confidence 1."""
        label = knowledge_query(small_world, small_pool, small_world.base_input("class_03"))
        assert label.class_name == "class_03"
        assert label.confidence == pytest.approx(1.0)
        np.testing.assert_array_equal(label.text_embedding.values, small_pool.get("class_03").values)

    def test_confidence_clamped_at_zero(self, small_world):
        """A pool whose only entry points away from the sample yields zero confidence."""
        opposite = TextEmbeddingPool.empty(small_world.embed_dim).add("anti", -small_world.prototype("class_00"))
        label = knowledge_query(small_world, opposite, small_world.base_input("class_00"))
        assert label.class_name == "anti"
        assert label.confidence == 0.0

    def test_query_with_embedding(self, small_world, small_pool, small_dataset):
        embedding, label = query_with_embedding(small_world, small_pool, small_dataset[0].raw)
        assert label.confidence == pytest.approx(max(0.0, float(embedding.values @ label.text_embedding.values)))

    def test_empty_pool(self, small_world):
        empty = TextEmbeddingPool.empty(small_world.embed_dim)
        with pytest.raises(EmptyPoolError):
            knowledge_query(small_world, empty, small_world.base_input("class_00"))
        with pytest.raises(EmptyPoolError):
            fm_predict(small_world, empty, small_world.base_input("class_00"))

    def test_fm_is_accurate_on_the_small_world(self, small_world, small_pool, small_dataset):
        assert fm_accuracy(small_world, small_pool, small_dataset) >= 0.95

    def test_batch_prediction_matches_single(self, small_world, small_pool, small_dataset):
        raws = np.vstack([s.raw for s in small_dataset[:30]])
        batch = fm_predict_batch(small_world, small_pool, raws)
        assert batch == [fm_predict(small_world, small_pool, raw)[0] for raw in raws]
