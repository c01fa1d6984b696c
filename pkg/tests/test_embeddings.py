import numpy as np
import pytest

from app.models.errors import DataFormatError, DimensionError, DomainError
from app.services.embeddings import (
    AffineProjection,
    EmbeddingProvider,
    FileEmbeddingProvider,
    HashEmbeddingProvider,
    LabelMLP,
    create_provider,
    embed_coordinate_node,
    embed_label_node,
    embed_label_nodes,
    embed_visual_node,
    synthesize_visual_feature,
)
from app.services.numerics import ParameterRegistry
from tests.factories import make_object


class ZeroProvider(EmbeddingProvider):
    def __call__(self, word):
        return np.zeros(self.dim)


@pytest.fixture
def registry():
    return ParameterRegistry(seed=0)


def test_label_embedding_is_deterministic(registry, provider):
    mlp = LabelMLP(registry, 'mlp', provider.dim, 8, 4)
    first = embed_label_node('cube', provider, mlp).data
    second = embed_label_node('cube', provider, mlp).data
    assert np.array_equal(first, second)
    assert first.shape == (1, 4)


def test_batched_embedding_matches_single(registry, provider):
    mlp = LabelMLP(registry, 'mlp', provider.dim, 8, 4)
    batch = embed_label_nodes(['cube', 'ball'], provider, mlp).data
    np.testing.assert_allclose(batch[1], embed_label_node('ball', provider, mlp).data[0], atol=1e-12)


def test_zero_word_vector_gives_output_bias(registry):
    mlp = LabelMLP(registry, 'mlp', 5, 8, 4)
    out = embed_label_node('anything', ZeroProvider(5), mlp).data
    assert np.array_equal(out, mlp.b2.data)
    assert np.array_equal(out, np.zeros((1, 4)))


def test_hash_provider_has_no_collisions():
    provider = HashEmbeddingProvider(dim=50, seed=0)
    vectors = {provider(f"word{i}").tobytes() for i in range(1000)}
    assert len(vectors) == 1000
    assert np.isfinite(provider('')).all()


def test_hash_provider_depends_on_seed():
    assert not np.array_equal(HashEmbeddingProvider(8, 0)('cube'), HashEmbeddingProvider(8, 1)('cube'))


def test_coordinate_origin_with_zero_bias(registry):
    projection = AffineProjection(registry, 'coord', 2, 4)
    assert np.array_equal(embed_coordinate_node((0.0, 0.0), projection).data, np.zeros((1, 4)))


def test_coordinate_outside_unit_square(registry):
    projection = AffineProjection(registry, 'coord', 2, 4)
    with pytest.raises(DomainError):
        embed_coordinate_node((1.5, 0.0), projection)


def test_supplied_visual_feature_is_projected(registry):
    projection = AffineProjection(registry, 'visual', 3, 4)
    obj = make_object(0, ['cube'], feature=(1.0, 0.0, 0.0))
    out = embed_visual_node(obj, 'img', projection, HashEmbeddingProvider(3), 0.1, 0).data
    np.testing.assert_allclose(out, projection.w.data[:1] + projection.b.data)


def test_supplied_visual_feature_of_wrong_length(registry):
    projection = AffineProjection(registry, 'visual', 3, 4)
    obj = make_object(0, ['cube'], feature=(1.0, 0.0))
    with pytest.raises(DimensionError):
        embed_visual_node(obj, 'img', projection, HashEmbeddingProvider(3), 0.1, 0)


def test_noise_free_visual_feature_is_label_embedding(provider):
    obj = make_object(0, ['ball', 'cube'], ground_truth='cube')
    assert np.array_equal(synthesize_visual_feature(obj, provider, 0.0, 0), provider('cube'))


def test_noisy_visual_feature_is_seeded(provider):
    obj = make_object(3, ['cube'], ground_truth='cube')
    first = synthesize_visual_feature(obj, provider, 0.1, 7, 'img')
    second = synthesize_visual_feature(obj, provider, 0.1, 7, 'img')
    assert np.array_equal(first, second)
    assert not np.array_equal(first, synthesize_visual_feature(obj, provider, 0.1, 8, 'img'))
    assert not np.array_equal(first, provider('cube'))


def test_file_provider_reads_vectors_and_falls_back(tmp_path):
    path = tmp_path / 'vectors.txt'
    path.write_text('cube 1 2 3\nball 0 0.5 -1\n', encoding='utf-8')
    provider = FileEmbeddingProvider(str(path), seed=2)
    assert provider.dim == 3
    assert np.array_equal(provider('cube'), [1.0, 2.0, 3.0])
    assert np.array_equal(provider('cone'), HashEmbeddingProvider(3, 2)('cone'))


def test_file_provider_rejects_ragged_rows(tmp_path):
    path = tmp_path / 'vectors.txt'
    path.write_text('cube 1 2 3\nball 0 0.5\n', encoding='utf-8')
    with pytest.raises(DataFormatError) as e:
        FileEmbeddingProvider(str(path))
    assert e.value.line == 2


def test_create_provider(tmp_path):
    assert isinstance(create_provider('hash', 10), HashEmbeddingProvider)
    with pytest.raises(DataFormatError):
        create_provider('file', 10, path=str(tmp_path / 'missing.txt'))
    path = tmp_path / 'vectors.txt'
    path.write_text('cube 1 2 3\n', encoding='utf-8')
    with pytest.raises(DimensionError):
        create_provider('file', 10, path=str(path))
    with pytest.raises(DomainError):
        create_provider('glove', 10)
