import math

import numpy as np
import pytest

from app.models.errors import DomainError
from app.models.sns import SuperNode
from app.services.embeddings import HashEmbeddingProvider
from app.services.numerics import Adam, backward, finite_difference_check, tensor
from app.services.sns import (
    BoxRef,
    NegativePool,
    SNSModel,
    collect_boxes,
    contrastive_loss,
    fused_distance_term,
    mil_nce_loss,
    sns_total_loss,
    supernode_feature,
    supernode_weights,
    train_sns,
)
from tests.factories import make_object, make_scene


def supernode(features, visual, ground_truth=None, labels=None):
    features = np.asarray(features, dtype=np.float64)
    labels = labels or tuple(f"l{j}" for j in range(features.shape[0]))
    return SuperNode(0, tuple(labels), tensor(features), tensor([visual]), ground_truth)


class TestWeights:
    def test_singleton(self):
        assert np.array_equal(supernode_weights(supernode([[0.3, 0.1]], [1.0, 2.0])).data, [[1.0]])

    def test_equal_scores_are_uniform(self):
        w = supernode_weights(supernode([[1.0, 0.0]] * 4, [0.5, 0.5])).data
        np.testing.assert_allclose(w, np.full((1, 4), 0.25))

    def test_analytic_softmax(self):
        w = supernode_weights(supernode([[math.log(2), 0.0], [0.0, 0.0]], [1.0, 0.0])).data
        np.testing.assert_allclose(w, [[2 / 3, 1 / 3]])

    def test_weights_on_simplex(self, rng):
        for _ in range(20):
            w = supernode_weights(supernode(rng.normal(size=(5, 4)), rng.normal(size=4))).data
            assert (w >= 0).all()
            assert abs(w.sum() - 1.0) <= 1e-12


class TestFeature:
    def test_singleton_is_the_candidate(self):
        sn = supernode([[0.3, -0.7]], [1.0, 1.0])
        assert np.array_equal(supernode_feature(sn).data, [[0.3, -0.7]])

    def test_identical_candidates(self):
        sn = supernode([[0.5, 2.0]] * 3, [0.1, 0.2])
        np.testing.assert_allclose(supernode_feature(sn).data, [[0.5, 2.0]], atol=1e-15)

    def test_given_weights(self):
        sn = supernode(np.eye(3)[:2], [1.0, 0.0, 0.0])
        out = supernode_feature(sn, tensor([[2 / 3, 1 / 3]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3, 0.0]])

    def test_fused_feature_is_a_convex_combination(self, rng):
        for _ in range(10):
            sn = supernode(rng.normal(size=(3, 6)), rng.normal(size=6))
            fused = supernode_feature(sn).data[0]
            coefficients, *_ = np.linalg.lstsq(sn.features.data.T, fused, rcond=None)
            assert np.linalg.norm(sn.features.data.T @ coefficients - fused) < 1e-8
            assert (coefficients > -1e-10).all()
            assert coefficients.sum() == pytest.approx(1.0, abs=1e-10)


class TestMilNce:
    def test_balanced_pair(self):
        loss = mil_nce_loss([supernode([[1.0]], [0.5])], [tensor([[1.0]])])
        assert loss.item() == pytest.approx(math.log(2))

    def test_saturated(self):
        loss = mil_nce_loss([supernode([[50.0]], [1.0])], [tensor([[-50.0]])])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_positives_two_negatives(self):
        loss = mil_nce_loss([supernode([[0.3], [-0.1]], [1.0])], [tensor([[0.2], [0.0]])]).item()
        positives = math.exp(0.3) + math.exp(-0.1)
        expected = -math.log(positives / (positives + math.exp(0.2) + 1.0))
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.6858, abs=1e-4)

    def test_permutation_invariance(self, rng):
        pos, neg, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=4)
        base = mil_nce_loss([supernode(pos, v)], [tensor(neg)]).item()
        shuffled = mil_nce_loss([supernode(pos[::-1], v)], [tensor(neg[[4, 2, 0, 1, 3]])]).item()
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_empty_negatives(self):
        with pytest.raises(DomainError):
            mil_nce_loss([supernode([[1.0]], [1.0])], [tensor(np.zeros((0, 1)))])


class TestContrastive:
    def test_single_certain_candidate(self):
        assert contrastive_loss([supernode([[2.0]], [1.0], ground_truth=0)]).item() == pytest.approx(0.0)

    def test_uniform_scores(self):
        sn = supernode([[1.0]] * 5, [0.3], ground_truth=2)
        assert contrastive_loss([sn]).item() == pytest.approx(math.log(5))

    def test_ground_truth_margin(self):
        sn = supernode([[1.0], [0.0]], [1.0], ground_truth=0)
        assert contrastive_loss([sn]).item() == pytest.approx(0.3133, abs=1e-4)

    def test_missing_ground_truth(self):
        with pytest.raises(DomainError):
            contrastive_loss([supernode([[1.0]], [1.0])])


class TestDistance:
    def test_equal_features(self):
        sn = supernode([[0.2, 0.4]], [1.0, 1.0], ground_truth=0)
        assert fused_distance_term([sn]).item() == pytest.approx(0.0)

    def test_three_four_five(self):
        sn = supernode([[0.0, 0.0, 0.0], [6.0, 8.0, 0.0]], [0.0, 0.0, 1.0], ground_truth=0)
        np.testing.assert_allclose(supernode_feature(sn).data, [[3.0, 4.0, 0.0]])
        assert fused_distance_term([sn]).item() == pytest.approx(5.0)

    def test_symmetry(self, rng):
        for _ in range(5):
            a, b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
            forward = fused_distance_term([supernode(np.vstack([a, b]), np.zeros(4), ground_truth=1)])
            reverse = fused_distance_term([supernode(np.vstack([b, a]), np.zeros(4), ground_truth=1)])
            assert forward.item() == pytest.approx(reverse.item(), abs=1e-12)

    def test_total_is_the_sum_of_terms(self, rng):
        sns = [supernode(rng.normal(size=(3, 4)), rng.normal(size=4), ground_truth=1) for _ in range(2)]
        negs = [tensor(rng.normal(size=(2, 4))) for _ in range(2)]
        total = sns_total_loss(sns, negs).item()
        parts = mil_nce_loss(sns, negs).item() + contrastive_loss(sns).item() + fused_distance_term(sns).item()
        assert total == pytest.approx(parts, abs=1e-12)


class TestNegativePool:
    def test_never_returns_candidates(self):
        pool = NegativePool(['cube', 'ball', 'cone', 'ring', 'star'], seed=0)
        for _ in range(50):
            picks = pool.sample(['cube', 'ball'], 2)
            assert not {'cube', 'ball'} & set(picks)
            assert len(set(picks)) == 2

    def test_exhausted(self):
        with pytest.raises(DomainError):
            NegativePool(['cube'], seed=0).sample(['cube'], 1)


def sns_scene(image_id, truths, vocab, k=3):
    objects = []
    for box_id, truth in enumerate(truths):
        others = [w for w in vocab if w != truth][box_id % 2:][:k - 1]
        labels = others[:box_id % k] + [truth] + others[box_id % k:]
        objects.append(make_object(box_id, labels[:k], ground_truth=truth))
    return make_scene(objects, image_id=image_id)


VOCAB = ['cube', 'ball', 'cone', 'ring', 'star', 'disk', 'cross']


@pytest.fixture
def sns_model():
    return SNSModel(HashEmbeddingProvider(6, 0), d_model=4, mlp_hidden=5, k=3, seed=0)


def test_gradient_check_on_small_batch(sns_model):
    scene = sns_scene('img', ['cube', 'ring', 'star'], VOCAB)
    boxes = [BoxRef(scene.image_id, obj) for obj in scene.objects]
    negatives = [['disk', 'cross'], ['disk', 'cube'], ['cone', 'cross']]

    def f():
        return sns_total_loss(*sns_model.build_supernodes(boxes, negatives))

    assert finite_difference_check(f, list(sns_model.registry)) < 1e-4


def test_single_step_raises_ground_truth_weight(sns_model):
    scene = sns_scene('img', ['cone'], VOCAB)
    box = BoxRef(scene.image_id, scene.objects[0])
    before = sns_model.build_supernodes([box])[0][0]
    gt = before.ground_truth
    w_before = supernode_weights(before).data[0, gt]

    sns_model.registry.zero_grad()
    backward(contrastive_loss([before]))
    Adam(list(sns_model.registry), lr=1e-4).step()

    after = sns_model.build_supernodes([box])[0][0]
    assert supernode_weights(after).data[0, gt] > w_before


def test_collect_boxes_skips_ground_truth_outside_top_k():
    scene = make_scene([make_object(0, ['ball', 'cube'], ground_truth='cube'),
                        make_object(1, ['ball', 'cone', 'ring'], ground_truth='star')])
    assert [b.obj.box_id for b in collect_boxes([scene], k=3)] == [0]


def test_collect_boxes_requires_ground_truth():
    with pytest.raises(DomainError):
        collect_boxes([make_scene([make_object(0, ['ball'])])], k=3)


def test_train_sns_rejects_empty_corpus(micro_config):
    with pytest.raises(DomainError):
        train_sns([], micro_config, VOCAB)


def separable_scenes(n):
    return [sns_scene(f"img{i}", [VOCAB[(i + j) % len(VOCAB)] for j in range(3)], VOCAB) for i in range(n)]


def test_training_reduces_loss(micro_config):
    config = micro_config.with_overrides(sns_epochs=5, noise_sigma=0.0, sns_batch_size=4)
    model, report = train_sns(separable_scenes(4), config, VOCAB)
    assert report.boxes == 12
    assert len(report.losses) == 5
    assert report.losses[-1] < report.losses[0]
    assert 0.0 <= report.accuracy <= 1.0
    assert set(model.selection_weights(separable_scenes(1)[0])) == {0, 1, 2}


@pytest.mark.slow
def test_separable_corpus_reaches_full_accuracy(micro_config):
    config = micro_config.with_overrides(sns_epochs=50, noise_sigma=0.0, sns_batch_size=4)
    _, report = train_sns(separable_scenes(6), config, VOCAB)
    assert report.accuracy == 1.0
    assert all(b <= a + 1e-3 for a, b in zip(report.losses, report.losses[1:]))
