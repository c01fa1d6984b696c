import math

import numpy as np
import pytest

from app.models.errors import ConfigError, DimensionError
from app.models.transformer import ModelOutputs, Stage, StageSchedule, StreamConfig, StreamResult
from app.services.guided_transformer import (
    EncoderLayer,
    FusionHead,
    StreamEncoder,
    assemble_stream_input,
    compose_constraint,
    encoder_layer,
    fuse_and_classify,
    guided_attention,
    lift_adjacency,
    predict,
    run_stream,
    scaled_dot_product_attention,
    total_loss,
)
from app.services.numerics import ParameterRegistry, finite_difference_check, tensor


def random_qkv(rng, n=5, d=4):
    return tuple(tensor(rng.normal(size=(n, d))) for _ in range(3))


def random_symmetric(rng, n, p=0.3):
    a = rng.uniform(size=(n, n)) < p
    a = a | a.T
    np.fill_diagonal(a, True)
    return a.astype(float)


class TestGuidedAttention:
    def test_all_ones_matches_unguided(self, rng):
        worst = 0.0
        for _ in range(100):
            n, d = int(rng.integers(2, 17)), int(rng.integers(1, 9))
            q, k, v = random_qkv(rng, n, d)
            guided, _ = guided_attention(q, k, v, np.ones((n, n)))
            plain, _ = scaled_dot_product_attention(q, k, v)
            worst = max(worst, np.abs(guided.data - plain.data).max())
        assert worst <= 1e-12

    def test_identity_selects_own_value(self, rng):
        q, k, v = random_qkv(rng)
        out, weights = guided_attention(q, k, v, np.eye(5))
        assert np.array_equal(out.data, v.data)
        assert np.array_equal(weights.data, np.eye(5))

    def test_uniform_hand_case(self):
        zeros = tensor([[0.0], [0.0]])
        out, _ = guided_attention(zeros, zeros, tensor([[2.0], [4.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[2.0], [3.0]])

    def test_masked_weights_vanish_and_rows_are_stochastic(self, rng):
        q, k, v = random_qkv(rng, n=6)
        mask = (rng.uniform(size=(6, 6)) < 0.5).astype(float)
        np.fill_diagonal(mask, 1.0)
        _, weights = guided_attention(q, k, v, mask)
        assert (weights.data[mask == 0] == 0).all()
        np.testing.assert_allclose(weights.data.sum(axis=1), np.ones(6), atol=1e-12)

    def test_fully_masked_row_is_zero(self, rng):
        q, k, v = random_qkv(rng, n=3)
        mask = np.ones((3, 3))
        mask[1] = 0.0
        out, weights = guided_attention(q, k, v, mask, epsilon=1e-9)
        assert np.array_equal(weights.data[1], np.zeros(3))
        assert np.array_equal(out.data[1], np.zeros(4))

    def test_mask_shape_mismatch(self, rng):
        q, k, v = random_qkv(rng)
        with pytest.raises(DimensionError):
            guided_attention(q, k, v, np.ones((4, 4)))


class TestComposeConstraint:
    a_img = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    a_q = np.array([[0, 1], [1, 0]])

    def test_question_only(self):
        g = compose_constraint(Stage.QUESTION_ONLY, self.a_img, self.a_q)
        assert np.array_equal(g.region1, np.eye(3))
        assert np.array_equal(g.region2, [[1, 1], [1, 1]])
        assert not g.region3.any() and not g.region4.any()

    def test_cross_modality(self):
        g = compose_constraint(Stage.CROSS_MODALITY, self.a_img, self.a_q)
        assert np.array_equal(g.region1, np.eye(3))
        assert np.array_equal(g.region2, np.eye(2))
        assert g.region3.all() and g.region4.all()

    def test_full(self):
        g = compose_constraint(Stage.FULL, self.a_img, self.a_q)
        assert np.array_equal(g.region1, self.a_img + np.eye(3))
        assert g.region3.all() and g.region4.all()

    def test_full_visual_stream_with_tree_question(self):
        tree = np.array([[1, 1, 0, 1], [1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 1]])
        g = compose_constraint(Stage.FULL, np.ones((3, 3)), tree)
        assert g.region1.all() and g.region3.all() and g.region4.all()
        assert np.array_equal(g.region2, tree)

    def test_special_positions_are_unmasked(self):
        lifted_img, lifted_q = lift_adjacency(self.a_img), lift_adjacency(self.a_q)
        g = compose_constraint(Stage.QUESTION_ONLY, lifted_img, lifted_q, special_positions=(0, 4))
        assert g.mask[0].all() and g.mask[:, 0].all()
        assert g.mask[4].all() and g.mask[:, 4].all()

    def test_special_position_out_of_range(self):
        with pytest.raises(DimensionError):
            compose_constraint(Stage.FULL, self.a_img, self.a_q, special_positions=(9,))

    def test_earlier_stages_are_contained_in_full(self, rng):
        for _ in range(50):
            a_img = random_symmetric(rng, int(rng.integers(1, 7)))
            a_q = random_symmetric(rng, int(rng.integers(1, 7)))
            full = compose_constraint(Stage.FULL, a_img, a_q).mask
            for stage in (Stage.QUESTION_ONLY, Stage.CROSS_MODALITY):
                assert (full[compose_constraint(stage, a_img, a_q).mask > 0] == 1).all()

    def test_lift_adjacency(self):
        lifted = lift_adjacency(self.a_img)
        assert lifted.shape == (4, 4)
        assert lifted[0].all() and lifted[:, 0].all()
        assert np.array_equal(lifted[1:, 1:], self.a_img)


class TestStageSchedule:
    def test_from_split(self):
        schedule = StageSchedule.from_split((2, 2, 2))
        assert schedule.stages == (Stage.QUESTION_ONLY,) * 2 + (Stage.CROSS_MODALITY,) * 2 + (Stage.FULL,) * 2

    def test_out_of_order(self):
        with pytest.raises(ConfigError):
            StageSchedule((Stage.FULL, Stage.QUESTION_ONLY, Stage.CROSS_MODALITY))

    def test_bad_split(self):
        with pytest.raises(ConfigError):
            StageSchedule.from_split((3, 0, 3))


def stream_config(answers=5, **overrides):
    values = dict(d_model=8, heads=2, layers=3, ff_width=12, stage_split=(1, 1, 1), epsilon=1e-9,
                  answers=answers, max_positions=16)
    values.update(overrides)
    return StreamConfig(**values)


@pytest.fixture
def encoder():
    return StreamEncoder(ParameterRegistry(seed=0), 'stream', stream_config())


def test_assemble_stream_input_layout(encoder, rng):
    x, layout = assemble_stream_input(tensor(rng.normal(size=(3, 8))), tensor(rng.normal(size=(4, 8))),
                                      encoder.embeddings)
    assert x.shape == (9, 8)
    assert (layout.cls_position, layout.sep_position) == (0, 4)
    assert (layout.v, layout.q) == (4, 5)


def test_assemble_rejects_overlong_sequence(encoder, rng):
    with pytest.raises(DimensionError):
        assemble_stream_input(tensor(rng.normal(size=(10, 8))), tensor(rng.normal(size=(6, 8))),
                              encoder.embeddings)


def test_zero_output_projection_leaves_normalized_residual(rng):
    registry = ParameterRegistry(seed=0)
    layer = EncoderLayer(registry, 'layer', 8, 2, 12)
    layer.wo.data[:] = 0.0
    layer.ff_w2.data[:] = 0.0
    x = tensor(rng.normal(size=(5, 8)))
    out, _ = encoder_layer(x, np.ones((5, 5)), layer)
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    expected = centered / np.sqrt(centered.var(axis=1, keepdims=True) + 1e-5)
    expected = (expected - expected.mean(axis=1, keepdims=True)) / \
        np.sqrt(expected.var(axis=1, keepdims=True) + 1e-5)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, expected, atol=1e-9)


def stream_inputs(rng, n_img=3, n_q=4):
    a_img = np.ones((n_img, n_img)) - np.eye(n_img) + np.eye(n_img)
    a_q = np.eye(n_q)
    for child in range(1, n_q):
        a_q[0, child] = a_q[child, 0] = 1.0
    return tensor(rng.normal(size=(n_img, 8))), tensor(rng.normal(size=(n_q, 8))), a_img, a_q


def test_run_stream_is_deterministic(encoder, rng):
    img, qst, a_img, a_q = stream_inputs(rng)
    schedule = StageSchedule.from_split((1, 1, 1))
    first = run_stream('visual', encoder, img, qst, a_img, a_q, schedule)
    second = run_stream('visual', encoder, img, qst, a_img, a_q, schedule)
    assert np.array_equal(first.logits.data, second.logits.data)
    assert len(first.attention) == 3 * 2
    assert [r.stage for r in first.attention[::2]] == list(StageSchedule.from_split((1, 1, 1)).stages)


def test_cls_row_attends_everywhere(encoder, rng):
    img, qst, a_img, a_q = stream_inputs(rng)
    result = run_stream('semantic', encoder, img, qst, a_img, a_q, StageSchedule.from_split((1, 1, 1)))
    for record in result.attention:
        assert record.mask[0].all()
        assert (record.weights[0] > 0).all()


def test_recorded_attention_respects_every_composed_mask(encoder, rng):
    schedule = StageSchedule.from_split((1, 1, 1))
    for _ in range(100):
        n_img, n_q = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        a_img, a_q = random_symmetric(rng, n_img), random_symmetric(rng, n_q)
        for stage in Stage:
            g = compose_constraint(stage, lift_adjacency(a_img), lift_adjacency(a_q),
                                   special_positions=(0, n_img + 1))
            assert (g.mask.sum(axis=1) > 0).all()
        result = run_stream('semantic', encoder, tensor(rng.normal(size=(n_img, 8))),
                            tensor(rng.normal(size=(n_q, 8))), a_img, a_q, schedule)
        assert {r.stage for r in result.attention} == set(Stage)
        for record in result.attention:
            assert (record.weights[record.mask == 0] == 0).all()
            np.testing.assert_allclose(record.weights.sum(axis=1), np.ones(n_img + n_q + 2), atol=1e-9)


def test_equivariant_to_image_node_order(encoder, rng):
    n_img = 4
    img = rng.normal(size=(n_img, 8))
    a_img = (rng.uniform(size=(n_img, n_img)) < 0.5).astype(float)
    a_img = np.maximum(np.maximum(a_img, a_img.T), np.eye(n_img))
    _, qst, _, a_q = stream_inputs(rng, n_img=n_img)
    schedule = StageSchedule.from_split((1, 1, 1))
    base = run_stream('semantic', encoder, tensor(img), qst, a_img, a_q, schedule, record=False)

    perm = [2, 0, 3, 1]
    permuted = run_stream('semantic', encoder, tensor(img[perm]), qst, a_img[np.ix_(perm, perm)], a_q, schedule,
                          image_positions=[p + 1 for p in perm], record=False)
    np.testing.assert_allclose(permuted.logits.data, base.logits.data, atol=1e-10)


def test_fusion_of_identical_streams():
    registry = ParameterRegistry(seed=0)
    head = FusionHead(registry, 'fusion', 4, 3)
    pooled = tensor([[0.1, 0.2, 0.3, 0.4]])
    logits = tensor([[1.0, 2.0, 3.0]])
    outputs = fuse_and_classify(StreamResult(pooled, logits), StreamResult(pooled, logits), head)
    assert np.array_equal(outputs.f_v.data, outputs.f_s.data)

    head.w.data[:] = 0.0
    head.b.data[:] = [[0.5, -0.5, 0.0]]
    outputs = fuse_and_classify(StreamResult(pooled, logits), StreamResult(pooled, logits), head)
    assert np.array_equal(outputs.f_f.data, [[0.5, -0.5, 0.0]])


def test_total_loss_with_uniform_heads():
    uniform = tensor(np.zeros((1, 10)))
    outputs = ModelOutputs(f_v=uniform, f_s=uniform, f_f=uniform)
    assert total_loss(outputs, 4).item() == pytest.approx(3 * math.log(10))
    assert total_loss(outputs, 4, single_loss=True).item() == pytest.approx(math.log(10))


def test_predict_late_and_early_fusion():
    outputs = ModelOutputs(f_v=tensor([[5.0, 0.0, 0.0]]), f_s=tensor([[5.0, 0.0, 0.0]]),
                           f_f=tensor([[0.0, 1.0, 0.0]]))
    assert predict(outputs, 'late') == 0
    assert predict(outputs, 'early') == 1


def test_stream_gradients_match_finite_differences(rng):
    registry = ParameterRegistry(seed=1)
    encoder = StreamEncoder(registry, 'stream', stream_config(answers=3, d_model=4, ff_width=6, max_positions=8))
    img, qst = tensor(rng.normal(size=(2, 4))), tensor(rng.normal(size=(2, 4)))
    a_img, a_q = np.ones((2, 2)), np.array([[1.0, 1.0], [1.0, 1.0]])
    schedule = StageSchedule.from_split((1, 1, 1))

    def f():
        result = run_stream('visual', encoder, img, qst, a_img, a_q, schedule, record=False)
        return total_loss(ModelOutputs(f_v=result.logits), 1)

    assert finite_difference_check(f, list(registry)) < 1e-3
