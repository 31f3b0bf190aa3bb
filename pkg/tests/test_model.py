import math

import numpy as np
import pytest

from rulekge.data import Triple
from rulekge.model import (
    CheckpointError,
    Gradients,
    ModelParameters,
    activation_plan,
    backward,
    features,
    init_parameters,
    load_checkpoint,
    project_entities,
    save_checkpoint,
    score,
    score_all_heads,
    score_all_tails,
)
from rulekge.oracles import (
    finite_difference_gradients,
    gradient_relative_error,
    min_relu_preactivation,
    reference_forward,
)

from conftest import make_params


def constant_feature_params():
    # single hidden node, zero weights, bias 1, ReLU, output weight 2
    return ModelParameters(
        entity_embeddings=np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]),
        hidden_weights=[np.zeros((1, 4))],
        hidden_biases=[np.ones(1)],
        relation_outputs=np.array([[2.0]]),
        activations=("relu",),
    )


class TestScore:
    def test_zero_relation_outputs_score_zero(self):
        params = make_params(seed=1)
        params.relation_outputs[:] = 0.0
        for h, r, t in [(0, 0, 0), (1, 2, 3), (4, 1, 2)]:
            assert score(params, h, r, t) == 0.0

    def test_constant_feature_case(self):
        params = constant_feature_params()
        for h, t in [(0, 1), (2, 0), (1, 1)]:
            assert score(params, h, 0, t) == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("plan", ["relu", "sigmoid"])
    def test_matches_reference_forward(self, plan):
        rng = np.random.default_rng(99)
        checked = 0
        for seed in range(10):
            params = make_params(seed=seed, n_entities=6, n_relations=3, dim=4,
                                 widths=(7, 5), activation=plan)
            for _ in range(100):
                h, t = int(rng.integers(6)), int(rng.integers(6))
                r = int(rng.integers(3))
                assert score(params, h, r, t) == pytest.approx(
                    reference_forward(params, h, r, t), abs=1e-12
                )
                checked += 1
        assert checked == 1000

    def test_invalid_ids_rejected(self):
        params = make_params()
        with pytest.raises(ValueError):
            score(params, 99, 0, 0)
        with pytest.raises(ValueError):
            score(params, 0, 99, 0)
        with pytest.raises(ValueError):
            score(params, 0, 0, -1)

    def test_linearity_in_relation_outputs(self):
        params = make_params(seed=5)
        u = np.random.default_rng(1).normal(size=params.feature_dim)
        v = np.random.default_rng(2).normal(size=params.feature_dim)
        a, b = 1.7, -0.4
        def with_beta(beta):
            params.relation_outputs[0] = beta
            return score(params, 1, 0, 2)
        combined = with_beta(a * u + b * v)
        assert combined == pytest.approx(a * with_beta(u) + b * with_beta(v), rel=1e-10)


class TestScoreAll:
    def test_single_entity(self):
        params = make_params(n_entities=1, n_relations=1)
        vec = score_all_tails(params, 0, 0)
        assert vec.shape == (1,)
        assert vec[0] == pytest.approx(score(params, 0, 0, 0), abs=1e-12)

    @pytest.mark.parametrize("plan", ["relu", "sigmoid"])
    def test_agrees_with_looped_scores(self, plan):
        params = make_params(seed=3, n_entities=8, dim=4, widths=(6, 5), activation=plan)
        for r in range(params.num_relations):
            tails = score_all_tails(params, 2, r)
            heads = score_all_heads(params, r, 2)
            for e in range(8):
                assert abs(tails[e] - score(params, 2, r, e)) <= 1e-10
                assert abs(heads[e] - score(params, e, r, 2)) <= 1e-10

    def test_zero_outputs_zero_vector(self):
        params = make_params()
        params.relation_outputs[:] = 0.0
        assert np.all(score_all_tails(params, 0, 0) == 0.0)


class TestBackward:
    def test_loss_at_zero_score(self):
        params = make_params()
        params.relation_outputs[:] = 0.0  # every score is exactly 0
        batch = [(Triple(0, 0, 1), 1.0, 1.0)]
        loss, grads = backward(params, batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)
        # d(loss)/df = -0.5 at f = 0, so the relation row gradient is -0.5 * features
        phi = features(params, 0, 1)
        assert np.allclose(grads.relation_outputs[0], -0.5 * phi, atol=1e-12)

    def test_empty_batch_zero_gradients(self):
        params = make_params()
        loss, grads = backward(params, [])
        assert loss == 0.0
        assert grads.max_abs() == 0.0

    def test_entity_gradient_accumulates_repeats(self):
        params = make_params()
        single = [(Triple(0, 0, 0), 1.0, 1.0)]
        double = single * 2
        _, g1 = backward(params, single)
        _, g2 = backward(params, double)
        assert np.allclose(g2.entity_embeddings, 2 * g1.entity_embeddings, atol=1e-12)

    def test_label_validation(self):
        params = make_params()
        with pytest.raises(ValueError):
            backward(params, [(Triple(0, 0, 1), 2.0, 1.0)])
        with pytest.raises(ValueError):
            backward(params, [(Triple(0, 0, 1), 1.0, -1.0)])

    @pytest.mark.parametrize("plan", ["relu", "sigmoid"])
    def test_gradients_match_finite_differences(self, plan):
        accepted = 0
        for seed in range(40):
            params = make_params(seed=seed, n_entities=3, n_relations=2, dim=3,
                                 widths=(5, 4), activation=plan)
            batch = [
                (Triple(0, 0, 1), 1.0, 1.0),
                (Triple(1, 1, 2), -1.0, 0.5),
                (Triple(2, 0, 0), 1.0, 0.25),
            ]
            pairs = [(t.head, t.tail) for t, _, _ in batch]
            if min_relu_preactivation(params, pairs) < 1e-3:
                continue
            _, grads = backward(params, batch)
            fd = finite_difference_gradients(params, lambda: backward(params, batch)[0])
            assert gradient_relative_error(grads, fd) <= 1e-4
            accepted += 1
            if accepted >= 3:
                break
        assert accepted >= 3


class TestProjection:
    def test_three_four_five(self):
        params = make_params(n_entities=2, dim=2, widths=(3,))
        params.entity_embeddings[0] = [3.0, 4.0]
        project_entities(params)
        assert np.allclose(params.entity_embeddings[0], [0.6, 0.8], atol=1e-15)

    def test_idempotent_on_unit_rows(self):
        params = make_params(seed=8)
        project_entities(params)
        before = params.entity_embeddings.copy()
        project_entities(params)
        assert np.allclose(params.entity_embeddings, before, atol=1e-12)

    def test_zero_row_replaced_and_counted(self):
        params = make_params(n_entities=3, dim=3, widths=(3,))
        params.entity_embeddings[1] = 0.0
        replaced = project_entities(params)
        assert replaced == 1
        assert np.allclose(params.entity_embeddings[1], [1.0, 0.0, 0.0])

    def test_norms_unit_after_projection(self):
        params = make_params(seed=12, n_entities=20)
        params.entity_embeddings *= 13.7
        project_entities(params)
        norms = np.linalg.norm(params.entity_embeddings, axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-9)


class TestActivationPlans:
    def test_plans(self):
        assert activation_plan("relu", 3) == ("relu", "relu", "relu")
        assert activation_plan("sigmoid", 3) == ("sigmoid", "sigmoid", "relu")
        with pytest.raises(ValueError):
            activation_plan("tanh", 2)

    @pytest.mark.parametrize("plan", ["relu", "sigmoid"])
    def test_final_features_nonnegative(self, plan):
        params = make_params(seed=4, n_entities=10, activation=plan)
        for h in range(10):
            for t in range(10):
                assert np.all(features(params, h, t) >= 0.0)

    def test_parameter_count_formula(self):
        params = make_params(n_entities=7, n_relations=4, dim=5, widths=(9, 6))
        expected = 7 * 5 + (10 * 9 + 9) + (9 * 6 + 6) + 4 * 6
        assert params.parameter_count == expected


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = make_params(seed=21, activation="sigmoid")
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert back.activations == params.activations
        for (_, a), (_, b) in zip(params.arrays(), back.arrays()):
            assert a.tobytes() == b.tobytes()

    def test_save_load_save_identical_bytes(self, tmp_path):
        params = make_params(seed=2)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(params, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(make_params(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncation_names_missing_bytes(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(make_params(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-24])
        with pytest.raises(CheckpointError, match="missing 24 bytes"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(make_params(), path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(make_params(), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)


class TestGradientContainer:
    def test_zeros_like_shapes(self):
        params = make_params()
        grads = Gradients.zeros_like(params)
        for (_, g), (_, p) in zip(grads.arrays(), params.arrays()):
            assert g.shape == p.shape
            assert np.all(g == 0)

    def test_add_scaled(self):
        params = make_params()
        a = Gradients.zeros_like(params)
        b = Gradients.zeros_like(params)
        b.relation_outputs[0, 0] = 2.0
        a.add_scaled(b, 0.5)
        assert a.relation_outputs[0, 0] == 1.0
