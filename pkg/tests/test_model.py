"""Tests for the network: encoder, attention pooling, head, loss, gradients.

Gradient correctness is pinned by central finite differences on a small
(<2,000 parameter) configuration in double precision.
"""

import numpy as np
import pytest

from icoview.data import ClassWeights, class_weights
from icoview.model import (
    AttentionPool,
    EncoderConfig,
    JointHead,
    LossConfig,
    ParameterStore,
    attention_pool,
    backward,
    batch_loss,
    encoder_forward,
    evaluate_loss,
    forward_batch,
    head_forward,
    head_from_params,
    init_params,
    load_checkpoint,
    loss,
    pool_from_params,
    save_checkpoint,
)


@pytest.fixture
def tiny_setup():
    """A <100-parameter model plus a 2-sample batch for gradient tests."""
    config = EncoderConfig(in_channels=1, stage_channels=(2, 3))
    params = init_params(config, seed=0, class_count=3)
    rng = np.random.default_rng(1)
    images = rng.normal(size=(2, 2, 1, 16, 16))
    ga = np.array([30.0, 36.0])
    cls = np.array([1, 2])
    return config, params, images, ga, cls


class TestEncoderConfig:
    def test_defaults(self):
        config = EncoderConfig()
        assert config.stage_channels == (16, 32, 64, 128)
        assert config.feature_dim == 128
        assert config.internal_dropout_p == 0.0

    def test_feature_dim_tracks_last_stage(self):
        assert EncoderConfig(in_channels=1, stage_channels=(8, 16, 32)).feature_dim == 32

    def test_invalid(self):
        with pytest.raises(ValueError, match="in_channels"):
            EncoderConfig(in_channels=0)
        with pytest.raises(ValueError, match="stage"):
            EncoderConfig(stage_channels=())
        with pytest.raises(ValueError, match="dropout"):
            EncoderConfig(internal_dropout_p=1.0)


class TestInitParams:
    def test_deterministic(self):
        a = init_params(EncoderConfig(), seed=1)
        b = init_params(EncoderConfig(), seed=1)
        assert a.names == b.names
        for name in a.names:
            assert np.array_equal(a[name], b[name])

    def test_seeds_differ(self):
        a = init_params(EncoderConfig(), seed=1)
        b = init_params(EncoderConfig(), seed=2)
        assert any(not np.array_equal(a[n], b[n]) for n in a.names)

    def test_biases_zero_and_bounds(self):
        params = init_params(EncoderConfig(in_channels=4), seed=3)
        assert (params["enc0.bias"] == 0).all()
        assert (params["head.bias"] == 0).all()
        assert float(params["pool.bias"]) == 0.0
        assert np.abs(params["enc0.weight"]).max() <= 1.0 / np.sqrt(4 * 9)
        assert np.abs(params["head.weight"]).max() <= 1.0 / np.sqrt(128)

    def test_gradient_slots_match(self):
        params = init_params(EncoderConfig(in_channels=1, stage_channels=(2,)), seed=0, class_count=2)
        for name in params.names:
            assert params.grad(name).shape == params[name].shape
            assert (params.grad(name) == 0).all()


class TestEncoderForward:
    def test_full_scale_shapes(self):
        config = EncoderConfig(in_channels=4)
        params = init_params(config, seed=0)
        feats = encoder_forward(np.zeros((12, 4, 224, 224)), config, params)
        assert feats.shape == (12, 128)

    def test_zero_network_zero_features(self):
        config = EncoderConfig(in_channels=2, stage_channels=(3, 4))
        params = ParameterStore(
            {name: np.zeros_like(init_params(config, 0, 2)[name]) for name in init_params(config, 0, 2).names}
        )
        rng = np.random.default_rng(0)
        feats = encoder_forward(rng.normal(size=(3, 2, 16, 16)), config, params)
        assert (feats == 0).all()

    def test_identical_views_identical_rows(self):
        config = EncoderConfig(in_channels=1, stage_channels=(4, 8))
        params = init_params(config, seed=5, class_count=2)
        view = np.random.default_rng(2).normal(size=(1, 16, 16))
        feats = encoder_forward(np.stack([view, view, view]), config, params)
        assert np.array_equal(feats[0], feats[1])
        assert np.array_equal(feats[0], feats[2])

    def test_view_independence(self):
        config = EncoderConfig(in_channels=1, stage_channels=(4,))
        params = init_params(config, seed=5, class_count=2)
        rng = np.random.default_rng(3)
        stack = rng.normal(size=(4, 1, 16, 16))
        base = encoder_forward(stack, config, params)
        zeroed = stack.copy()
        zeroed[2] = 0.0
        other = encoder_forward(zeroed, config, params)
        assert np.array_equal(base[0], other[0])
        assert np.array_equal(base[3], other[3])
        assert not np.array_equal(base[2], other[2])

    def test_channel_mismatch(self):
        config = EncoderConfig(in_channels=4)
        params = init_params(config, seed=0)
        with pytest.raises(ValueError, match="channels"):
            encoder_forward(np.zeros((2, 3, 16, 16)), config, params)

    def test_small_images_rejected(self):
        config = EncoderConfig(in_channels=1)
        params = init_params(config, seed=0)
        with pytest.raises(ValueError, match="16"):
            encoder_forward(np.zeros((2, 1, 8, 8)), config, params)


class TestAttentionPool:
    def test_equal_rows(self):
        f = np.array([1.0, -2.0, 0.5])
        feats = np.tile(f, (6, 1))
        pooled, weights = attention_pool(feats, AttentionPool(np.array([0.3, 0.1, -0.2]), 0.7))
        assert np.abs(weights - 1.0 / 6.0).max() <= 1e-12
        assert np.abs(pooled - f).max() <= 1e-12

    def test_forced_scores(self):
        # u = (0, ln3/4), b = 0 gives scores (0, ln 3) = (ln 1, ln 3)
        feats = np.array([[4.0, 0.0], [0.0, 4.0]])
        pool = AttentionPool(np.array([0.0, np.log(3.0) / 4.0]), 0.0)
        pooled, weights = attention_pool(feats, pool)
        assert np.abs(weights - [0.25, 0.75]).max() <= 1e-12
        assert np.abs(pooled - [1.0, 3.0]).max() <= 1e-12

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            feats = rng.normal(size=(12, 8))
            u = rng.normal(size=8)
            b = float(rng.normal())
            pooled, weights = attention_pool(feats, AttentionPool(u, b))
            # independent straightforward reimplementation
            scores = np.array([float(np.dot(u, row)) + b for row in feats])
            exp = np.exp(scores - scores.max())
            ref_w = exp / exp.sum()
            ref_p = sum(wv * row for wv, row in zip(ref_w, feats))
            assert np.abs(weights - ref_w).max() <= 1e-10
            assert np.abs(pooled - ref_p).max() <= 1e-10
            assert abs(weights.sum() - 1.0) <= 1e-6
            assert (weights >= 0).all()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(7, 5))
        pool = AttentionPool(rng.normal(size=5), 0.1)
        perm = rng.permutation(7)
        pooled, weights = attention_pool(feats, pool)
        pooled_p, weights_p = attention_pool(feats[perm], pool)
        assert np.abs(weights_p - weights[perm]).max() <= 1e-6
        assert np.abs(pooled_p - pooled).max() <= 1e-6

    def test_score_shift_invariance(self):
        rng = np.random.default_rng(5)
        feats = rng.normal(size=(9, 6))
        u = rng.normal(size=6)
        _, w0 = attention_pool(feats, AttentionPool(u, 0.0))
        _, w1 = attention_pool(feats, AttentionPool(u, 123.456))
        assert np.abs(w0 - w1).max() <= 1e-7

    def test_extreme_scores_stable(self):
        feats = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        pooled, weights = attention_pool(feats, AttentionPool(np.array([1.0, 0.0]), 0.0))
        assert np.isfinite(pooled).all()
        assert abs(weights.sum() - 1.0) <= 1e-6


class TestHeadForward:
    def test_bias_only(self):
        head = JointHead(np.zeros((6, 8)), np.array([35.0, 0, 0, 0, 0, 0]))
        ga, logits = head_forward(np.ones(8), head)
        assert ga == 35.0
        assert (logits == 0).all()

    def test_basis_vector(self):
        weight = np.zeros((6, 8))
        weight[0, 0] = 2.5
        head = JointHead(weight, np.full(6, 0.5))
        e0 = np.zeros(8)
        e0[0] = 1.0
        ga, _ = head_forward(e0, head)
        assert ga == pytest.approx(0.5 + 2.5, abs=1e-15)

    def test_random_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            weight = rng.normal(size=(6, 8))
            bias = rng.normal(size=6)
            pooled = rng.normal(size=8)
            ga, logits = head_forward(pooled, JointHead(weight, bias))
            ref = np.array([float(np.dot(row, pooled)) for row in weight]) + bias
            assert abs(ga - ref[0]) <= 1e-10
            assert np.abs(logits - ref[1:]).max() <= 1e-10

    def test_shape_mismatch(self):
        head = JointHead(np.zeros((6, 8)), np.zeros(6))
        with pytest.raises(ValueError, match="pooled"):
            head_forward(np.ones(5), head)


class TestLoss:
    def test_both_terms_vanish(self):
        logits = np.zeros(5)
        logits[2] = 30.0
        assert loss(30.0, logits, 30.0, 2, LossConfig()) < 1e-10

    def test_uniform_logits(self):
        value = loss(30.0, np.zeros(5), 32.0, 1, LossConfig(ce_lambda=1.0))
        assert abs(value - (4.0 + np.log(5.0))) <= 1e-9

    def test_lambda_zero(self):
        assert loss(30.0, np.zeros(5), 32.0, 1, LossConfig(ce_lambda=0.0)) == 4.0

    def test_class_weight_scales_ce(self):
        cw = class_weights([5, 10, 10, 10, 15])
        weighted = loss(32.0, np.zeros(5), 32.0, 0, LossConfig(ce_lambda=1.0, class_weights=cw))
        assert abs(weighted - (30.0 / 17.0) * np.log(5.0)) <= 1e-9

    def test_non_negative(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            value = loss(
                float(rng.normal(33, 5)),
                rng.normal(size=5),
                float(rng.uniform(23, 44)),
                int(rng.integers(5)),
                LossConfig(ce_lambda=float(rng.uniform(0, 2))),
            )
            assert value >= 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="class_label"):
            loss(30.0, np.zeros(5), 30.0, 5, LossConfig())


class TestBackward:
    def test_finite_differences(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        cfg = LossConfig(ce_lambda=1.0)
        assert params.total_parameters <= 2000
        backward(images, ga, cls, config, params, cfg, mode="train")
        coords = [(name, idx) for name in params.names for idx in np.ndindex(params[name].shape)]
        rng = np.random.default_rng(0)
        step = 1e-4
        for pick in rng.choice(len(coords), size=25, replace=False):
            name, idx = coords[pick]
            p = params[name]
            orig = p[idx]
            p[idx] = orig + step
            up = evaluate_loss(images, ga, cls, config, params, cfg, mode="train")
            p[idx] = orig - step
            down = evaluate_loss(images, ga, cls, config, params, cfg, mode="train")
            p[idx] = orig
            fd = (up - down) / (2.0 * step)
            an = float(params.grad(name)[idx])
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-5

    def test_lambda_zero_logit_grads_exactly_zero(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        backward(images, ga, cls, config, params, LossConfig(ce_lambda=0.0), mode="train")
        assert (params.grad("head.weight")[1:] == 0).all()
        assert (params.grad("head.bias")[1:] == 0).all()

    def test_duplicate_sample_linearity(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        cfg = LossConfig(ce_lambda=1.0)
        x, z = images[0], images[1]

        def grads_of(batch, gas, clss):
            backward(np.stack(batch), np.array(gas), np.array(clss), config, params, cfg, mode="train")
            return {n: params.grad(n).copy() for n in params.names}

        gx = grads_of([x], [ga[0]], [cls[0]])
        gz = grads_of([z], [ga[1]], [cls[1]])
        gdup = grads_of([x, x, z], [ga[0], ga[0], ga[1]], [cls[0], cls[0], cls[1]])
        for name in params.names:
            expected = (2.0 * gx[name] + gz[name]) / 3.0
            assert np.abs(gdup[name] - expected).max() <= 1e-12

    def test_loss_value_matches_eval(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        cfg = LossConfig(ce_lambda=1.0)
        value, _ = backward(images, ga, cls, config, params, cfg, mode="train")
        assert value == pytest.approx(evaluate_loss(images, ga, cls, config, params, cfg, mode="train"), abs=1e-12)

    def test_every_slot_filled(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        backward(images, ga, cls, config, params, LossConfig(), mode="train")
        assert any(np.abs(params.grad(n)).max() > 0 for n in params.names)
        assert np.abs(params.grad("pool.weight")).max() > 0


class TestForwardBatch:
    def test_matches_composed_ops(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        result = forward_batch(images, config, params)
        for b in range(images.shape[0]):
            feats = encoder_forward(images[b], config, params)
            pooled, weights = attention_pool(feats, pool_from_params(params))
            ga_pred, logits = head_forward(pooled, head_from_params(params))
            assert abs(result.ga_pred[b] - ga_pred) <= 1e-12
            assert np.abs(result.logits[b] - logits).max() <= 1e-12
            assert np.abs(result.attention[b] - weights).max() <= 1e-12

    def test_eval_deterministic(self, tiny_setup):
        config, params, images, _, _ = tiny_setup
        a = forward_batch(images, config, params)
        b = forward_batch(images, config, params)
        assert np.array_equal(a.ga_pred, b.ga_pred)
        assert np.array_equal(a.logits, b.logits)

    def test_batch_loss_is_mean_of_samples(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        cfg = LossConfig(ce_lambda=0.7)
        result = forward_batch(images, config, params)
        total = batch_loss(result, ga, cls, cfg)
        singles = [
            loss(result.ga_pred[b], result.logits[b], ga[b], int(cls[b]), cfg) for b in range(len(ga))
        ]
        assert total == pytest.approx(np.mean(singles), abs=1e-12)

    def test_internal_dropout_train_vs_eval(self):
        config = EncoderConfig(in_channels=1, stage_channels=(4, 8), internal_dropout_p=0.5)
        params = init_params(config, seed=0, class_count=2)
        images = np.random.default_rng(1).normal(size=(1, 2, 1, 16, 16))
        ev = forward_batch(images, config, params, mode="eval")
        tr = forward_batch(images, config, params, mode="train", rng=np.random.default_rng(2))
        assert not np.array_equal(ev.ga_pred, tr.ga_pred)
        with pytest.raises(ValueError, match="rng"):
            forward_batch(images, config, params, mode="train")


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, tiny_setup):
        _, params, _, _, _ = tiny_setup
        first = tmp_path / "a.bin"
        second = tmp_path / "b.bin"
        save_checkpoint(first, params, {"epoch": 7, "val_mse": 2.5, "seed": 1})
        loaded, meta = load_checkpoint(first)
        assert meta["epoch"] == 7
        assert meta["val_mse"] == 2.5
        assert meta["format_version"] == 1
        assert loaded.names == params.names
        save_checkpoint(second, loaded, meta)
        assert first.read_bytes() == second.read_bytes()

    def test_values_survive_float32(self, tmp_path, tiny_setup):
        _, params, _, _, _ = tiny_setup
        path = tmp_path / "c.bin"
        save_checkpoint(path, params, {})
        loaded, _ = load_checkpoint(path)
        for name in params.names:
            assert np.array_equal(loaded[name], params[name].astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"WRNG" + b"\0" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, tiny_setup):
        _, params, _, _, _ = tiny_setup
        path = tmp_path / "t.bin"
        save_checkpoint(path, params, {})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, tiny_setup):
        _, params, _, _, _ = tiny_setup
        path = tmp_path / "g.bin"
        save_checkpoint(path, params, {})
        path.write_bytes(path.read_bytes() + b"\0\0")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)


class TestParameterStore:
    def test_zero_grads(self, tiny_setup):
        config, params, images, ga, cls = tiny_setup
        backward(images, ga, cls, config, params, LossConfig(), mode="train")
        params.zero_grads()
        assert all((params.grad(n) == 0).all() for n in params.names)

    def test_set_grad_shape_check(self, tiny_setup):
        _, params, _, _, _ = tiny_setup
        with pytest.raises(ValueError, match="shape"):
            params.set_grad("head.bias", np.zeros(3))

    def test_state_hash_detects_mutation(self, tiny_setup):
        _, params, _, _, _ = tiny_setup
        before = params.state_hash()
        assert params.state_hash() == before
        params["head.bias"][0] += 1.0
        assert params.state_hash() != before

    def test_clone_is_independent(self, tiny_setup):
        _, params, _, _, _ = tiny_setup
        twin = params.clone()
        twin["head.bias"][0] += 5.0
        assert params["head.bias"][0] != twin["head.bias"][0]
