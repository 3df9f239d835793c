import dataclasses
import math

import numpy as np
import pytest

from gatcascade import autodiff as ad
from gatcascade.autodiff import Tensor
from gatcascade.errors import ConfigError, NumericError
from gatcascade.geometry import HeadPose, init_shape
from gatcascade.nn import param_list
from gatcascade.regressor import (
    CascadeConfig,
    bounded_displacement,
    cascade_forward,
    gat_layer,
    init_cascade,
    init_gat_layer,
    run_cascade,
    shared_attention_mode,
    step_forward,
)

from gradcases import cascade_gradient_error, tiny_config


def assert_row_stochastic(A):
    A = np.asarray(A)
    L = A.shape[-1]
    assert np.all(np.abs(A.sum(axis=-1) - 1) <= 1e-9)
    assert np.all(A[..., np.arange(L), np.arange(L)] == 0)
    assert A.min() >= 0 and A.max() <= 1


def zero_decoders(params):
    for step in params:
        step["decoder"]["w2"].data[...] = 0
        step["decoder"]["b2"].data[...] = 0


class TestGatLayer:
    def test_zero_update_is_identity(self, rng):
        p = init_gat_layer(rng, 6)
        p["update"]["w2"].data[...] = 0
        f = rng.normal(size=(4, 6))
        out, _ = gat_layer(f, p)
        np.testing.assert_array_equal(out.data, f)

    def test_two_nodes(self, rng):
        p = init_gat_layer(rng, 6)
        _, A = gat_layer(rng.normal(size=(2, 6)) * 10, p)
        np.testing.assert_array_equal(A.data, [[0, 1], [1, 0]])

    def test_orthogonal_one_hot_gives_uniform(self, rng):
        L = 5
        p = init_gat_layer(rng, L)
        p["wq"].data[...] = np.eye(L)
        p["wk"].data[...] = np.eye(L)
        _, A = gat_layer(np.eye(L), p)
        expect = (np.ones((L, L)) - np.eye(L)) / (L - 1)
        np.testing.assert_allclose(A.data, expect, atol=1e-15)

    def test_attention_invariants(self, rng):
        for _ in range(20):
            p = init_gat_layer(rng, 8)
            _, A = gat_layer(rng.normal(size=(3, 7, 8)) * rng.uniform(0.1, 30), p)
            assert_row_stochastic(A.data)

    def test_message_is_weighted_value_average(self, rng):
        p = init_gat_layer(rng, 4)
        f = rng.normal(size=(5, 4))
        out, A = gat_layer(f, p)
        hv = f @ p["wv"].data + p["bv"].data
        m = A.data @ hv
        u = p["update"]
        h = np.maximum(np.concatenate([f, m], axis=1) @ u["w1"].data + u["b1"].data, 0)
        np.testing.assert_allclose(out.data, f + h @ u["w2"].data + u["b2"].data, atol=1e-12)

    def test_non_finite_names_layer(self, rng):
        p = init_gat_layer(rng, 4)
        f = rng.normal(size=(3, 4))
        f[1, 2] = np.inf
        with pytest.raises(NumericError, match="layer-x"):
            gat_layer(f, p, name="layer-x")


class TestBoundedDisplacement:
    def test_closed_form(self):
        assert bounded_displacement(np.array([1.0]), 8.0).data[0] == pytest.approx(2.0, abs=1e-15)

    def test_asymptotes(self):
        d = bounded_displacement(np.array([1e6, -1e6]), 8.0).data
        assert 4 - 1e-5 < d[0] < 4 and -4 < d[1] < -4 + 1e-5

    @pytest.mark.parametrize("w", [16.0, 8.0, 4.0, 14.0 / 3])
    def test_strict_where_arctan_saturates(self, w):
        d = bounded_displacement(np.array([1e16, -1e300, np.inf, -np.inf]), w).data
        assert np.all(np.abs(d) < w / 2)


class TestStep:
    def test_zero_decoder_gives_zero_delta(self, rng, tiny_cfg):
        params = init_cascade(tiny_cfg, 3)
        zero_decoders(params)
        dx, _ = step_forward(rng.normal(size=(4, 16, 16)), rng.uniform(4, 12, (5, 2)), params[0], 4.0, tiny_cfg)
        assert np.all(dx.data == 0)

    def test_attention_count(self, rng, tiny_cfg):
        params = init_cascade(tiny_cfg, 0)
        _, atts = step_forward(rng.normal(size=(4, 16, 16)), rng.uniform(4, 12, (5, 2)), params[0], 4.0, tiny_cfg)
        assert len(atts) == tiny_cfg.gat_layers
        for A in atts:
            assert_row_stochastic(A.data)


class TestCascade:
    def test_zero_decoders_keep_init(self, rng, tiny_cfg):
        params = init_cascade(tiny_cfg, 1)
        zero_decoders(params)
        x0 = rng.uniform(4, 12, (5, 2))
        out = run_cascade(params, tiny_cfg, rng.normal(size=(4, 16, 16)), x0)
        np.testing.assert_array_equal(out.shapes[-1].data, x0)

    def test_total_bound_default_schedule(self, rng):
        cfg = tiny_config(windows=(16.0, 8.0, 4.0), image_side=64, feature_side=64)
        for seed in range(10):
            params = init_cascade(cfg, seed)
            for step in params:
                step["decoder"]["w2"].data *= 1e3  # push arctan towards saturation
            x0 = rng.uniform(10, 54, (2, 5, 2))
            out = run_cascade(params, cfg, rng.normal(size=(2, 4, 64, 64)), x0)
            assert np.abs(out.shapes[-1].data - x0).max() <= 14
            for dx, w in zip(out.deltas, cfg.windows):
                assert np.abs(dx.data).max() < w / 2

    def test_frames(self, rng):
        """Deltas are in feature pixels; shapes are returned in image pixels."""
        cfg = tiny_config(image_side=64, feature_side=16)
        params = init_cascade(cfg, 0)
        x0 = rng.uniform(16, 48, (5, 2))
        out = run_cascade(params, cfg, rng.normal(size=(4, 16, 16)), x0)
        np.testing.assert_allclose(out.shapes[1].data - x0, 4 * out.deltas[0].data, atol=1e-12)

    def test_cascade_forward_starts_from_projection(self, face, cam):
        cfg = tiny_config(num_landmarks=68, image_side=256, feature_side=64)
        params = init_cascade(cfg, 0)
        pose = HeadPose(0.1, -0.05, 0.02, 0, 0, 4.0)
        out = cascade_forward(np.zeros((4, 64, 64)), pose, face, cam, params, cfg)
        np.testing.assert_array_equal(out.shapes[0].data, init_shape(face, pose, cam))
        assert len(out.shapes) == cfg.steps + 1

    def test_step_count_mismatch(self, tiny_cfg):
        with pytest.raises(ConfigError):
            run_cascade(init_cascade(tiny_cfg)[:1], tiny_cfg, np.zeros((4, 16, 16)), np.zeros((5, 2)))

    def test_deterministic_init(self, tiny_cfg):
        a = [t.data for t in param_list(init_cascade(tiny_cfg, 7))]
        b = [t.data for t in param_list(init_cascade(tiny_cfg, 7))]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_permutation_equivariance(self, rng):
        # without positional encoding every layer is symmetric in the landmark index
        cfg = tiny_config(posenc="none", num_landmarks=6)
        params = init_cascade(cfg, 2)
        F = rng.normal(size=(4, 16, 16))
        x0 = rng.uniform(4, 12, (6, 2))
        perm = rng.permutation(6)
        a = run_cascade(params, cfg, F, x0)
        b = run_cascade(params, cfg, F, x0[perm])
        np.testing.assert_allclose(b.shapes[-1].data, a.shapes[-1].data[perm], atol=1e-12)
        np.testing.assert_allclose(b.attentions[0][1].data, a.attentions[0][1].data[np.ix_(perm, perm)], atol=1e-12)

    def test_permutation_equivariance_with_slot_tied_encoder(self, rng):
        # an encoder whose first layer treats every displacement slot alike is index-symmetric too
        cfg = tiny_config(num_landmarks=6)
        params = init_cascade(cfg, 4)
        for step in params:
            w1 = step["posenc"]["w1"].data
            w1[...] = np.tile(w1[:2], (5, 1))
        F = rng.normal(size=(4, 16, 16))
        x0 = rng.uniform(4, 12, (6, 2))
        perm = rng.permutation(6)
        a = run_cascade(params, cfg, F, x0)
        b = run_cascade(params, cfg, F, x0[perm])
        np.testing.assert_allclose(b.shapes[-1].data, a.shapes[-1].data[perm], atol=1e-12)

    def test_config_round_trip(self):
        cfg = tiny_config(posenc="stack", attention="gcn")
        assert CascadeConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            CascadeConfig.from_dict({**cfg.to_dict(), "heads": 2})

    @pytest.mark.parametrize("kw", [dict(posenc="sum"), dict(attention="gin"), dict(num_landmarks=1), dict(dim=0)])
    def test_config_rejects(self, kw):
        with pytest.raises(ConfigError):
            tiny_config(**kw)

    def test_gradients_small_config(self):
        for seed in range(10):
            assert cascade_gradient_error(seed, samples=2) < 1e-4

    @pytest.mark.parametrize("posenc", ["stack", "none"])
    def test_gradients_other_encodings(self, posenc):
        for seed in range(3):
            assert cascade_gradient_error(seed, tiny_config(posenc=posenc), samples=2) < 1e-4

    def test_gradients_shared_attention(self):
        for seed in range(3):
            assert cascade_gradient_error(seed, tiny_config(attention="gcn"), samples=2) < 1e-4


class TestSharedAttention:
    def test_variant_flag(self, tiny_cfg):
        assert shared_attention_mode(tiny_cfg).attention == "gcn"

    def test_single_layer_identical(self, rng):
        gat = tiny_config(gat_layers=1)
        gcn = shared_attention_mode(gat)
        F, x0 = rng.normal(size=(4, 16, 16)), rng.uniform(4, 12, (5, 2))
        a = run_cascade(init_cascade(gat, 5), gat, F, x0)
        b = run_cascade(init_cascade(gcn, 5), gcn, F, x0)
        np.testing.assert_array_equal(a.shapes[-1].data, b.shapes[-1].data)

    def test_layers_share_one_matrix(self, rng):
        cfg = tiny_config(attention="gcn", gat_layers=3)
        out = run_cascade(init_cascade(cfg, 0), cfg, rng.normal(size=(4, 16, 16)), rng.uniform(4, 12, (5, 2)))
        for step in out.attentions:
            assert len(step) == 3 and all(A is step[0] for A in step)

    def test_later_layers_have_no_query_key(self):
        cfg = tiny_config(attention="gcn")
        step = init_cascade(cfg)[0]
        assert "wq" in step["gat"][0] and "wq" not in step["gat"][1]

    def test_differs_from_per_layer_attention(self, rng):
        cfg = tiny_config()
        params = init_cascade(cfg, 6)
        shared_params = init_cascade(cfg, 6)
        for step in shared_params:
            for layer in step["gat"][1:]:
                for k in ("wq", "bq", "wk", "bk"):
                    del layer[k]
        F, x0 = rng.normal(size=(4, 16, 16)), rng.uniform(4, 12, (5, 2))
        a = run_cascade(params, cfg, F, x0)
        b = run_cascade(shared_params, shared_attention_mode(cfg), F, x0)
        np.testing.assert_array_equal(a.attentions[0][0].data, b.attentions[0][0].data)
        assert not np.allclose(a.attentions[0][1].data, b.attentions[0][1].data)
        assert not np.allclose(a.shapes[-1].data, b.shapes[-1].data)
