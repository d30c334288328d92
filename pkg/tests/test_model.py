import numpy as np
import pytest

from eegct import tensor as T
from eegct.model import ConvTransformer, ModelConfig, ParameterStore, count_flops
from eegct.tensor import ShapeError, Tensor

THU_EP_STEPS = [
    (30, 1750), (120, 1736), (120, 1722), (120, 430), (120, 430), (120, 430),
    (120, 430), (120, 430), (120, 86), (120, 86), (86, 120), (1, 120),
    (87, 120), (87, 120), (87, 120), (87, 120), (87, 120), (87, 120),
    (87, 120), (120,), (9,),
]
DEAP_STEPS = [
    (28, 1536), (112, 1522), (112, 1508), (112, 377), (112, 377), (112, 377),
    (112, 377), (112, 377), (112, 75), (112, 75), (75, 112), (1, 112),
    (76, 112), (76, 112), (76, 112), (76, 112), (76, 112), (76, 112),
    (76, 112), (112,), (2,),
]


def mini_config(**overrides):
    base = dict(n_channels=4, input_len=128, n_classes=3, channel_multiplier=2,
                n_encoder_layers=1, n_heads=2, head_dim=8, mlp_dim=16,
                sk_kernel_sizes=(1, 3), sk_reduction=2, sk_min_dim=4, dropout_p=0.0)
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_thu_ep_derived_dims(self):
        cfg = ModelConfig.thu_ep()
        assert cfg.feature_channels == 120
        assert cfg.seq_len == 86
        assert cfg.sk_mix_dim == max(120 // 4, 32) == 32

    def test_deap_derived_dims(self):
        cfg = ModelConfig.deap()
        assert cfg.feature_channels == 112
        assert cfg.seq_len == 75

    def test_even_sk_kernel_rejected(self):
        with pytest.raises(ShapeError):
            mini_config(sk_kernel_sizes=(1, 4))

    def test_roundtrip_dict(self):
        cfg = mini_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterStore:
    def test_unique_names(self):
        store = ParameterStore()
        store.register("a", Tensor([1.0]))
        with pytest.raises(ValueError):
            store.register("a", Tensor([2.0]))

    def test_registration_forces_requires_grad_and_order(self):
        store = ParameterStore()
        for name in ("z", "a", "m"):
            store.register(name, Tensor([0.0]))
        assert store.names() == ["z", "a", "m"]
        assert all(t.requires_grad for t in store.tensors())


class TestShapeConformance:
    def test_thu_ep_step_sequence(self):
        model = ConvTransformer(ModelConfig.thu_ep(), seed=0)
        x = np.random.default_rng(0).standard_normal((1, 30, 1750))
        with T.no_grad():
            logits, tr = model.forward(x, trace=True)
        assert [s[2] for s in tr.step_shapes] == THU_EP_STEPS
        assert [s[0] for s in tr.step_shapes] == list(range(1, 22))
        assert logits.shape == (1, 9)

    def test_deap_step_sequence(self):
        model = ConvTransformer(ModelConfig.deap(), seed=0)
        x = np.random.default_rng(1).standard_normal((1, 28, 1536))
        with T.no_grad():
            logits, tr = model.forward(x, trace=True)
        assert [s[2] for s in tr.step_shapes] == DEAP_STEPS
        assert logits.shape == (1, 2)

    def test_input_mismatch_rejected(self):
        model = ConvTransformer(mini_config(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 4, 100)))


class TestDepthBlock:
    def test_zero_weights_zero_input_gives_zero(self):
        model = ConvTransformer(mini_config(), seed=0)
        model.depth1.w.data[:] = 0.0
        model.depth2.w.data[:] = 0.0
        model.depth_bn.beta.data[:] = 0.0
        x = Tensor(np.zeros((1, 4, 128)))
        with T.no_grad():
            h = model.depth1(x)
            h = model.depth2(h)
            h = T.relu(model.depth_bn(h, training=False))
        np.testing.assert_array_equal(h.data, 0.0)


class TestSelectiveKernel:
    def test_mix_dim_from_named_constants(self):
        assert ModelConfig.thu_ep().sk_mix_dim == 32  # max(120/4, 32)

    def test_identical_streams_equal_select_weights_give_half(self):
        cfg = mini_config(sk_kernel_sizes=(3, 3))
        model = ConvTransformer(cfg, seed=0)
        (c1, b1), (c2, b2) = model.sk.branches
        c2.w.data = c1.w.data.copy()
        w = model.sk.select_w
        w[1].data = w[0].data.copy()
        x = np.random.default_rng(2).standard_normal((2, 4, 128))
        with T.no_grad():
            _, tr = model.forward(x, trace=True)
        np.testing.assert_allclose(tr.sk_weights, 0.5, atol=1e-12)

    def test_stream_weights_sum_to_one(self):
        model = ConvTransformer(mini_config(), seed=1)
        x = np.random.default_rng(3).standard_normal((3, 4, 128))
        with T.no_grad():
            _, tr = model.forward(x, trace=True)
        assert np.all(tr.sk_weights >= 0)
        np.testing.assert_allclose(tr.sk_weights.sum(axis=1), 1.0, atol=1e-9)

    def test_dominant_branch_weight_monotone(self):
        # Align the select weights (e1 = +mean, e2 = -mean) so the gate's
        # monotone response to a dominating branch is observable directly.
        from eegct.model import ForwardTrace
        cfg = mini_config(sk_reduction=1, sk_min_dim=1)
        model = ConvTransformer(cfg, seed=0)
        k2 = cfg.feature_channels
        assert cfg.sk_mix_dim == k2
        model.sk.fuse_w.data = np.eye(k2)
        model.sk.select_w[0].data = np.eye(k2)
        model.sk.select_w[1].data = -np.eye(k2)
        for conv, _bn in model.sk.branches:
            conv.w.data = np.abs(conv.w.data) + 0.1
        x = np.abs(np.random.default_rng(4).standard_normal((1, k2, 23))) + 0.1
        gamma = model.sk.branches[0][1].gamma
        weights = []
        for scale in (0.5, 1.0, 2.0, 4.0, 8.0):
            gamma.data = np.full(k2, scale)
            tr = ForwardTrace()
            with T.no_grad():
                model.sk(Tensor(x), False, tr)
            weights.append(tr.sk_weights[0, 0].mean())
        assert all(b > a for a, b in zip(weights, weights[1:]))
        assert weights[-1] > 0.95


class TestAttention:
    def test_rows_sum_to_one(self):
        model = ConvTransformer(mini_config(), seed=2)
        x = np.random.default_rng(5).standard_normal((2, 4, 128))
        with T.no_grad():
            _, tr = model.forward(x, trace=True)
        for maps in tr.attention:
            np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_value_projection_annihilates(self):
        model = ConvTransformer(mini_config(), seed=3)
        layer = model.encoder[0]
        layer.wv.data[:] = 0.0
        x = Tensor(np.random.default_rng(6).standard_normal((2, 5, 8)))
        with T.no_grad():
            out = layer.attend(x, None)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_head_hand_oracle(self):
        cfg = mini_config(n_heads=1, head_dim=2)
        model = ConvTransformer(cfg, seed=4)
        layer = model.encoder[0]
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 3, 8))
        with T.no_grad():
            got = layer.attend(Tensor(x), None).data

        # step-by-step reference computation
        q = x @ layer.wq.data
        k = x @ layer.wk.data
        v = x @ layer.wv.data
        scores = q[0] @ k[0].T / np.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        want = (attn @ v[0]) @ layer.wo.data
        assert np.max(np.abs(got[0] - want)) <= 1e-10

    def test_multi_head_matches_per_head_oracle(self):
        cfg = mini_config(n_heads=2, head_dim=4)
        model = ConvTransformer(cfg, seed=5)
        layer = model.encoder[0]
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 5, 8))
        with T.no_grad():
            got = layer.attend(Tensor(x), None).data

        heads = []
        for h in range(2):
            sl = slice(h * 4, (h + 1) * 4)
            q = x[0] @ layer.wq.data[:, sl]
            k = x[0] @ layer.wk.data[:, sl]
            v = x[0] @ layer.wv.data[:, sl]
            scores = q @ k.T / 2.0
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            heads.append((e / e.sum(axis=-1, keepdims=True)) @ v)
        want = np.concatenate(heads, axis=-1) @ layer.wo.data
        assert np.max(np.abs(got[0] - want)) <= 1e-10


class TestEncoderLayer:
    def test_zero_output_projections_make_identity(self):
        model = ConvTransformer(mini_config(), seed=6)
        layer = model.encoder[0]
        layer.wo.data[:] = 0.0
        layer.w2.data[:] = 0.0
        layer.b2.data[:] = 0.0
        x = np.random.default_rng(9).standard_normal((2, 5, 8))
        with T.no_grad():
            out = layer(Tensor(x), None)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_shape_preserved_through_stack(self):
        model = ConvTransformer(mini_config(n_encoder_layers=3), seed=7)
        x = Tensor(np.random.default_rng(10).standard_normal((2, 6, 8)))
        with T.no_grad():
            h = x
            for layer in model.encoder:
                h = layer(h, None)
                assert h.shape == (2, 6, 8)


class TestForward:
    def test_eval_deterministic_for_identical_inputs(self):
        model = ConvTransformer(mini_config(dropout_p=0.5), seed=8)
        x0 = np.random.default_rng(11).standard_normal((4, 128))
        batch = np.stack([x0, x0])
        with T.no_grad():
            logits, _ = model.forward(batch, training=False)
        np.testing.assert_array_equal(logits.data[0], logits.data[1])

    def test_eval_batch_independence(self):
        model = ConvTransformer(mini_config(), seed=9)
        rng = np.random.default_rng(12)
        x0, x1, x2 = (rng.standard_normal((4, 128)) for _ in range(3))
        with T.no_grad():
            a, _ = model.forward(np.stack([x0, x1]))
            b, _ = model.forward(np.stack([x0, x2]))
        np.testing.assert_array_equal(a.data[0], b.data[0])

    def test_trace_completeness(self):
        cfg = ModelConfig.thu_ep()
        model = ConvTransformer(cfg, seed=10)
        x = np.random.default_rng(13).standard_normal((1, 30, 1750))
        with T.no_grad():
            _, tr = model.forward(x, trace=True)
        assert len(tr.attention) == 6
        assert tr.sk_weights.shape == (1, 4, 120)
        assert tr.post_conv.shape == (1, 120, 86)
        assert tr.token_embedding.shape == (1, 120)

    def test_same_seed_same_parameters(self):
        a = ConvTransformer(mini_config(), seed=11)
        b = ConvTransformer(mini_config(), seed=11)
        for name in a.params.names():
            assert np.array_equal(a.params[name].data, b.params[name].data)


class TestAblations:
    @pytest.mark.parametrize("toggles", [
        {"use_depth_block": False},
        {"n_sconv_blocks": 0},
        {"use_sk_attention": False},
        {"use_transformer": False},
        {"use_depth_block": False, "n_sconv_blocks": 0, "use_sk_attention": False},
    ])
    def test_ablated_models_run(self, toggles):
        cfg = mini_config(**toggles)
        model = ConvTransformer(cfg, seed=12)
        x = np.random.default_rng(14).standard_normal((2, 4, 128))
        with T.no_grad():
            logits, _ = model.forward(x)
        assert logits.shape == (2, 3)

    def test_depth_ablation_keeps_raw_channel_count(self):
        cfg = mini_config(use_depth_block=False)
        assert cfg.feature_channels == 4
        assert cfg.embed_dim == 4


class TestEndToEndGradients:
    def test_miniature_model_grad_check(self):
        model = ConvTransformer(mini_config(), seed=13)
        x = np.random.default_rng(15).standard_normal((2, 4, 128)) * 0.5

        def f(t):
            logits, _ = model.forward(t, training=True)
            return T.reduce_sum(T.mul(logits, Tensor([[1.0, -0.5, 2.0]] * 2)))

        rep = T.grad_check(f, Tensor(x))
        assert rep.passed, rep


class TestCountFlops:
    def test_pointwise_closed_form(self):
        from eegct.layers import Conv1dSpec, Conv1d, conv1d
        rng = np.random.default_rng(16)
        c, t_len = 5, 12
        spec = Conv1dSpec(c, c, 1, bias=False)
        conv = Conv1d(spec, rng)
        meter = T.FlopMeter()
        with T.no_grad(), T.count_macs(meter):
            conv1d(Tensor(rng.standard_normal((c, t_len))), conv.w, None, spec)
        assert meter.flops == 2 * c * c * t_len

    def test_matches_instrumented_forward(self):
        cfg = mini_config()
        model = ConvTransformer(cfg, seed=14)
        meter = T.FlopMeter()
        x = np.random.default_rng(17).standard_normal((1, 4, 128))
        with T.no_grad(), T.count_macs(meter):
            model.forward(x, training=False)
        assert meter.flops == count_flops(cfg)

    @pytest.mark.parametrize("toggles", [
        {"use_depth_block": False},
        {"n_sconv_blocks": 1},
        {"use_sk_attention": False},
        {"use_transformer": False},
    ])
    def test_matches_instrumented_forward_ablated(self, toggles):
        cfg = mini_config(**toggles)
        model = ConvTransformer(cfg, seed=15)
        meter = T.FlopMeter()
        x = np.random.default_rng(18).standard_normal((1, 4, 128))
        with T.no_grad(), T.count_macs(meter):
            model.forward(x, training=False)
        assert meter.flops == count_flops(cfg)

    def test_monotone_in_window_length(self):
        import dataclasses
        base = ModelConfig.thu_ep()
        flops = [count_flops(dataclasses.replace(base, input_len=125 * w))
                 for w in range(4, 19, 2)]
        assert all(b > a for a, b in zip(flops, flops[1:]))

    def test_doubling_window_roughly_doubles_conv_cost(self):
        import dataclasses
        cfg1 = dataclasses.replace(ModelConfig.thu_ep(), use_transformer=False,
                                   use_sk_attention=False)
        cfg2 = dataclasses.replace(cfg1, input_len=2 * cfg1.input_len)
        ratio = count_flops(cfg2) / count_flops(cfg1)
        assert 1.9 <= ratio <= 2.1
