import numpy as np
import pytest

from evpnet import ModelConfig, Tensor, build, load_model, save_model
from evpnet.selftest import ablation_configs

from conftest import tiny_model, warm_bn


def se_params(c):
    h = max(c // 16, 4)
    return c * h + h + h * c + c


def baseline_count(widths=(16, 32, 64), blocks=2, classes=10):
    """Closed-form parameter count of the SE-ResNet layout."""
    total = 3 * widths[0] * 9 + 2 * widths[0]
    cin = widths[0]
    for s, w in enumerate(widths):
        for b in range(blocks):
            mid = max(w // 4, 8)
            total += cin * mid + 2 * mid + mid * mid * 9 + 2 * mid + se_params(mid) + mid * w + 2 * w
            if cin != w or (s > 0 and b == 0):
                total += cin * w + 2 * w
            cin = w
    return total + widths[-1] * classes + classes


def evpconv_count(cin, cout):
    return (cin * cout if cin != cout else 0) + cout * 9 + cout + se_params(2 * cout)


def evpnet_count(widths=(16, 32, 64), blocks=2, classes=10):
    total = evpconv_count(3, widths[0]) + 2 * widths[0]
    cin = widths[0]
    for s, w in enumerate(widths):
        for b in range(blocks):
            mid = max(w // 4, 8)
            total += cin * mid + 2 * mid + evpconv_count(mid, mid) + 2 * mid + mid * w + 2 * w
            if cin != w or (s > 0 and b == 0):
                total += cin * w + 2 * w
            cin = w
    return total + widths[-1] ** 2 + widths[-1] * classes + classes


class TestBuild:
    def test_baseline_parameter_count(self):
        assert build(ModelConfig(family="se-resnet")).num_parameters() == baseline_count()

    def test_evpnet_parameter_count(self):
        assert build(ModelConfig(family="evpnet")).num_parameters() == evpnet_count()

    def test_depth_56_has_six_blocks_per_stage(self):
        cfg = ModelConfig(family="se-resnet", depth=56, widths=(8, 16, 32))
        assert cfg.blocks_per_stage == 6
        assert build(cfg).num_parameters() == baseline_count((8, 16, 32), 6)

    def test_all_off_evpnet_matches_baseline_layout(self):
        base = build(ModelConfig(family="se-resnet"))
        off = build(ModelConfig(family="evpnet", pdog=False, trelu=False, pnl=False))
        assert base.layer_types() == off.layer_types()
        assert [n for n, _ in base.named_parameters()] == [n for n, _ in off.named_parameters()]

    def test_pnl_changes_only_the_head(self):
        a = build(ModelConfig(family="evpnet", pdog=False, trelu=False, pnl=False))
        b = build(ModelConfig(family="evpnet", pdog=False, trelu=False, pnl=True))
        body = lambda m: [n for n, _ in m.named_parameters() if not n.startswith("head")]
        assert body(a) == body(b)
        assert "head.pnl.weight" in dict(b.named_parameters())

    def test_trelu_without_pdog_swaps_block_activations(self):
        m = build(ModelConfig(family="evpnet", depth=11, widths=(8, 16, 32), pdog=False, trelu=True, pnl=False))
        kinds = m.layer_types()
        assert kinds[:4] == ["input_norm", "conv", "bn", "relu"]
        assert "relu" not in kinds[4:]
        assert kinds.count("trelu") == 3 * 3

    def test_evp_blocks_replace_stem_and_middle_conv(self):
        kinds = build(ModelConfig(depth=11, widths=(8, 16, 32))).layer_types()
        assert kinds.count("evpconv") == 1 + 3
        assert "se" not in kinds  # absorbed into EVPConv
        assert kinds[-2:] == ["pnl", "linear"]

    def test_eight_ablations_build(self):
        cfgs = ablation_configs()
        assert len({tuple(c.toggles().values()) for c in cfgs}) == 8
        for cfg in cfgs:
            assert build(cfg).num_parameters() > 0

    @pytest.mark.parametrize("bad", [dict(depth=21), dict(depth=5), dict(family="vgg"), dict(widths=()),
                                     dict(family="se-resnet", pnl=True)])
    def test_invalid_configs(self, bad):
        with pytest.raises(ValueError):
            build(ModelConfig(**bad))

    def test_parameter_names_unique(self):
        names = [n for n, _ in build(ModelConfig()).named_parameters()]
        assert len(names) == len(set(names))
        assert "stage1.block0.conv1.weight" in names


class TestForward:
    def test_logits_shape_and_softmax(self, rng):
        model = warm_bn(build(ModelConfig(depth=11, widths=(8, 16, 32))))
        logits = model(Tensor(rng.random((3, 3, 32, 32)).astype(np.float32))).data
        assert logits.shape == (3, 10)
        p = np.exp(logits - logits.max(1, keepdims=True))
        np.testing.assert_allclose((p / p.sum(1, keepdims=True)).sum(1), 1, atol=1e-6)

    def test_taps_for_depth_20(self, rng):
        model = warm_bn(build(ModelConfig(widths=(8, 16, 32))))
        x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
        logits, taps = model(x, with_taps=True)
        assert len(taps) == 8 == len(model.tap_names)
        assert [t.shape[1] for t in taps] == [8, 8, 8, 16, 16, 32, 32, 32]
        np.testing.assert_array_equal(logits.data, model(x).data)

    def test_eval_forward_deterministic(self, rng):
        model = tiny_model()
        x = Tensor(rng.random((4, 3, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(model(x).data, model(x).data)

    def test_input_shape_checked(self):
        with pytest.raises(ValueError, match="expects"):
            tiny_model()(Tensor(np.zeros((1, 3, 9, 9), np.float32)))

    def test_float64_build(self):
        model = tiny_model(dtype="f64")
        assert all(p.dtype == np.float64 for p in model.parameters())


class TestCheckpoint:
    @pytest.mark.parametrize("family,dtype", [("evpnet", None), ("se-resnet", None), ("evpnet", "f64")])
    def test_round_trip_logits_bit_exact(self, tmp_path, rng, family, dtype):
        model = tiny_model(family, seed=3, dtype=dtype)
        x = Tensor(rng.random((4, 3, 8, 8)).astype(model.parameters()[0].dtype))
        save_model(model, tmp_path / "m")
        again = load_model(tmp_path / "m")
        assert again.config == model.config
        np.testing.assert_array_equal(again(x).data, model(x).data)

    def test_state_mismatch_reported(self):
        model = tiny_model()
        state = model.state_dict()
        state.pop("head.fc.bias")
        with pytest.raises(KeyError, match="head.fc.bias"):
            tiny_model().load_state_dict(state)
