import numpy as np
import pytest

from atmosconv import tensor as T
from atmosconv.errors import ConfigError, ShapeError
from atmosconv.filters import filter_ratios
from atmosconv.gradcheck import finite_diff_grad, relative_error
from atmosconv.nn import (
    Conv2d,
    ModelConfig,
    Norm2d,
    NormConv2d,
    affine_parameter_count,
    build_model,
    init_params,
    init_std_target,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from atmosconv.tensor import Tensor


def mixed_sign_layer(rng, cin=3, cout=4, k=3):
    layer = NormConv2d(cin, cout, k, padding=0, use_affine=False)
    layer.weight.data[...] = rng.uniform(-1, 1, size=layer.weight.shape)
    return layer


class TestConfig:
    def test_text_round_trip(self):
        cfg = ModelConfig(architecture="mini_resnet", conv_mode="normalized",
                          norm_layer="instance", width=4, depth=1, seed=7, eps=1e-5)
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_comments_and_blank_lines(self):
        cfg = ModelConfig.from_text("# paired run\n\nwidth = 8\nconv_mode=normalized  # note\n")
        assert cfg.width == 8 and cfg.conv_mode == "normalized"

    @pytest.mark.parametrize("text", ["width", "colour=red", "architecture=vgg", "width=0"])
    def test_bad_text(self, text):
        with pytest.raises(ConfigError):
            ModelConfig.from_text(text)

    def test_batch_norm_drops_affine(self):
        cfg = ModelConfig(conv_mode="normalized", norm_layer="batch")
        assert not cfg.use_affine
        with pytest.raises(ConfigError):
            ModelConfig(conv_mode="normalized", norm_layer="batch", affine="on")

    def test_affine_without_batch_norm(self):
        assert ModelConfig(conv_mode="normalized", norm_layer="instance").use_affine
        assert ModelConfig(conv_mode="normalized", norm_layer="none").use_affine


class TestBuild:
    def test_tiny_cnn_layout(self):
        m = build_model(ModelConfig(width=16, depth=3))
        widths = [l.cout for _, l in m.conv_layers()]
        assert widths == [16, 16, 32, 32, 64, 64]
        out = m(np.zeros((2, 3, 16, 16)))
        assert out.shape == (2, 10)

    def test_mini_resnet_forward(self, rng):
        m = build_model(ModelConfig(architecture="mini_resnet", width=4, depth=1))
        assert m(rng.random((2, 3, 8, 8))).shape == (2, 10)

    @pytest.mark.parametrize("arch", ["tiny_cnn", "mini_resnet"])
    def test_no_extra_params_with_batch_norm(self, arch):
        base = ModelConfig(architecture=arch, width=8, depth=2, norm_layer="batch")
        v = build_model(base)
        n = build_model(base.replace(conv_mode="normalized"))
        assert v.num_parameters() == n.num_parameters()

    def test_affine_overhead_count(self):
        base = ModelConfig(architecture="mini_resnet", width=8, depth=1, norm_layer="instance")
        v = build_model(base)
        n = build_model(base.replace(conv_mode="normalized"))
        assert n.num_parameters() - v.num_parameters() == affine_parameter_count(n)

    def test_same_seed_same_raw_weights_across_modes(self):
        base = ModelConfig(width=4, depth=2, seed=3)
        v = build_model(base)
        n = build_model(base.replace(conv_mode="normalized"))
        for a, b in zip(v.raw_kernels(), n.raw_kernels()):
            np.testing.assert_array_equal(a.data, b.data)


class TestInit:
    def test_bit_equal(self):
        a = build_model(ModelConfig(width=4, depth=2, seed=9))
        b = build_model(ModelConfig(width=4, depth=2, seed=9))
        for (na, pa), (nb, pb) in zip(a.state(), b.state()):
            assert na == nb
            np.testing.assert_array_equal(pa, pb)

    def test_seed_changes_weights(self):
        a = build_model(ModelConfig(width=4, depth=2, seed=1))
        b = build_model(ModelConfig(width=4, depth=2, seed=2))
        assert not np.array_equal(a.raw_kernels()[0].data, b.raw_kernels()[0].data)

    def test_std_matches_fan_in(self):
        m = build_model(ModelConfig(width=64, depth=2))
        w = m.raw_kernels()[2].data          # 3x3x64 fan-in
        target = init_std_target(64 * 9)
        assert abs(w.std() / target - 1) < 0.1

    def test_scales_and_shifts(self):
        m = build_model(ModelConfig(conv_mode="normalized", norm_layer="none", width=4, depth=1))
        for name, p in m.named_parameters().items():
            if name.endswith("scale"):
                np.testing.assert_array_equal(p.data, 1.0)
            if name.endswith("shift") or name.endswith("bias"):
                np.testing.assert_array_equal(p.data, 0.0)

    def test_initial_ratios_span_interior(self):
        m = build_model(ModelConfig(conv_mode="normalized", width=16, depth=2))
        r = np.abs(np.concatenate([filter_ratios(w.data) for w in m.raw_kernels()]))
        assert r.min() > 0 and r.max() < 1
        assert r.max() - r.min() > 0.2


class TestNormConv:
    def test_positive_uniform_kernel_on_constant(self):
        layer = NormConv2d(2, 1, 3, padding=0, use_affine=True)
        layer.weight.data[...] = 1.0
        np.testing.assert_array_equal(layer.scale.data, 1.0)
        np.testing.assert_array_equal(layer.shift.data, 0.0)
        out = layer(Tensor(np.full((1, 2, 5, 5), 0.7))).data
        np.testing.assert_allclose(out, 0.7, atol=1e-6)

    @pytest.mark.parametrize("use_affine", [True, False])
    def test_offset_invariance(self, rng, use_affine):
        layer = mixed_sign_layer(rng)
        layer.use_affine = use_affine
        if use_affine:
            layer.scale = Tensor(rng.normal(size=4))
            layer.shift = Tensor(rng.normal(size=4))
        x = rng.random((2, 3, 7, 7))
        np.testing.assert_allclose(layer(Tensor(x + 0.4)).data, layer(Tensor(x)).data, atol=1e-6)

    @pytest.mark.parametrize("g,o", [(0.5, -0.3), (0.5, 0.7), (2.0, -0.3), (2.0, 0.7)])
    def test_mixed_sign_equivariance(self, rng, g, o):
        layer = mixed_sign_layer(rng)
        x = rng.random((2, 3, 7, 7))
        np.testing.assert_allclose(layer(Tensor(g * x + o)).data, g * layer(Tensor(x)).data, atol=1e-6)

    @pytest.mark.parametrize("g,o", [(0.5, -0.3), (2.0, 0.7)])
    def test_positive_filter_equivariance(self, rng, g, o):
        layer = NormConv2d(3, 4, 3, padding=0, use_affine=False)
        layer.weight.data[...] = rng.uniform(0, 1, size=layer.weight.shape)
        x = rng.random((2, 3, 7, 7))
        np.testing.assert_allclose(layer(Tensor(g * x + o)).data, g * layer(Tensor(x)).data + o,
                                   atol=1e-6)

    def test_vanilla_residual(self, rng):
        layer = Conv2d(3, 4, 3, padding=0, bias=False)
        layer.weight.data[...] = rng.normal(size=layer.weight.shape)
        x = rng.random((1, 3, 6, 6))
        g, o = 1.3, 0.4
        w = layer.weight.data.reshape(4, -1)
        residual = o * np.abs(w).sum(1) * filter_ratios(w)
        diff = layer(Tensor(g * x + o)).data - g * layer(Tensor(x)).data
        np.testing.assert_allclose(diff, residual[None, :, None, None] * np.ones_like(diff), atol=1e-9)

    def test_effective_kernels_obey_dichotomy(self, rng):
        layer = mixed_sign_layer(rng, cout=6)
        layer.weight.data[0] = np.abs(layer.weight.data[0])
        r = filter_ratios(layer.effective_weight().data)
        assert r[0] == 1.0
        assert np.all(np.abs(r[1:]) < 1e-5)

    def test_gradient_through_normalization(self, rng):
        layer = mixed_sign_layer(rng, cin=2, cout=3)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        probe = rng.normal(size=(2, 3, 3, 3))

        def f():
            return T.tsum(T.mul(layer(x), Tensor(probe)))

        layer.weight.zero_grad()
        f().backward()
        num = finite_diff_grad(f, layer.weight)
        assert relative_error(layer.weight.grad, num).max() < 1e-4


class TestNorm2d:
    def test_instance_offset_invariance(self, rng):
        layer = Norm2d(3, "instance")
        x = rng.normal(size=(2, 3, 6, 6))
        np.testing.assert_allclose(layer(Tensor(x - 0.4)).data, layer(Tensor(x)).data, atol=1e-12)

    def test_instance_gain_moves_only_eps(self, rng):
        # IN_eps(g x + o) == IN_{eps / g^2}(x): gain only rescales the stabilizer
        g = 1.7
        x = rng.normal(size=(2, 3, 6, 6))
        out = Norm2d(3, "instance", eps=1e-5)(Tensor(g * x + 0.3)).data
        ref = Norm2d(3, "instance", eps=1e-5 / g ** 2)(Tensor(x)).data
        np.testing.assert_allclose(out, ref, atol=1e-12)
        tight = Norm2d(3, "instance", eps=1e-12)
        np.testing.assert_allclose(tight(Tensor(g * x + 0.3)).data, tight(Tensor(x)).data, atol=1e-6)

    def test_batch_train_statistics(self, rng):
        layer = Norm2d(4, "batch")
        y = layer(Tensor(rng.normal(2.0, 3.0, size=(8, 4, 5, 5))), train=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ConfigError):
            Norm2d(2, "batch")(Tensor(rng.normal(size=(1, 2, 3, 3))), train=True)

    def test_running_stats_move(self, rng):
        layer = Norm2d(2, "batch")
        layer(Tensor(rng.normal(5.0, 1.0, size=(4, 2, 3, 3))), train=True)
        rm = dict(layer.named_buffers())["running_mean"]
        assert np.all(rm > 0.3)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            Norm2d(2, "group")

    @pytest.mark.parametrize("mode", ["batch", "instance"])
    def test_gradients(self, rng, mode):
        layer = Norm2d(3, mode)
        layer.gamma.data[...] = rng.normal(size=3)
        layer.beta.data[...] = rng.normal(size=3)
        x = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        probe = rng.normal(size=(4, 3, 3, 3))

        def f():
            return T.tsum(T.mul(layer(x, train=True), Tensor(probe)))

        for p in (x, layer.gamma, layer.beta):
            p.zero_grad()
        f().backward()
        for p in (x, layer.gamma, layer.beta):
            assert relative_error(p.grad, finite_diff_grad(f, p)).max() < 1e-4


class TestCheckpoint:
    @pytest.mark.parametrize("mode,norm", [("vanilla", "batch"), ("normalized", "instance")])
    def test_round_trip(self, tmp_path, rng, mode, norm):
        cfg = ModelConfig(conv_mode=mode, norm_layer=norm, width=4, depth=2, seed=5)
        m = build_model(cfg)
        for _, a in m.state():
            a[...] = rng.uniform(0.5, 1.5, size=a.shape)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt", expect=cfg)
        for (na, a), (nb, b) in zip(m.state(), back.state()):
            assert na == nb
            np.testing.assert_array_equal(a, b)
        x = rng.random((2, 3, 8, 8))
        np.testing.assert_array_equal(m(x).data, back(x).data)

    def test_config_mismatch(self, tmp_path):
        cfg = ModelConfig(width=4, depth=1)
        save_checkpoint(build_model(cfg), tmp_path / "m.ckpt")
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "m.ckpt", expect=cfg.replace(width=8))

    def test_truncated(self, tmp_path):
        save_checkpoint(build_model(ModelConfig(width=4, depth=1)), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-8])
        with pytest.raises(ConfigError):
            read_checkpoint(tmp_path / "m.ckpt")

    def test_wrong_format(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ConfigError):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_copy_state_shape_check(self):
        a = build_model(ModelConfig(width=4, depth=1))
        b = build_model(ModelConfig(width=8, depth=1))
        with pytest.raises(ShapeError):
            a.copy_state_from(b)


def test_reinit_is_deterministic():
    m = build_model(ModelConfig(width=4, depth=1, seed=0))
    before = [a.copy() for _, a in m.state()]
    for _, a in m.state():
        a[...] = 0
    init_params(m, 0)
    for a, (_, b) in zip(before, m.state()):
        np.testing.assert_array_equal(a, b)
