"""Whitening layer checks: standardization, fitting, fused forward, modes,
and the binary state container."""

import numpy as np
import pytest

from ndpp import tensor as tn
from ndpp.errors import ContractError
from ndpp.layers import (NdppLayer, NdppLayerConfig, load_layer_states,
                         save_layer_states, scale_standardize)
from ndpp.matfun import covariance, inverse_sqrt_eigen, regularize
from ndpp.tensor import Tensor
from ndpp.verify import gradcheck


def ar1_signals(rng, n, length, rho, channels=1):
    """Stationary unit-variance AR(1) rows, independent per channel."""
    x = np.zeros((n, channels, length))
    x[:, :, 0] = rng.normal(size=(n, channels))
    innovation = np.sqrt(1.0 - rho * rho)
    for t in range(1, length):
        x[:, :, t] = rho * x[:, :, t - 1] + innovation * rng.normal(size=(n, channels))
    return x


def block_diag(blocks):
    d = sum(b.shape[0] for b in blocks)
    out = np.zeros((d, d))
    at = 0
    for b in blocks:
        out[at:at + b.shape[0], at:at + b.shape[0]] = b
        at += b.shape[0]
    return out


class TestScaleStandardize:
    def test_none_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out, record = scale_standardize(x, "none")
        np.testing.assert_array_equal(out.data, x.data)
        assert record.mode == "none"

    def test_mu_sigma_two_point_sample(self):
        out, record = scale_standardize(Tensor([[1.0, 3.0]]), "mu_sigma")
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], rtol=1e-12)
        np.testing.assert_allclose(record.shift, [2.0])
        np.testing.assert_allclose(record.scale, [1.0])

    def test_l1_divides_by_mean_absolute(self):
        out, _ = scale_standardize(Tensor([[2.0, -2.0, 4.0, -4.0]]), "l1")
        np.testing.assert_allclose(out.data, [[2 / 3, -2 / 3, 4 / 3, -4 / 3]])

    def test_all_zero_sample_unchanged(self):
        for mode in ("mu_sigma", "l1"):
            out, _ = scale_standardize(Tensor(np.zeros((2, 5))), mode)
            np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_samples_standardized_independently(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 2, 4, 4)) * 10
        out, _ = scale_standardize(Tensor(x), "mu_sigma")
        flat = out.data.reshape(6, -1)
        np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-6)

    def test_l1_scaling_cancels(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 9))
        base, _ = scale_standardize(Tensor(x), "l1")
        for a in (0.1, 10.0):
            scaled, _ = scale_standardize(Tensor(a * x), "l1")
            np.testing.assert_allclose(scaled.data, base.data, rtol=1e-12, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = tn.parameter(rng.uniform(0.5, 1.5, size=(3, 5)))
        for mode in ("mu_sigma", "l1"):
            assert gradcheck(
                lambda t: tn.variance(scale_standardize(t, mode)[0]), [x]) <= 1e-6


def fc_layer(d=8, out=3, seed=0, **overrides):
    options = dict(layer_kind="fully_connected", in_size=d, out_size=out)
    options.update(overrides)
    return NdppLayer(NdppLayerConfig(**options), rng=seed)


class TestFitWhitening:
    def test_already_white_input_gives_identity(self):
        rng = np.random.default_rng(4)
        q, _ = np.linalg.qr(rng.normal(size=(16, 8)))
        layer = fc_layer()
        layer.fit_whitening(Tensor(q * 4.0))  # (1/N) X^t X = I
        np.testing.assert_allclose(layer.state.batch_d[0].data, np.eye(8), atol=1e-4)

    def test_running_average_zero_momentum(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(32, 8)))
        layer = fc_layer(running_momentum=0.0)
        layer.fit_whitening(x)
        layer.fit_whitening(x)
        np.testing.assert_array_equal(
            layer.state.running_d[0], layer.state.batch_d[0].data)

    def test_conv_whitening_identity_newton_and_eigen(self):
        rng = np.random.default_rng(6)
        x = ar1_signals(rng, n=96, length=16, rho=0.6)
        layer = NdppLayer(NdppLayerConfig(
            layer_kind="convolution", in_size=1, out_size=2, kernel=3,
            spatial_dims=1, scale_mode="mu_sigma", epsilon=0.0))
        layer.fit_whitening(Tensor(x))

        standardized, _ = scale_standardize(Tensor(x), "mu_sigma")
        dm = layer.data_matrix(standardized, subsample=True).values.data
        d_newton = layer.state.batch_d[0].data
        cov_after = covariance(Tensor(dm @ d_newton)).data
        assert np.abs(cov_after - np.eye(3)).max() <= 1e-3

        d_eigen = inverse_sqrt_eigen(covariance(Tensor(dm))).data
        cov_after = covariance(Tensor(dm @ d_eigen)).data
        assert np.abs(cov_after - np.eye(3)).max() <= 1e-8

    def test_fit_requires_training_mode(self):
        layer = fc_layer()
        layer.set_mode("evaluation")
        with pytest.raises(ContractError):
            layer.fit_whitening(Tensor(np.ones((4, 8))))


class TestForward:
    def test_identity_state_matches_plain_product(self):
        rng = np.random.default_rng(7)
        layer = fc_layer()
        layer.state.batch_d = [tn.eye(8)]
        x = rng.normal(size=(5, 8))
        out = layer.forward(Tensor(x))
        np.testing.assert_allclose(out.data, x @ layer.weight.data, atol=1e-12)

    def test_fused_equals_explicit_fc(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(24, 8)))
        layer = fc_layer(seed=1)
        layer.fit_whitening(x)
        fused = layer.forward(x).data
        d_full = block_diag([d.data for d in layer.state.batch_d])
        standardized, _ = scale_standardize(x, layer.config.scale_mode)
        dm = layer.data_matrix(standardized, subsample=False).values.data
        explicit = (dm @ d_full) @ layer.weight.data
        np.testing.assert_allclose(fused, explicit, atol=1e-10)

    @pytest.mark.parametrize("kind,kwargs", [
        ("convolution", dict(kernel=3, padding=1, spatial_dims=2)),
        ("correlation", dict(kernel=2, spatial_dims=2)),
    ])
    def test_fused_equals_explicit_spatial(self, kind, kwargs):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(3, 2, 5, 5)))
        layer = NdppLayer(NdppLayerConfig(
            layer_kind=kind, in_size=2, out_size=4, scale_mode="l1",
            with_bias=True, **kwargs), rng=2)
        layer.fit_whitening(x)
        fused = layer.forward(x).data

        d_full = block_diag([d.data for d in layer.state.batch_d])
        standardized, _ = scale_standardize(x, "l1")
        dm = layer.data_matrix(standardized, subsample=False)
        w_eff = layer._effective_weight().data
        y = (dm.values.data @ d_full) @ w_eff
        y = y.reshape(3, *dm.grid, 4).transpose(0, 3, 1, 2) + layer.bias.data[None, :, None, None]
        np.testing.assert_allclose(fused, y, atol=1e-10)

    def test_convolution_matches_unrolled_matrix_form(self):
        # kernel (w1,w2,w3) slid over (x1..x5): first output x1 w3 + x2 w2 + x3 w1
        x = np.arange(1.0, 6.0).reshape(1, 1, 5)
        layer = NdppLayer(NdppLayerConfig(
            layer_kind="convolution", in_size=1, out_size=1, kernel=3,
            spatial_dims=1))
        w = np.array([0.5, -1.0, 2.0])
        layer.weight = tn.parameter(w.reshape(3, 1))
        layer.state.batch_d = [tn.eye(3)]
        out = layer.forward(Tensor(x)).data.reshape(-1)
        unrolled = np.array([[1, 2, 3], [2, 3, 4], [3, 4, 5]], dtype=float)
        np.testing.assert_allclose(out, unrolled @ w[::-1], atol=1e-14)

    def test_correlation_uses_unflipped_kernel_full_pad(self):
        x = np.array([[[1.0, 2.0]]])
        layer = NdppLayer(NdppLayerConfig(
            layer_kind="correlation", in_size=1, out_size=1, kernel=3,
            spatial_dims=1))
        w = np.array([3.0, 5.0, 7.0])
        layer.weight = tn.parameter(w.reshape(3, 1))
        layer.state.batch_d = [tn.eye(3)]
        out = layer.forward(Tensor(x)).data.reshape(-1)
        padded = np.array([[0, 0, 1], [0, 1, 2], [1, 2, 0], [2, 0, 0]], dtype=float)
        np.testing.assert_allclose(out, padded @ w, atol=1e-14)

    def test_training_forward_requires_fit(self):
        layer = fc_layer()
        with pytest.raises(ContractError):
            layer.forward(Tensor(np.ones((2, 8))))


class TestModes:
    def test_eval_before_fit_rejected(self):
        layer = fc_layer()
        layer.set_mode("evaluation")
        with pytest.raises(ContractError):
            layer.forward(Tensor(np.ones((2, 8))))

    def test_eval_matches_training_after_single_fit(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(16, 8)))
        layer = fc_layer(running_momentum=0.0)
        layer.fit_whitening(x)
        train_out = layer.forward(x).data
        layer.set_mode("evaluation")
        eval_out = layer.forward(x).data
        np.testing.assert_array_equal(train_out, eval_out)

    def test_double_toggle_restores(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(16, 8)))
        layer = fc_layer()
        layer.fit_whitening(x)
        base = layer.forward(x).data
        layer.set_mode("evaluation")
        layer.set_mode("training")
        np.testing.assert_array_equal(layer.forward(x).data, base)

    def test_bad_mode_rejected(self):
        with pytest.raises(ContractError):
            fc_layer().set_mode("test")


class TestScaleInvariance:
    @pytest.mark.parametrize("a", [0.1, 1.0, 10.0])
    def test_l1_forward_invariant(self, a):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(12, 8))
        layer = fc_layer(scale_mode="l1", seed=3)
        layer.fit_whitening(Tensor(x))
        base = layer.forward(Tensor(x)).data
        layer.fit_whitening(Tensor(a * x))
        scaled = layer.forward(Tensor(a * x)).data
        np.testing.assert_allclose(scaled, base, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("a", [0.1, 1.0, 10.0])
    def test_mu_sigma_forward_invariant(self, a):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(6, 1, 4, 4))
        layer = NdppLayer(NdppLayerConfig(
            layer_kind="convolution", in_size=1, out_size=2, kernel=3,
            scale_mode="mu_sigma"), rng=4)
        layer.fit_whitening(Tensor(x))
        base = layer.forward(Tensor(x)).data
        layer.fit_whitening(Tensor(a * x))
        scaled = layer.forward(Tensor(a * x)).data
        np.testing.assert_allclose(scaled, base, rtol=1e-8, atol=1e-8)


class TestGradients:
    def test_full_layer_gradcheck_fc(self):
        rng = np.random.default_rng(14)
        layer = fc_layer(d=4, out=2, scale_mode="mu_sigma", seed=5)
        x = tn.parameter(rng.uniform(-1, 1, size=(6, 4)))

        def fn(xt, wt):
            layer.fit_whitening(xt)
            out = layer.forward(xt)
            return tn.mean(tn.mul(out, out))

        assert gradcheck(fn, [x, layer.weight], h=1e-5) <= 1e-4


class TestSerialization:
    def _trained_layers(self):
        rng = np.random.default_rng(15)
        fc = fc_layer(d=6, out=3, scale_mode="l1", with_bias=True, seed=6)
        fc.fit_whitening(Tensor(rng.normal(size=(10, 6))))
        conv = NdppLayer(NdppLayerConfig(
            layer_kind="convolution", in_size=2, out_size=4, kernel=3,
            padding=1, scale_mode="mu_sigma", with_bias=True,
            subsample_stride=2, epsilon=3e-5, running_momentum=0.8,
            newton_iterations=4), rng=7)
        conv.fit_whitening(Tensor(rng.normal(size=(3, 2, 6, 6))))
        return [fc, conv]

    def test_round_trip_bit_exact(self, tmp_path):
        layers = self._trained_layers()
        path = tmp_path / "state.bin"
        save_layer_states(path, layers)
        loaded = load_layer_states(path)
        assert len(loaded) == len(layers)
        for original, restored in zip(layers, loaded):
            assert restored.config == original.config
            assert restored.weight.data.tobytes() == original.weight.data.tobytes()
            if original.bias is None:
                assert restored.bias is None
            else:
                assert restored.bias.data.tobytes() == original.bias.data.tobytes()
            assert restored.state.blocks == original.state.blocks
            for a, b in zip(restored.state.running_d, original.state.running_d):
                assert a.tobytes() == b.tobytes()

    def test_second_save_identical_bytes(self, tmp_path):
        layers = self._trained_layers()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_layer_states(p1, layers)
        save_layer_states(p2, load_layer_states(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ContractError):
            load_layer_states(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NDPP" + np.uint32(99).tobytes() + np.uint32(0).tobytes())
        with pytest.raises(ContractError):
            load_layer_states(path)


class TestConfigValidation:
    def test_invalid_values_rejected(self):
        bad = [dict(epsilon=-1.0), dict(running_momentum=1.5),
               dict(subsample_stride=0), dict(scale_mode="zscore"),
               dict(newton_iterations=0), dict(layer_kind="dense")]
        for overrides in bad:
            options = dict(layer_kind="fully_connected", in_size=4, out_size=2)
            options.update(overrides)
            with pytest.raises(ContractError):
                NdppLayerConfig(**options).validate()

    def test_block_partition_policy(self):
        conv = NdppLayer(NdppLayerConfig(
            layer_kind="convolution", in_size=64, out_size=8, kernel=3))
        assert conv.state.blocks == [(0, 576)]
        fc = fc_layer(d=512, out=4)
        assert fc.state.blocks == [(0, 256), (256, 512)]
