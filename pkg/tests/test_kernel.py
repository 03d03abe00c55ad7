"""Covariance functions: closed forms vs sampling, recursion, PSD, symmetry."""

import math

import numpy as np
import pytest

from nngp_card.diagnostics import mc_activation_expectations, random_psd_case
from nngp_card.kernel import (
    KernelConfig,
    KernelError,
    add_jitter,
    base_kernel,
    erf_kernel_step,
    kernel_diag,
    nngp_kernel,
    rbf_kernel,
    relu_layer_step,
)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sigma_w_sq": 0.0},
            {"sigma_b_sq": -0.1},
            {"noise_sq": -1.0},
            {"depth": -1},
            {"activation": "tanh"},
            {"kernel_family": "matern"},
            {"length_scale": 0.0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(KernelError):
            KernelConfig(**kwargs)

    def test_unknown_keys_rejected(self):
        with pytest.raises(KernelError, match="unknown kernel config keys"):
            KernelConfig.from_dict({"sigma_w_sq": 1.0, "bogus": 2})

    def test_round_trip(self):
        cfg = KernelConfig(depth=5, activation="erf")
        assert KernelConfig.from_dict(cfg.to_dict()) == cfg


class TestBaseKernel:
    def test_zero_vectors_give_bias(self):
        cfg = KernelConfig(sigma_w_sq=2.0, sigma_b_sq=0.3)
        X = np.zeros((2, 4))
        assert np.allclose(base_kernel(X, None, cfg), 0.3)

    def test_unit_norm_self_similarity(self):
        cfg = KernelConfig(sigma_w_sq=1.0, sigma_b_sq=0.0)
        X = np.ones((1, 6))  # ||x||^2 = d
        assert base_kernel(X, None, cfg)[0, 0] == pytest.approx(1.0)

    def test_matches_scalar_recomputation(self):
        # independent oracle: plain python loop over coordinates
        rng = np.random.default_rng(2)
        cfg = KernelConfig(sigma_w_sq=1.7, sigma_b_sq=0.2)
        X = rng.uniform(-1, 1, (3, 5))
        X2 = rng.uniform(-1, 1, (4, 5))
        K = base_kernel(X, X2, cfg)
        for i in range(3):
            for j in range(4):
                dot = sum(float(X[i, k]) * float(X2[j, k]) for k in range(5))
                assert K[i, j] == pytest.approx(0.2 + 1.7 * dot / 5, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(KernelError, match="differ"):
            base_kernel(np.zeros((2, 3)), np.zeros((2, 4)), KernelConfig())

    def test_diagonal_only_bias_variant(self):
        cfg = KernelConfig(sigma_b_sq=0.5, bias_all_entries=False)
        X = np.zeros((3, 2))
        K = base_kernel(X, None, cfg)
        assert np.allclose(np.diag(K), 0.5)
        assert np.allclose(K - np.diag(np.diag(K)), 0.0)


class TestReluStep:
    def test_identical_inputs(self):
        cfg = KernelConfig(sigma_w_sq=1.3, sigma_b_sq=0.2)
        k = 0.8
        expected = 0.2 + 1.3 * k / 2.0
        assert relu_layer_step(k, k, k, cfg) == pytest.approx(expected, rel=1e-12)

    def test_orthogonal_inputs(self):
        cfg = KernelConfig(sigma_w_sq=1.5, sigma_b_sq=0.0)
        kxx, kyy = 0.9, 1.6
        expected = 1.5 / (2 * math.pi) * math.sqrt(kxx * kyy)
        assert relu_layer_step(kxx, 0.0, kyy, cfg) == pytest.approx(expected, rel=1e-12)

    def test_non_positive_variance_rejected(self):
        with pytest.raises(KernelError, match="positive"):
            relu_layer_step(0.0, 0.0, 1.0, KernelConfig())

    def test_monotone_in_previous_covariance(self):
        # fixed diagonals, increasing K^{l-1}_xy must increase K^l_xy
        cfg = KernelConfig()
        kxx = kyy = 1.2
        cov = np.linspace(-1.19, 1.19, 201)
        out = relu_layer_step(kxx, cov, kyy, cfg)
        assert np.all(np.diff(out) > 0)

    def test_clamps_cosine_drift(self):
        cfg = KernelConfig(sigma_w_sq=2.0, sigma_b_sq=0.0)
        k = 0.7
        val = relu_layer_step(k, k * (1 + 1e-15), k, cfg)
        assert val == pytest.approx(2.0 * k / 2.0, rel=1e-12)

    def test_diagonal_only_bias_variant_drops_bias_off_diagonal(self):
        cfg = KernelConfig(sigma_w_sq=1.2, sigma_b_sq=0.4, bias_all_entries=False)
        k = 0.9
        # the step output is an off-diagonal entry under the literal variant
        assert relu_layer_step(k, k, k, cfg) == pytest.approx(1.2 * k / 2.0, rel=1e-12)
        assert erf_kernel_step(1.0, 0.0, 1.0, cfg) == pytest.approx(0.0, abs=1e-15)


class TestErfStep:
    def test_zero_covariance_gives_bias(self):
        cfg = KernelConfig(sigma_w_sq=1.4, sigma_b_sq=0.25)
        assert erf_kernel_step(1.0, 0.0, 2.0, cfg) == pytest.approx(0.25)

    def test_symmetric_formula_instantiation(self):
        cfg = KernelConfig(sigma_w_sq=1.0, sigma_b_sq=0.1)
        c = 0.6
        expected = 0.1 + (2 / math.pi) * math.asin(2 * c / (1 + 2 * c))
        assert erf_kernel_step(c, c, c, cfg) == pytest.approx(expected, rel=1e-12)

    def test_arcsin_argument_clamped(self):
        cfg = KernelConfig(sigma_w_sq=1.0, sigma_b_sq=0.0)
        # covariance numerically above the PSD limit must not NaN
        val = erf_kernel_step(0.5, 0.5 * (1 + 5e-16), 0.5, cfg)
        assert np.isfinite(val)


class TestMonteCarloAgreement:
    def test_both_steps_match_sampled_expectations(self):
        # smoke-scale version of the full acceptance check
        rng = np.random.default_rng(424242)
        cfg = KernelConfig(sigma_w_sq=1.0, sigma_b_sq=0.0, depth=1)
        for _ in range(10):
            kxx, kxy, kyy = random_psd_case(rng)
            mc = mc_activation_expectations(kxx, kxy, kyy, 500_000, rng)
            assert relu_layer_step(kxx, kxy, kyy, cfg) == pytest.approx(mc["relu"], rel=0.02)
            assert erf_kernel_step(kxx, kxy, kyy, cfg) == pytest.approx(mc["erf"], rel=0.02)


class TestDepthRecursion:
    def test_depth_zero_equals_base(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 1, (10, 7))
        cfg = KernelConfig(depth=0, noise_sq=0.0)
        np.testing.assert_allclose(
            nngp_kernel(X, None, cfg, include_noise=False), base_kernel(X, None, cfg), atol=1e-12
        )

    def test_diagonal_matches_scalar_recurrence(self):
        # independent oracle: python loop a_{l} = sb + sw * a_{l-1} / 2
        rng = np.random.default_rng(4)
        X = rng.uniform(0, 1, (6, 5))
        cfg = KernelConfig(sigma_w_sq=1.6, sigma_b_sq=0.1, depth=3, noise_sq=0.0)
        K = nngp_kernel(X, None, cfg, include_noise=False)
        for i in range(len(X)):
            a = 0.1 + 1.6 * sum(float(v) ** 2 for v in X[i]) / 5
            for _ in range(3):
                a = 0.1 + 1.6 * a / 2.0
            assert K[i, i] == pytest.approx(a, rel=1e-12)

    def test_erf_diagonal_matches_scalar_recurrence(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(0, 1, (4, 3))
        cfg = KernelConfig(sigma_w_sq=1.2, sigma_b_sq=0.3, depth=2, activation="erf", noise_sq=0.0)
        K = nngp_kernel(X, None, cfg, include_noise=False)
        for i in range(len(X)):
            a = 0.3 + 1.2 * sum(float(v) ** 2 for v in X[i]) / 3
            for _ in range(2):
                a = 0.3 + 1.2 * (2 / math.pi) * math.asin(2 * a / (1 + 2 * a))
            assert K[i, i] == pytest.approx(a, rel=1e-12)

    def test_cross_matrix_consistent_with_same_batch(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(0, 1, (8, 4))
        cfg = KernelConfig(depth=3, noise_sq=0.0)
        full = nngp_kernel(X, None, cfg, include_noise=False)
        cross = nngp_kernel(X[:5], X[5:], cfg)
        np.testing.assert_allclose(cross, full[:5, 5:], atol=1e-12)

    def test_noise_only_on_same_batch_diagonal(self):
        rng = np.random.default_rng(7)
        X = rng.uniform(0, 1, (5, 4))
        cfg = KernelConfig(depth=1, noise_sq=0.25)
        with_noise = nngp_kernel(X, None, cfg)
        without = nngp_kernel(X, None, cfg, include_noise=False)
        np.testing.assert_allclose(with_noise - without, 0.25 * np.eye(5), atol=1e-14)
        cross = nngp_kernel(X, X.copy(), cfg)
        np.testing.assert_allclose(cross, without, atol=1e-12)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(8)
        X = rng.uniform(0, 1, (20, 6))
        K = nngp_kernel(X, None, KernelConfig(depth=4, noise_sq=0.0), include_noise=False)
        assert np.array_equal(K, K.T)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        X = rng.uniform(0, 1, (12, 5))
        perm = rng.permutation(12)
        cfg = KernelConfig(depth=2, noise_sq=0.0)
        K = nngp_kernel(X, None, cfg, include_noise=False)
        Kp = nngp_kernel(X[perm], None, cfg, include_noise=False)
        np.testing.assert_allclose(Kp, K[np.ix_(perm, perm)], atol=1e-12)

    def test_psd_after_jitter_on_random_batches(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = int(rng.integers(3, 30))
            d = int(rng.integers(2, 10))
            X = rng.uniform(0, 1, (n, d))
            cfg = KernelConfig(depth=int(rng.integers(0, 4)), noise_sq=0.0)
            K = nngp_kernel(X, None, cfg, include_noise=False)
            add_jitter(K, 1e-8)
            min_eig = float(np.linalg.eigvalsh(K)[0])
            assert min_eig >= -1e-8 * np.trace(K) / n

    def test_kernel_diag_matches_matrix_diag(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(0, 1, (9, 4))
        for activation in ("relu", "erf"):
            cfg = KernelConfig(depth=3, activation=activation, noise_sq=0.0)
            K = nngp_kernel(X, None, cfg, include_noise=False)
            np.testing.assert_allclose(kernel_diag(X, cfg), np.diag(K), atol=1e-12)


class TestRbf:
    def test_self_similarity_is_one(self):
        X = np.array([[0.3, 0.4]])
        assert rbf_kernel(X, None, 2.0)[0, 0] == 1.0

    def test_characteristic_distance(self):
        l = 0.7
        X = np.array([[0.0, 0.0]])
        X2 = np.array([[l * math.sqrt(2), 0.0]])
        assert rbf_kernel(X, X2, l)[0, 0] == pytest.approx(math.exp(-1), rel=1e-12)

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(12)
        X = rng.uniform(-1, 1, (4, 3))
        X2 = rng.uniform(-1, 1, (5, 3))
        K = rbf_kernel(X, X2, 1.3)
        for i in range(4):
            for j in range(5):
                d2 = sum((float(X[i, k]) - float(X2[j, k])) ** 2 for k in range(3))
                assert K[i, j] == pytest.approx(math.exp(-d2 / (2 * 1.3**2)), rel=1e-10)

    def test_length_scale_validated(self):
        with pytest.raises(KernelError):
            rbf_kernel(np.zeros((1, 2)), None, 0.0)
