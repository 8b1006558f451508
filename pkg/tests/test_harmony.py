"""Harmonization / affine / restoration: hand values, invariants, gradients."""

import numpy as np
import pytest

from uharmony.errors import ConfigurationError, InputError, PairingError
from uharmony.gradcheck import grad_check
from uharmony.harmony import (
    DENOM_FLOOR,
    HarmonyParams,
    InstanceStats,
    StatsQueue,
    affine,
    apply_restoration,
    harmonize,
    harmony_layer_forward,
    restore,
)
from uharmony.tensor import GradTape, Tensor


def scalar_params(w=1.0, b=0.0, lam=(), gamma=(), delta=(), eps=1e-5, j_poly=None, channels=1):
    jp = j_poly if j_poly is not None else max(len(lam), len(gamma), len(delta))
    p = HarmonyParams.init(channels, j_poly=jp, eps=eps)
    p.w.data[:] = w
    p.b.data[:] = b
    for j, v in enumerate(lam):
        p.lam.data[:, j] = v
    for j, v in enumerate(gamma):
        p.gamma.data[:, j] = v
    for j, v in enumerate(delta):
        p.delta.data[:, j] = v
    return p


def stats_of(mu, sigma, batch=1, channels=1):
    return InstanceStats(
        mu=Tensor(np.full((batch, channels), float(mu))),
        sigma=Tensor(np.full((batch, channels), float(sigma))),
    )


def rand_volume(rng, shape, var_lo=1.0, var_hi=2.0):
    """Random volume with per-channel spatial variance in [var_lo, var_hi]."""
    x = rng.standard_normal(shape)
    mu = x.mean(axis=(2, 3, 4), keepdims=True)
    sd = x.std(axis=(2, 3, 4), keepdims=True)
    target = np.sqrt(rng.uniform(var_lo, var_hi, size=sd.shape))
    return (x - mu) / sd * target + rng.uniform(-2, 2, size=mu.shape)


class TestHarmonize:
    def test_constant_volume(self):
        eps = 1e-5
        x = Tensor(np.full((1, 2, 3, 3, 3), 7.5))
        xhat, stats = harmonize(x, eps)
        assert np.all(xhat.data == 0)
        np.testing.assert_allclose(stats.mu.data, 7.5)
        np.testing.assert_allclose(stats.sigma.data, np.sqrt(eps))

    def test_hand_values_1234(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 1, 4))
        xhat, stats = harmonize(x, 1e-5)
        # (x - 2.5) / sqrt(1.25) by hand
        want = (np.array([1.0, 2.0, 3.0, 4.0]) - 2.5) / np.sqrt(1.25)
        np.testing.assert_allclose(xhat.data.ravel(), want, atol=1e-3)
        np.testing.assert_allclose(
            xhat.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3
        )
        assert stats.mu.data.flat[0] == pytest.approx(2.5)

    def test_idempotent_on_standardized_input(self):
        rng = np.random.default_rng(0)
        x = Tensor(rand_volume(rng, (2, 3, 4, 4, 4)))
        once, _ = harmonize(x, 1e-5)
        twice, _ = harmonize(once, 1e-5)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-3)

    def test_normalization_contract(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = Tensor(rand_volume(rng, (2, 3, 4, 4, 4)))
            xhat, _ = harmonize(x, 1e-5)
            m = xhat.data.mean(axis=(2, 3, 4))
            v = xhat.data.var(axis=(2, 3, 4))
            assert np.abs(m).max() < 1e-6
            assert np.abs(v - 1).max() < 1e-4

    def test_shift_scale_invariance(self):
        # eps-relative correction scales as eps/(2 var); var >= 100 keeps it below 1e-6
        rng = np.random.default_rng(2)
        x = rand_volume(rng, (1, 2, 4, 4, 4), var_lo=100.0, var_hi=400.0)
        base, _ = harmonize(Tensor(x), 1e-5)
        for a, b in [(0.5, 3.0), (1.0, -10.0), (2.7, 0.1)]:
            other, _ = harmonize(Tensor(a * x + b), 1e-5)
            np.testing.assert_allclose(other.data, base.data, atol=1e-6)

    def test_nonfinite_input_names_position(self):
        x = np.zeros((2, 3, 2, 2, 2))
        x[1, 2, 0, 1, 0] = np.inf
        with pytest.raises(InputError, match="sample 1, channel 2"):
            harmonize(Tensor(x), 1e-5)

    def test_gradcheck_smooth(self):
        rng = np.random.default_rng(3)

        def fn(x):
            xhat, _ = harmonize(x, 1e-5)
            return xhat

        rep = grad_check(fn, [Tensor(rand_volume(rng, (1, 2, 3, 3, 3)))], name="harmonize", tol=1e-6)
        assert rep.passed, rep.summary()

    def test_constant_input_gradient_finite(self):
        x = Tensor(np.full((1, 1, 2, 2, 2), 4.0), requires_grad=True)
        with GradTape() as tape:
            xhat, stats = harmonize(x, 1e-5)
        tape.backward(xhat)
        assert np.isfinite(x.grad).all()


class TestAffine:
    def test_identity_at_init(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))
        p = HarmonyParams.init(3, j_poly=2)
        np.testing.assert_array_equal(affine(x, p).data, x.data)

    def test_hand_value_first_order(self):
        # 2*1 + 1 + 0.5*1 = 3.5
        p = scalar_params(w=2.0, b=1.0, lam=(0.5,))
        x = Tensor(np.full((1, 1, 1, 1, 1), 1.0))
        assert affine(x, p).data.flat[0] == pytest.approx(3.5)

    def test_hand_value_second_order(self):
        # 2 + 0.25 * 4 = 3.0
        p = scalar_params(w=1.0, b=0.0, lam=(0.0, 0.25))
        x = Tensor(np.full((1, 1, 1, 1, 1), 2.0))
        assert affine(x, p).data.flat[0] == pytest.approx(3.0)

    def test_j_poly_zero_is_scale_shift(self):
        p = scalar_params(w=3.0, b=-1.0, j_poly=0)
        x = Tensor(np.full((1, 1, 1, 1, 2), 2.0))
        np.testing.assert_allclose(affine(x, p).data, 5.0)

    def test_channel_mismatch(self):
        p = HarmonyParams.init(3)
        with pytest.raises(ConfigurationError):
            affine(Tensor(np.zeros((1, 2, 2, 2, 2))), p)


class TestRestore:
    def test_round_trip_at_init(self):
        rng = np.random.default_rng(5)
        for jp in (1, 2, 3):
            p = HarmonyParams.init(2, j_poly=jp, eps=1e-5)
            x = Tensor(rand_volume(rng, (2, 2, 4, 4, 4)))
            xhat, stats = harmonize(x, p.eps)
            y = restore(affine(xhat, p), p, stats)
            np.testing.assert_allclose(y.data, x.data, atol=1e-4)

    def test_hand_value_plain(self):
        # (3.5 - 1) / 2 = 1.25 in the eps -> 0 limit
        p = scalar_params(w=2.0, b=1.0, gamma=(0.0,), delta=(0.0,), eps=1e-12)
        y = restore(Tensor(np.full((1, 1, 1, 1, 1), 3.5)), p, stats_of(0.0, 1.0))
        assert y.data.flat[0] == pytest.approx(1.25, abs=1e-9)

    def test_hand_value_rational(self):
        # 2 * (1 - 0.1) / (1 + 1e-5 + 0.1) + 3 = 4.63635
        p = scalar_params(w=1.0, b=0.0, gamma=(0.1,), delta=(0.1,), eps=1e-5)
        y = restore(Tensor(np.ones((1, 1, 1, 1, 1))), p, stats_of(3.0, 2.0))
        assert y.data.flat[0] == pytest.approx(4.63635, abs=1e-4)

    def test_output_stats_at_init(self):
        rng = np.random.default_rng(6)
        p = HarmonyParams.init(3, j_poly=2, eps=1e-5)
        x = Tensor(rand_volume(rng, (2, 3, 4, 4, 4)))
        xhat, stats = harmonize(x, p.eps)
        y = restore(affine(xhat, p), p, stats).data
        out_mu = y.mean(axis=(2, 3, 4))
        out_sd = y.std(axis=(2, 3, 4))
        np.testing.assert_allclose(out_mu, stats.mu.data, atol=1e-4)
        np.testing.assert_allclose(out_sd, stats.sigma.data / (1 + p.eps), atol=1e-4)

    def test_denominator_guard_preserves_sign(self):
        p = scalar_params(w=0.0, b=0.0, delta=(0.0,), eps=1e-12)
        # raw denominator ~ 0 -> clamped to +DENOM_FLOOR (sign of 0 is positive)
        y = restore(Tensor(np.full((1, 1, 1, 1, 1), 1.0)), p, stats_of(0.0, 1.0))
        assert y.data.flat[0] == pytest.approx(1.0 / DENOM_FLOOR)
        p2 = scalar_params(w=-0.5, b=0.0, delta=(0.4999,), eps=1e-12)
        y2 = restore(Tensor(np.full((1, 1, 1, 1, 1), 1.0)), p2, stats_of(0.0, 1.0))
        assert y2.data.flat[0] == pytest.approx(1.0 / -DENOM_FLOOR)

    def test_stats_shape_mismatch(self):
        p = HarmonyParams.init(2)
        with pytest.raises(ConfigurationError):
            restore(Tensor(np.zeros((1, 2, 2, 2, 2))), p, stats_of(0, 1, batch=2, channels=2))

    def test_degenerate_constant_input(self):
        p = HarmonyParams.init(1, j_poly=2, eps=1e-5)
        x = Tensor(np.full((1, 1, 3, 3, 3), -2.25), requires_grad=True)
        with GradTape() as tape:
            xhat, stats = harmonize(x, p.eps)
            y = restore(affine(xhat, p), p, stats)
        np.testing.assert_allclose(y.data, -2.25, atol=1e-4)
        tape.backward(y)
        assert np.isfinite(x.grad).all()


def random_safe_params(rng, channels, jp, eps=1e-5):
    """Random coefficients whose restoration denominator stays clear of the clamp."""
    p = HarmonyParams.init(channels, j_poly=jp, eps=eps)
    p.w.data[:] = rng.uniform(0.6, 2.0, channels)
    p.b.data[:] = rng.uniform(-0.5, 0.5, channels)
    p.lam.data[:] = rng.uniform(-0.2, 0.2, (channels, jp))
    p.gamma.data[:] = rng.uniform(-0.2, 0.2, (channels, jp))
    p.delta.data[:] = rng.uniform(-0.1, 0.1, (channels, jp))
    return p


def min_abs_denominator(p, xt):
    den = p.w.data.reshape(1, -1, 1, 1, 1) + p.eps
    for j in range(p.j_poly):
        den = den + p.delta.data[:, j].reshape(1, -1, 1, 1, 1) * xt ** (j + 1)
    return np.abs(den).min()


class TestHarmonyGradients:
    def test_full_stack_gradcheck(self):
        rng = np.random.default_rng(7)
        p = random_safe_params(rng, 2, 2)

        def fn(x, w, b, lam, gamma, delta):
            p.w, p.b, p.lam, p.gamma, p.delta = w, b, lam, gamma, delta
            xhat, stats = harmonize(x, p.eps)
            return restore(affine(xhat, p), p, stats)

        inputs = [Tensor(rand_volume(rng, (1, 2, 3, 3, 3))), p.w, p.b, p.lam, p.gamma, p.delta]
        rep = grad_check(
            fn, inputs, name="uharmony_stack", tol=1e-4,
            labels=["x", "w", "b", "lam", "gamma", "delta"],
        )
        assert rep.passed, rep.summary()

    def test_restore_nonzero_gamma_delta(self):
        rng = np.random.default_rng(8)
        hit_near_guard = 0
        for trial in range(20):
            jp = int(rng.integers(1, 4))
            p = random_safe_params(rng, 2, jp)
            xt = rand_volume(rng, (1, 2, 3, 3, 3))
            margin = min_abs_denominator(p, xt) - DENOM_FLOOR
            if margin < 0.02:  # too close to the kink for finite differences
                continue
            if margin < 0.3:
                hit_near_guard += 1
            mu = Tensor(rng.uniform(-1, 1, (1, 2)))
            sig = Tensor(rng.uniform(0.5, 2.0, (1, 2)))

            def fn(x, w, b, gamma, delta, s, m):
                p.w, p.b, p.gamma, p.delta = w, b, gamma, delta
                return restore(x, p, InstanceStats(mu=m, sigma=s))

            rep = grad_check(
                fn, [Tensor(xt), p.w, p.b, p.gamma, p.delta, sig, mu],
                name=f"restore_{trial}", tol=1e-4, rng=np.random.default_rng(trial),
            )
            assert rep.passed, rep.summary()
        assert hit_near_guard >= 1  # some trials exercised the near-guard region

    def test_gradient_inside_clamped_region(self):
        # denominator fully clamped: its path contributes zero gradient, rest still flows
        p = scalar_params(w=0.0, b=0.2, gamma=(0.1,), delta=(0.0,), eps=1e-12)
        x = Tensor(np.full((1, 1, 1, 1, 2), 0.5))

        def fn(xt, gamma):
            p.gamma = gamma
            return restore(xt, p, stats_of(0.0, 1.0, 1, 1))

        rep = grad_check(fn, [x, p.gamma], name="restore_clamped", tol=1e-4)
        assert rep.passed, rep.summary()


class TestLayerPairing:
    def test_encoder_emits_stats_and_identity_stats(self):
        rng = np.random.default_rng(9)
        p = HarmonyParams.init(2, j_poly=2)
        x = Tensor(rand_volume(rng, (2, 2, 4, 4, 4)))
        q = StatsQueue()
        out, stats = harmony_layer_forward(x, p, q, key="enc0")
        m = out.data.mean(axis=(2, 3, 4))
        v = out.data.var(axis=(2, 3, 4))
        assert np.abs(m).max() < 1e-6
        assert np.abs(v - 1).max() < 1e-4
        restored = apply_restoration(out, p, q, key="enc0")
        np.testing.assert_allclose(restored.data, x.data, atol=1e-4)

    def test_two_layers_independent_stats(self):
        rng = np.random.default_rng(10)
        p = HarmonyParams.init(1)
        q = StatsQueue()
        _, s0 = harmony_layer_forward(Tensor(rand_volume(rng, (1, 1, 3, 3, 3))), p, q, "a")
        _, s1 = harmony_layer_forward(Tensor(rand_volume(rng, (1, 1, 3, 3, 3))), p, q, "b")
        assert s0 is not s1
        assert not np.allclose(s0.mu.data, s1.mu.data)

    def test_double_queue_same_key_raises(self):
        q = StatsQueue()
        p = HarmonyParams.init(1)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 2, 2, 2)))
        harmony_layer_forward(x, p, q, "k")
        with pytest.raises(PairingError, match="'k'"):
            harmony_layer_forward(x, p, q, "k")

    def test_missing_stats_raises_with_key(self):
        q = StatsQueue()
        p = HarmonyParams.init(1)
        with pytest.raises(PairingError, match="'dec3'"):
            apply_restoration(Tensor(np.zeros((1, 1, 2, 2, 2))), p, q, "dec3")


class TestParamsValidation:
    def test_eps_positive(self):
        with pytest.raises(ConfigurationError):
            HarmonyParams.init(2, eps=0.0)

    def test_coefficient_extent_consistency(self):
        p = HarmonyParams.init(2, j_poly=2)
        with pytest.raises(ConfigurationError):
            HarmonyParams(w=p.w, b=p.b, lam=p.lam, gamma=p.gamma,
                          delta=Tensor(np.zeros((2, 3))), j_poly=2)

    def test_standard_init_values(self):
        p = HarmonyParams.init(3, j_poly=2)
        assert np.all(p.w.data == 1) and np.all(p.b.data == 0)
        assert np.all(p.lam.data == 0) and np.all(p.gamma.data == 0) and np.all(p.delta.data == 0)
