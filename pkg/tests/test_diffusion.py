"""Noise schedule, forward process, AdaGN denoiser, training objective and sampler."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usad.autodiff import Adam, Tensor, backward, ops
from usad.data import make_toy_dataset
from usad.diffusion import (TIME_DIM, DenoiserNet, ResBlock, adagn_modulate, balanced_labels, build_schedule,
                            denoising_loss, forward_diffuse, importance_weight, sample, step_weights,
                            synthesize_dataset, timestep_embedding, train_denoiser)
from usad.stats import MissingLabelError, PrototypeTable, condition_rows, condition_vectors, fit_prototypes


class TestSchedule:
    @pytest.mark.parametrize("T", [10, 100, 1000])
    def test_properties(self, T):
        sch = build_schedule(T, 0.008)
        assert sch.alpha_bar[0] == 1.0
        assert np.all(np.diff(sch.alpha_bar) < 0)
        assert np.all(sch.beta > 0) and np.all(sch.beta <= 0.999)
        assert np.all(np.isfinite(sch.w))
        assert sch.alpha_bar.shape == (T + 1,) and sch.beta.shape == sch.w.shape == (T,)

    def test_endpoint_is_cosine_zero(self):
        sch = build_schedule(1000, 0.008)
        expected = math.cos(math.pi / 2) / math.cos(math.pi / 2 * 0.008 / 1.008)
        assert abs(sch.alpha_bar[-1]) < 1e-12
        assert sch.alpha_bar[-1] == pytest.approx(expected, abs=1e-18)

    def test_ratio_form_values(self):
        sch = build_schedule(50)
        t = np.arange(51)
        ref = np.cos(np.pi / 2 * (t / 50 + 0.008) / 1.008) / np.cos(np.pi / 2 * 0.008 / 1.008)
        np.testing.assert_allclose(sch.alpha_bar[1:], ref[1:], rtol=1e-14)
        np.testing.assert_allclose(sch.beta, np.clip(1 - ref[1:] / ref[:-1], 0, 0.999), rtol=1e-12)

    def test_squared_variant(self):
        a, b = build_schedule(100), build_schedule(100, squared=True)
        assert b.squared and not a.squared
        assert np.all(b.alpha_bar[1:-1] < a.alpha_bar[1:-1])

    def test_first_weight_held_finite_by_floor(self):
        sch = build_schedule(50)
        assert sch.w[0] == pytest.approx(math.sqrt((1 - sch.alpha_bar[1]) / 1e-8), rel=1e-12)

    @pytest.mark.parametrize("T,s", [(0, 0.008), (10, 0.0), (10, 1.0), (2.5, 0.008)])
    def test_invalid(self, T, s):
        with pytest.raises(ValueError):
            build_schedule(T, s)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.0, 0.98))
    def test_weight_nonincreasing_in_alpha_bar(self, a, b, prev):
        lo, hi = sorted((a, b))
        assert importance_weight(hi, prev) <= importance_weight(lo, prev)

    def test_capped_weighting(self):
        sch = build_schedule(50)
        capped = step_weights(sch, "capped")
        assert capped.max() == sch.w[1:-1].max()
        np.testing.assert_array_equal(capped[1:-1], sch.w[1:-1])
        np.testing.assert_array_equal(step_weights(sch, "importance"), sch.w)
        with pytest.raises(ValueError):
            step_weights(sch, "nope")


class TestForwardDiffuse:
    def test_alpha_bar_one_limit(self):
        sch = build_schedule(100000)
        ab = sch.alpha_bar[1]
        assert ab > 1 - 1e-6
        x0, noise = np.array([1.0, -2.0]), np.array([0.3, 0.7])
        out = forward_diffuse(x0, 1, noise, sch)
        np.testing.assert_allclose(out, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise, rtol=1e-15)
        np.testing.assert_allclose(out, x0, atol=1e-3)

    def test_alpha_bar_zero_endpoint(self):
        sch = build_schedule(1000)
        x0, noise = np.array([5.0, -5.0]), np.array([0.3, 0.7])
        np.testing.assert_allclose(forward_diffuse(x0, 1000, noise, sch), noise, atol=1e-7)

    def test_monte_carlo_variance(self):
        sch = build_schedule(50)
        noise = np.random.default_rng(0).standard_normal(100000)
        var = forward_diffuse(np.zeros(100000), 20, noise, sch).var()
        assert abs(var / (1 - sch.alpha_bar[20]) - 1) < 0.02

    def test_superposition(self):
        sch = build_schedule(50)
        rng = np.random.default_rng(1)
        a, b, n1, n2 = (rng.standard_normal(16) for _ in range(4))
        lhs = forward_diffuse(a + 2 * b, 17, n1 + 2 * n2, sch)
        rhs = forward_diffuse(a, 17, n1, sch) + 2 * forward_diffuse(b, 17, n2, sch)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_per_sample_steps(self):
        sch = build_schedule(10)
        x0, noise = np.ones((2, 1, 4)), np.zeros((2, 1, 4))
        out = forward_diffuse(x0, np.array([1, 9]), noise, sch)
        np.testing.assert_allclose(out[1, 0], np.sqrt(sch.alpha_bar[9]))

    @pytest.mark.parametrize("t", [0, 11])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), t, np.zeros(3), build_schedule(10))


class TestEmbeddings:
    def test_sinusoidal_pairs(self):
        emb = timestep_embedding([7])[0]
        i = np.arange(TIME_DIM // 2)
        np.testing.assert_allclose(emb[0::2], np.sin(7 / 10000 ** (2 * i / TIME_DIM)), atol=1e-14)
        np.testing.assert_allclose(emb[1::2], np.cos(7 / 10000 ** (2 * i / TIME_DIM)), atol=1e-14)
        assert emb.shape == (128,)

    def test_deterministic(self):
        assert timestep_embedding([3, 4]).tobytes() == timestep_embedding([3, 4]).tobytes()


class TestAdaGN:
    def test_identity_modulation(self):
        h = Tensor(np.random.default_rng(0).standard_normal((2, 4, 6)))
        out = adagn_modulate(h, Tensor(np.ones((2, 4))), Tensor(np.zeros((2, 4))), 2)
        np.testing.assert_allclose(out.data, ops.group_norm(h, 2).data, rtol=1e-15)

    def test_zero_gamma_gives_beta(self):
        h = Tensor(np.random.default_rng(0).standard_normal((1, 4, 6)))
        beta = np.arange(4.0).reshape(1, 4)
        out = adagn_modulate(h, Tensor(np.zeros((1, 4))), Tensor(beta), 2)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta[..., None], (1, 4, 6)))

    def test_block_mlp_forced_to_identity(self):
        rng = np.random.default_rng(0)
        block = ResBlock(4, 8, 3, 2, rng)
        block.mlp_out.weight.data = np.zeros_like(block.mlp_out.weight.data)
        block.mlp_out.bias.data = np.r_[np.ones(4), np.zeros(4)]
        gamma, beta = block.modulation(Tensor(rng.standard_normal((3, 8))))
        np.testing.assert_array_equal(gamma.data, 1.0)
        np.testing.assert_array_equal(beta.data, 0.0)

    def test_unknown_label(self):
        net = DenoiserNet(1, 2, channels=8, blocks=1, groups=2)
        with pytest.raises(ValueError, match="unknown label"):
            net.embed(np.array([1]), np.array([2]))

    def test_output_shape(self):
        net = DenoiserNet(2, 3, channels=8, blocks=2, groups=2)
        out = net(Tensor(np.zeros((4, 2, 10))), np.array([1, 2, 3, 4]), Tensor(np.zeros((4, 8, 10))),
                  np.array([0, 1, 2, 0]))
        assert out.shape == (4, 2, 10)


class TestTraining:
    def test_zero_capacity_expected_loss(self):
        """Output conv is zero-initialized, so the loss at step t is w_t * E|eps|^2 = w_t * L."""
        sch = build_schedule(50)
        net = DenoiserNet(1, 2, channels=8, blocks=1, groups=2)
        rng = np.random.default_rng(0)
        n, L = 2000, 32
        x0 = rng.standard_normal((n, 1, L))
        cond = condition_rows(np.stack([condition_vectors(x) for x in x0]))
        for t in (2, 25, 49):
            noise = rng.standard_normal((n, 1, L))
            loss = denoising_loss(net, x0, cond, np.zeros(n, dtype=int), np.full(n, t), noise, sch, "importance")
            assert loss.item() == pytest.approx(sch.w[t - 1] * L, rel=0.03)

    def test_single_sample_monotone(self):
        sch = build_schedule(1)
        net = DenoiserNet(1, 1, seed=0, channels=8, blocks=1, groups=2)
        s = make_toy_dataset(2, 16, 1, seed=0)[0]
        x0, cond = s.x0[None], condition_rows(s.f[None])
        noise = np.random.default_rng(0).standard_normal(x0.shape)
        opt = Adam(net, lr=1e-3)
        trace = []
        for _ in range(50):
            loss = denoising_loss(net, x0, cond, np.array([0]), np.array([1]), noise, sch)
            trace.append(loss.item())
            opt.zero_grad()
            backward(loss)
            opt.step()
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_seed_reproducible_trace(self):
        data = make_toy_dataset(2, 16, 10, seed=0)
        sch = build_schedule(10)
        traces = []
        for _ in range(2):
            net = DenoiserNet(1, 2, seed=3, channels=8, blocks=1, groups=2)
            traces.append(train_denoiser(data, sch, net, 3, seed=5, batch_size=8))
        assert traces[0].step_loss == traces[1].step_loss
        assert all(math.isfinite(v) for v in traces[0].epoch_loss)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_denoiser([], build_schedule(10), DenoiserNet(1, 2, channels=8, blocks=1, groups=2), 1)

    def test_nan_aborts_with_epoch(self):
        data = make_toy_dataset(2, 16, 4, seed=0)
        net = DenoiserNet(1, 2, channels=8, blocks=1, groups=2)
        net.out.bias.data = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="epoch 0"):
            train_denoiser(data, build_schedule(10), net, 2)


class _Oracle:
    """Exact noise predictor for a single-point data distribution at ``x_star``."""

    in_channels = 1

    def __init__(self, sched, x_star):
        self.sched, self.x_star, self.calls = sched, x_star, 0

    def predict_noise(self, x_t, t, cond, y):
        self.calls += 1
        ab = self.sched.alpha_bar[t]
        return (x_t - np.sqrt(ab) * self.x_star) / np.sqrt(1 - ab)


def _proto(L=8, labels=(0,)):
    return PrototypeTable({y: np.zeros(4 * L) for y in labels}, {y: 1 for y in labels})


class TestSampling:
    def test_single_step_chain(self):
        sch = build_schedule(1)
        oracle = _Oracle(sch, np.zeros(8))
        sample(oracle, sch, [0], _proto(), rng_seed=0)
        assert oracle.calls == 1

    def test_delta_distribution_recovered(self):
        sch = build_schedule(50)
        x_star = np.sin(np.linspace(0, 3, 8))
        out = sample(_Oracle(sch, x_star), sch, [0, 0, 0], _proto(), rng_seed=4)
        np.testing.assert_allclose(out[:, 0], np.broadcast_to(x_star, (3, 8)), atol=1e-9)

    def test_balanced_labels_uniform(self):
        labels = balanced_labels(3 * 7, [2, 0, 1])
        assert np.bincount(labels).tolist() == [7, 7, 7]

    def test_unknown_label(self):
        sch = build_schedule(5)
        with pytest.raises(MissingLabelError):
            sample(_Oracle(sch, np.zeros(8)), sch, [3], _proto(), rng_seed=0)

    def test_bit_reproducible(self):
        data = make_toy_dataset(2, 16, 6, seed=0)
        sch = build_schedule(10)
        net = DenoiserNet(1, 2, seed=1, channels=8, blocks=1, groups=2)
        train_denoiser(data, sch, net, 1, batch_size=6)
        proto = fit_prototypes((s.f, s.y) for s in data)
        a = sample(net, sch, [0, 1], proto, rng_seed=9)
        b = sample(net, sch, [0, 1], proto, rng_seed=9)
        assert a.tobytes() == b.tobytes()

    def test_synthesize_one_per_class(self):
        sch = build_schedule(5)
        proto = _proto(labels=(0, 1, 2))
        out = synthesize_dataset(_Oracle(sch, np.zeros(8)), sch, proto, 3, seed=0)
        assert sorted(s.y for s in out) == [0, 1, 2]
        for s in out:
            assert s.source == "synthetic"
            assert s.f.shape == (1, 32)
            np.testing.assert_array_equal(s.f, condition_vectors(s.x0))

    def test_synthesize_needs_positive_M(self):
        sch = build_schedule(5)
        with pytest.raises(ValueError):
            synthesize_dataset(_Oracle(sch, np.zeros(8)), sch, _proto(), 0, seed=0)
