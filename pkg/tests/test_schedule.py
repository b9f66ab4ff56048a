"""Schedule tables, the noising operator, and timestep embeddings.

Expected values are produced by independent oracles: mpmath extended-precision
products for the cumulative table and direct trigonometric evaluation for the
embeddings.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from terradiff.schedule import (
    NoiseSchedule,
    make_linear_schedule,
    q_sample,
    timestep_embedding,
)


def alpha_bar_oracle(timesteps: int, beta_start: float, beta_end: float) -> np.ndarray:
    """Cumulative products accumulated at 50 significant digits."""
    with mpmath.workdps(50):
        betas = [
            mpmath.mpf(beta_start)
            + (mpmath.mpf(beta_end) - mpmath.mpf(beta_start)) * i / (timesteps - 1)
            for i in range(timesteps)
        ]
        acc = mpmath.mpf(1)
        out = [mpmath.mpf(1)]
        for b in betas:
            acc *= 1 - b
            out.append(acc)
        return np.array([float(v) for v in out], dtype=np.float64)


class TestLinearSchedule:
    def test_default_shapes_and_endpoints(self):
        sched = make_linear_schedule()
        assert sched.timesteps == 1000
        assert sched.beta.shape == (1000,)
        assert sched.alpha_bar.shape == (1001,)
        assert sched.beta[0] == pytest.approx(1e-4, rel=0, abs=0)
        assert sched.beta[-1] == pytest.approx(0.02, rel=0, abs=0)
        assert sched.alpha_bar[0] == 1.0

    @pytest.mark.parametrize("timesteps", [10, 100, 1000])
    def test_alpha_bar_matches_extended_precision_oracle(self, timesteps):
        sched = make_linear_schedule(timesteps=timesteps)
        oracle = alpha_bar_oracle(timesteps, 1e-4, 0.02)
        np.testing.assert_allclose(sched.alpha_bar, oracle, rtol=1e-12, atol=0)

    def test_alpha_bar_strictly_decreasing_and_positive(self):
        sched = make_linear_schedule()
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert np.all(sched.alpha_bar > 0)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            make_linear_schedule(timesteps=0)
        with pytest.raises(ValueError):
            make_linear_schedule(beta_start=0.0)
        with pytest.raises(ValueError):
            make_linear_schedule(beta_start=0.5, beta_end=0.1)
        with pytest.raises(ValueError):
            make_linear_schedule(beta_end=1.0)

    def test_constructor_validates_tables(self):
        sched = make_linear_schedule(timesteps=8)
        bad = sched.alpha_bar.copy()
        bad[0] = 0.5
        with pytest.raises(ValueError):
            NoiseSchedule(timesteps=8, beta=sched.beta, alpha_bar=bad)
        with pytest.raises(ValueError):
            NoiseSchedule(timesteps=8, beta=sched.beta[:4], alpha_bar=sched.alpha_bar)


class TestQSample:
    def test_t0_returns_clean_image(self):
        sched = make_linear_schedule(timesteps=20)
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(4, 3, 8, 8))
        eps = rng.normal(size=(4, 3, 8, 8))
        np.testing.assert_array_equal(q_sample(x0, 0, eps, sched), x0)

    def test_matches_manual_combination(self):
        sched = make_linear_schedule(timesteps=50)
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(2, 3, 4, 4))
        eps = rng.normal(size=(2, 3, 4, 4))
        t = 17
        expected = (
            math.sqrt(sched.alpha_bar[t]) * x0
            + math.sqrt(1.0 - sched.alpha_bar[t]) * eps
        )
        np.testing.assert_allclose(q_sample(x0, t, eps, sched), expected, rtol=1e-15)

    def test_per_item_timesteps(self):
        sched = make_linear_schedule(timesteps=50)
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(3, 2, 4, 4))
        eps = rng.normal(size=(3, 2, 4, 4))
        t = np.array([0, 25, 50])
        got = q_sample(x0, t, eps, sched)
        for i, ti in enumerate(t):
            np.testing.assert_allclose(got[i], q_sample(x0[i], int(ti), eps[i], sched))

    def test_torch_and_numpy_agree(self):
        sched = make_linear_schedule(timesteps=30)
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        eps = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        a = q_sample(x0, 12, eps, sched)
        b = q_sample(torch.from_numpy(x0), 12, torch.from_numpy(eps), sched).numpy()
        np.testing.assert_allclose(a, b, rtol=1e-6)

    def test_rejects_bad_inputs(self):
        sched = make_linear_schedule(timesteps=10)
        x0 = np.zeros((2, 3, 4, 4))
        with pytest.raises(ValueError):
            q_sample(x0, 11, np.zeros_like(x0), sched)
        with pytest.raises(ValueError):
            q_sample(x0, -1, np.zeros_like(x0), sched)
        with pytest.raises(ValueError):
            q_sample(x0, 3, np.zeros((2, 3, 4, 5)), sched)
        with pytest.raises(TypeError):
            q_sample(x0, 3, torch.zeros(2, 3, 4, 4), sched)
        with pytest.raises(ValueError):
            q_sample(x0, np.array([1, 2, 3]), np.zeros_like(x0), sched)

    def test_monte_carlo_moments(self):
        # Mean sqrt(ab_t) x0 and variance (1 - ab_t) per pixel, checked to
        # three standard errors with 10k draws.
        sched = make_linear_schedule()
        rng = np.random.default_rng(1234)
        x0 = rng.uniform(-1.0, 1.0, size=(2, 2))
        n = 10_000
        for t in (1, 250, 500, 750, 1000):
            eps = rng.standard_normal(size=(n,) + x0.shape)
            xt = q_sample(np.broadcast_to(x0, (n,) + x0.shape).copy(), np.full(n, t), eps, sched)
            var = 1.0 - sched.alpha_bar[t]
            mean_se = math.sqrt(var / n)
            var_se = var * math.sqrt(2.0 / (n - 1))
            assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(sched.alpha_bar[t]) * x0) < 3 * mean_se)
            assert np.all(np.abs(xt.var(axis=0) - var) < 3 * var_se)

    @settings(max_examples=25, deadline=None)
    @given(
        t=st.integers(min_value=0, max_value=40),
        scale=st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
    )
    def test_linearity_in_inputs(self, t, scale):
        sched = make_linear_schedule(timesteps=40)
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(3, 3))
        eps = rng.normal(size=(3, 3))
        lhs = q_sample(scale * x0, t, scale * eps, sched)
        rhs = scale * q_sample(x0, t, eps, sched)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestTimestepEmbedding:
    def test_structure_matches_direct_evaluation(self):
        dim = 16
        half = dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        for t in (0, 1, 57, 1000):
            got = timestep_embedding(t, dim, dtype=torch.float64).numpy()
            np.testing.assert_allclose(got[:half], np.sin(t * freqs), rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(got[half:], np.cos(t * freqs), rtol=1e-12, atol=1e-12)

    def test_t0_is_zeros_then_ones(self):
        got = timestep_embedding(0, 8)
        assert torch.equal(got[:4], torch.zeros(4))
        assert torch.equal(got[4:], torch.ones(4))

    def test_adjacent_timesteps_separated(self):
        a = timestep_embedding(1, 64)
        b = timestep_embedding(2, 64)
        assert torch.linalg.norm(a - b).item() > 1e-6

    def test_distinct_over_full_range(self):
        emb = timestep_embedding(torch.arange(0, 1001), 64, dtype=torch.float64)
        seen = {row.numpy().tobytes() for row in emb}
        assert len(seen) == 1001

    def test_batch_matches_scalar(self):
        ts = torch.tensor([0, 3, 999])
        batched = timestep_embedding(ts, 32)
        for i, t in enumerate(ts.tolist()):
            assert torch.equal(batched[i], timestep_embedding(t, 32))

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            timestep_embedding(1, 7)
        with pytest.raises(ValueError):
            timestep_embedding(1, 0)
        with pytest.raises(TypeError):
            timestep_embedding(torch.tensor(0.5), 8)
