import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from galileo.envs import DomainError
from galileo.fdiv import (GAN, GENERATORS, estimate_ratio_transform, first_order_estimate, generator_f,
                          generator_f_prime, rearrangement_gap)
from galileo.models import discriminator_score


class TestGeneratorValues:
    def test_at_one(self):
        assert generator_f(1.0) == pytest.approx(-2 * math.log(2), abs=1e-12)

    def test_at_two(self):
        assert generator_f(2.0) == pytest.approx(-1.909543, abs=1e-6)
        assert generator_f(2.0) == pytest.approx(2 * math.log(2) - 3 * math.log(3), abs=1e-12)

    def test_near_zero_limit(self):
        assert abs(generator_f(1e-12)) < 1e-9

    def test_derivative_values(self):
        assert generator_f_prime(1.0) == pytest.approx(math.log(0.5), abs=1e-12)
        assert generator_f_prime(3.0) == pytest.approx(-0.287682, abs=1e-6)

    @pytest.mark.parametrize("u", [0.0, -1.0, np.nan])
    def test_domain(self, u):
        with pytest.raises(DomainError):
            generator_f(u)
        with pytest.raises(DomainError):
            generator_f_prime(u)

    def test_vectorized(self):
        u = np.array([0.5, 1.0, 2.0])
        assert_allclose(generator_f(u), [generator_f(v) for v in u])


class TestGeneratorProperties:
    grid = np.logspace(-3, 3, 400)

    @pytest.mark.parametrize("name", sorted(GENERATORS))
    def test_midpoint_convexity(self, name):
        f = GENERATORS[name].f
        a, b = self.grid[:-1], self.grid[1:]
        # pair each point with a far one as well
        for lo, hi in ((a, b), (self.grid[:200], self.grid[200:])):
            assert np.all(f((lo + hi) / 2) <= (f(lo) + f(hi)) / 2 + 1e-9)

    @pytest.mark.parametrize("name", sorted(GENERATORS))
    def test_derivative_matches_finite_difference(self, name):
        g = GENERATORS[name]
        u = self.grid
        h = 1e-5 * u
        fd = (g.f(u + h) - g.f(u - h)) / (2 * h)
        assert_allclose(g.f_prime(u), fd, rtol=1e-6, atol=1e-9)

    @given(st.floats(min_value=1e-6, max_value=100.0, exclude_min=True))
    def test_gan_derivative_negative(self, u):
        assert generator_f_prime(u) < 0

    def test_gan_derivative_random_batch(self):
        u = np.random.default_rng(0).uniform(0, 100, 1000) + 1e-12
        assert np.all(generator_f_prime(u) < 0)

    def test_nonpositive_table(self):
        u = np.logspace(-4, 4, 2000)
        for g in GENERATORS.values():
            assert g.nonpositive_derivative() == bool(np.all(g.f_prime(u) <= 0)), g.name

    def test_conjugate_pair(self):
        d = np.linspace(0.01, 0.99, 50)
        assert_allclose(GAN.T(d), np.log(d))
        assert_allclose(GAN.conjugate_T(d), np.log(1 - d))
        # at the optimum D = u / (1 + u): T = f'(u)
        u = d / (1 - d)
        assert_allclose(GAN.T(d), generator_f_prime(u), atol=1e-12)

    @pytest.mark.parametrize("u", np.linspace(0.9, 1.1, 21))
    def test_first_order_error(self, u):
        err = abs(generator_f(u) - first_order_estimate(GAN, u))
        assert err <= 2 * (u - 1) ** 2 + 1e-15


class TestRatioTransform:
    def test_gaussian_pair(self):
        rng = np.random.default_rng(0)
        p = rng.normal(0.0, 1.0, 10_000)
        q = rng.normal(0.5, 1.0, 10_000)
        d = estimate_ratio_transform(p, q, 1500, rng, hidden=(64, 64), lr=3e-3)
        xs = np.linspace(-2, 2, 101)
        est = np.log(discriminator_score(d, xs[:, None]))
        dens_p = np.exp(-0.5 * xs ** 2)
        dens_q = np.exp(-0.5 * (xs - 0.5) ** 2)
        assert np.mean(np.abs(est - np.log(dens_p / (dens_p + dens_q)))) <= 0.1

    def test_equal_sources(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=4000)
        d = estimate_ratio_transform(s, s.copy(), 300, rng, hidden=(32,), lr=1e-3)
        out = discriminator_score(d, s[:, None])
        assert abs(out.mean() - 0.5) < 0.05

    def test_separated_point_masses(self):
        rng = np.random.default_rng(2)
        d = estimate_ratio_transform(np.zeros(500), np.full(500, 5.0), 500, rng, hidden=(32,), lr=1e-2)
        assert discriminator_score(d, [[0.0]])[0] > 0.99
        assert discriminator_score(d, [[5.0]])[0] < 0.01
        assert discriminator_score(d, [[5.0]])[0] >= 1e-6

    def test_empty(self):
        with pytest.raises(ValueError):
            estimate_ratio_transform(np.zeros(0), np.zeros(3), 1, np.random.default_rng(0))

    def test_sup_error_shrinks_with_training(self):
        xs = np.linspace(-1.5, 2.0, 61)
        p_d, q_d = np.exp(-0.5 * xs ** 2), np.exp(-0.5 * (xs - 0.5) ** 2)
        truth = p_d / (p_d + q_d)
        errs = {}
        for steps in (5, 600):
            vals = []
            for seed in range(3):
                rng = np.random.default_rng(seed)
                p, q = rng.normal(0, 1, 5000), rng.normal(0.5, 1, 5000)
                d = estimate_ratio_transform(p, q, steps, rng, hidden=(32, 32), lr=3e-3)
                vals.append(np.max(np.abs(discriminator_score(d, xs[:, None]) - truth)))
            errs[steps] = np.mean(vals)
        assert errs[600] < errs[5]


class TestRearrangementGap:
    def test_constant_sequence(self):
        w = np.full(4, 0.25)
        assert rearrangement_gap(w, np.full(4, 3.0), np.array([1.0, 2, 5, 9])) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        w = np.full(3, 1 / 3)
        assert rearrangement_gap(w, [1.0, 2, 3], [1.0, 2, 3]) == pytest.approx(2 / 3, abs=1e-12)

    @pytest.mark.parametrize("w,F,G", [
        ([0.5, 0.5], [1.0], [1.0]),
        ([1.5, -0.5], [1.0, 2.0], [1.0, 2.0]),
        ([0.5, 0.4], [1.0, 2.0], [1.0, 2.0]),
    ])
    def test_preconditions(self, w, F, G):
        with pytest.raises(ValueError):
            rearrangement_gap(w, F, G)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 2 ** 32 - 1))
    def test_comonotone_nonnegative(self, n, seed):
        rng = np.random.default_rng(seed)
        w = rng.dirichlet(np.ones(n))
        F = np.sort(rng.normal(size=n))
        G = np.sort(rng.normal(size=n))
        assert rearrangement_gap(w, F, G) >= -1e-9
