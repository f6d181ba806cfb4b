import numpy as np
import pytest
import torch
from numpy.testing import assert_array_equal

from galileo.envs import TrajectoryDataset
from galileo.models import (ContractError, Discriminator, bce_accuracy, discriminator_score,
                            joint_features, make_discriminator_pair, train_discriminator,
                            train_discriminator_pair)

SMALL = (32, 32)


def make_data(x, a, xn):
    n = len(a)
    return TrajectoryDataset(x, a, np.zeros(n), xn, np.arange(n), np.zeros(n, dtype=int))


class TestScore:
    def test_deterministic_without_noise(self):
        d = Discriminator(3, "joint", SMALL, input_noise_std=0.0)
        z = np.random.default_rng(0).normal(size=(5, 3))
        assert_array_equal(discriminator_score(d, z), discriminator_score(d, z))

    def test_noise_propagates(self):
        d = Discriminator(3, "joint", SMALL, input_noise_std=0.005)
        with torch.no_grad():
            d.net[-1].weight.mul_(100)
        z = np.tile([[0.1, 0.2, 0.3]], (10_000, 1))
        out = discriminator_score(d, z, np.random.default_rng(0), noisy=True)
        assert out.std() > 0

    def test_fresh_outputs_near_half(self):
        d = Discriminator(4, "joint", (256,) * 4)
        z = np.random.default_rng(0).normal(size=(1000, 4))
        assert abs(discriminator_score(d, z).mean() - 0.5) < 0.2

    def test_arity_mismatch(self):
        d = Discriminator(3, "marginal", SMALL)
        with pytest.raises(ContractError):
            discriminator_score(d, np.zeros((2, 4)))

    def test_clamp(self):
        d = Discriminator(1, "generic", SMALL)
        with torch.no_grad():
            d.net[-1].bias.fill_(1e4)
        assert np.all(np.isfinite(d.log_one_minus_d([[0.0]]).detach().numpy()))
        with torch.no_grad():
            d.net[-1].bias.fill_(-1e4)
        assert np.all(np.isfinite(d.log_d([[0.0]]).detach().numpy()))
        assert discriminator_score(d, [[0.0]])[0] == pytest.approx(1e-6)


class TestTraining:
    def test_indistinguishable(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2000, 1))
        data = make_data(x, rng.normal(size=2000), x + 1)
        d0, d1 = make_discriminator_pair(data, SMALL, noise_std=0.01, rng=rng)
        train_discriminator_pair(d0, d1, data, data, 200, rng, batch_size=1000)
        pooled = joint_features(data)
        assert abs(discriminator_score(d0, pooled).mean() - 0.5) < 0.05

    def test_separable(self):
        rng = np.random.default_rng(1)
        real = rng.normal(-3, 0.5, (1000, 2))
        fake = rng.normal(3, 0.5, (1000, 2))
        d = Discriminator(2, "generic", SMALL, lr=1e-3).set_normalization(np.vstack([real, fake]))
        train_discriminator(d, real, fake, 200, rng, batch_size=500, noisy=False)
        assert bce_accuracy(d, real, fake) > 0.95

    def test_loss_decreases_on_separable(self):
        losses_by_seed = []
        for seed in range(3):
            rng = np.random.default_rng(seed)
            real = rng.normal(-1, 0.5, (600, 2))
            fake = rng.normal(1, 0.5, (600, 2))
            d = Discriminator(2, "generic", SMALL, lr=1e-3, seed=seed).set_normalization(np.vstack([real, fake]))
            losses_by_seed.append([train_discriminator(d, real, fake, 10, rng, noisy=False) for _ in range(3)])
        med = np.median(np.array(losses_by_seed), axis=0)
        assert med[0] > med[1] > med[2]

    def test_empty(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 1))
        data = make_data(x, np.zeros(5), x)
        empty = data.subset(np.array([], dtype=int))
        d0, d1 = make_discriminator_pair(data, SMALL, rng=rng)
        with pytest.raises(ValueError):
            train_discriminator_pair(d0, d1, data, empty, 1, rng)

    def test_marginal_ignores_next_state(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 2))
        data = make_data(x, np.zeros(10), x)
        d0, d1 = make_discriminator_pair(data, SMALL, rng=rng)
        assert d0.input_dim == 5 and d1.input_dim == 3
        assert d0.arity == "joint" and d1.arity == "marginal"
