"""Discriminators for the joint ``(x, a, x')`` and marginal ``(x, a)`` distributions."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .bc import as_tensor, mlp, save_checkpoint, torch_generator

CLAMP_LO, CLAMP_HI = 1e-6, 1.0 - 1e-6


class ContractError(ValueError):
    pass


def joint_features(data) -> np.ndarray:
    return np.column_stack([data.x, data.a, data.x_next])


def marginal_features(data) -> np.ndarray:
    return np.column_stack([data.x, data.a])


class Discriminator(nn.Module):
    """Probability that an input came from the real data (label 1) rather than the model (label 0)."""

    def __init__(self, input_dim: int, arity: str = "joint", hidden=(256, 256, 256, 256),
                 activation: str = "tanh", input_noise_std: float = 0.0, lr: float = 3e-4, seed: int = 0):
        super().__init__()
        if arity not in ("joint", "marginal", "generic"):
            raise ValueError(f"unknown arity {arity!r}")
        self.arch = dict(input_dim=input_dim, arity=arity, hidden=list(hidden), activation=activation,
                         input_noise_std=float(input_noise_std), lr=lr, seed=seed)
        self.input_dim, self.arity = input_dim, arity
        self.input_noise_std = float(input_noise_std)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = mlp(input_dim, 1, hidden, activation)
            with torch.no_grad():
                self.net[-1].weight.mul_(0.01)
                self.net[-1].bias.zero_()
        self.register_buffer("in_mean", torch.zeros(input_dim))
        self.register_buffer("in_scale", torch.ones(input_dim))
        self.lr = lr
        self._opt = None

    @property
    def optimizer(self):
        if self._opt is None:
            self._opt = torch.optim.Adam(self.parameters(), lr=self.lr)
        return self._opt

    def set_normalization(self, inputs):
        z = as_tensor(inputs)
        self.in_mean.copy_(z.mean(0))
        self.in_scale.copy_(z.std(0).clamp_min(1e-6))
        return self

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.net((z - self.in_mean) / self.in_scale).squeeze(-1)

    def _check(self, z):
        if z.ndim != 2 or z.shape[1] != self.input_dim:
            raise ContractError(f"{self.arity} discriminator expects inputs of width {self.input_dim}, "
                                f"got shape {tuple(z.shape)}")

    def perturb(self, z: torch.Tensor, gen) -> torch.Tensor:
        if self.input_noise_std == 0:
            return z
        return z + self.input_noise_std * torch.randn(z.shape, generator=gen)

    def prob(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(z)).clamp(CLAMP_LO, CLAMP_HI)

    def log_d(self, z) -> torch.Tensor:
        return self.prob(as_tensor(z)).log()

    def log_one_minus_d(self, z) -> torch.Tensor:
        return (1 - self.prob(as_tensor(z))).log()

    def save(self, path, extra=None):
        save_checkpoint(self, path, "discriminator", extra)


def discriminator_score(d: Discriminator, inputs, rng=None, noisy: bool = False) -> np.ndarray:
    """Clamped probabilities; with ``noisy`` each coordinate gets ``N(0, eps_D)`` noise first."""
    z = as_tensor(np.atleast_2d(inputs))
    d._check(z)
    with torch.no_grad():
        if noisy:
            z = d.perturb(z, torch_generator(rng))
        return d.prob(z).double().numpy()


def discriminator_loss(d: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Negated objective ``-(E_real[log D] + E_fake[log(1 - D)])`` on clamped outputs."""
    return -(d.prob(real).log().mean() + (1 - d.prob(fake)).log().mean())


def train_discriminator(d: Discriminator, real, fake, steps: int, rng, batch_size: int = 5000,
                        noisy: bool = True) -> float:
    """``steps`` Adam ascent steps on balanced mini-batches; returns the last loss."""
    real, fake = as_tensor(real), as_tensor(fake)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("discriminator training needs non-empty real and generated sets")
    d._check(real)
    d._check(fake)
    gen = torch_generator(rng)
    half = min(batch_size, len(real), len(fake))
    loss = float("nan")
    for _ in range(steps):
        r = real[torch.randperm(len(real), generator=gen)[:half]] if half < len(real) else real
        f = fake[torch.randperm(len(fake), generator=gen)[:half]] if half < len(fake) else fake
        if noisy:
            r, f = d.perturb(r, gen), d.perturb(f, gen)
        out = discriminator_loss(d, r, f)
        d.optimizer.zero_grad()
        out.backward()
        d.optimizer.step()
        loss = out.item()
    return loss


def train_discriminator_pair(d0: Discriminator, d1: Discriminator, real, generated, steps: int, rng,
                             batch_size: int = 5000, noisy: bool = True):
    """Update the joint (``d0``) and marginal (``d1``) discriminators; returns ``(loss0, loss1)``."""
    if len(real) == 0 or len(generated) == 0:
        raise ValueError("discriminator training needs non-empty real and generated datasets")
    loss0 = train_discriminator(d0, joint_features(real), joint_features(generated), steps, rng,
                                batch_size, noisy)
    loss1 = train_discriminator(d1, marginal_features(real), marginal_features(generated), steps, rng,
                                batch_size, noisy)
    return loss0, loss1


def make_discriminator_pair(real, hidden=(256, 256, 256, 256), activation="tanh", noise_std=0.0,
                            lr=3e-4, rng=None):
    """Fresh ``(d0, d1)`` normalized on the real dataset."""
    seeds = (0, 1) if rng is None else tuple(int(s) for s in rng.integers(0, 2 ** 31, size=2))
    j, m = joint_features(real), marginal_features(real)
    d0 = Discriminator(j.shape[1], "joint", hidden, activation, noise_std, lr, seeds[0]).set_normalization(j)
    d1 = Discriminator(m.shape[1], "marginal", hidden, activation, noise_std, lr, seeds[1]).set_normalization(m)
    return d0, d1


def bce_accuracy(d: Discriminator, real, fake) -> float:
    pr = discriminator_score(d, real)
    pf = discriminator_score(d, fake)
    return float((np.sum(pr > 0.5) + np.sum(pf <= 0.5)) / (len(pr) + len(pf)))


__all__ = ["Discriminator", "ContractError", "discriminator_score", "train_discriminator",
           "train_discriminator_pair", "make_discriminator_pair", "joint_features", "marginal_features",
           "discriminator_loss", "bce_accuracy"]
