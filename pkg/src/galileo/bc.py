"""Conditional Gaussians and behavior cloning of the intermediary policy.

:class:`GaussianConditional` is used in three roles: the behavior-cloned
policy ``kappa(a|x)``, the IPW propensity model, and the environment model
``M(y|x, a)``. Inputs and outputs are standardized internally with fixed
statistics taken from the training data, so callers always work in raw units.
"""

from __future__ import annotations

import math
import os
from typing import Sequence

import numpy as np
import torch
from torch import nn

LOG_2PI = math.log(2 * math.pi)


def torch_generator(rng) -> torch.Generator:
    """A torch generator seeded from a numpy ``Generator``."""
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2 ** 62)))
    return g


def mlp(in_dim: int, out_dim: int, hidden: Sequence[int], activation: str = "tanh") -> nn.Sequential:
    act = {"tanh": nn.Tanh, "relu": nn.ReLU}[activation]
    layers, prev = [], in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), act()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float32)
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


class GaussianConditional(nn.Module):
    """Diagonal Gaussian ``N(mean(z), diag(std(z)^2))`` with ``std >= std_floor``."""

    def __init__(self, input_dim: int, output_dim: int = 1, hidden=(256, 256, 256, 256),
                 activation: str = "tanh", std_floor: float = 1e-3, init_std: float = 1.0,
                 state_dependent_std: bool = False, seed: int = 0):
        super().__init__()
        if std_floor <= 0:
            raise ValueError("std_floor must be > 0")
        self.arch = dict(input_dim=input_dim, output_dim=output_dim, hidden=list(hidden),
                         activation=activation, std_floor=float(std_floor), init_std=float(init_std),
                         state_dependent_std=state_dependent_std, seed=seed)
        self.input_dim, self.output_dim = input_dim, output_dim
        self.std_floor = float(std_floor)
        self.state_dependent_std = state_dependent_std
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            n_out = output_dim * (2 if state_dependent_std else 1)
            self.net = mlp(input_dim, n_out, hidden, activation)
            with torch.no_grad():
                self.net[-1].weight.mul_(0.01)
                self.net[-1].bias.zero_()
        self.log_std = nn.Parameter(torch.full((output_dim,), math.log(init_std)))
        self.register_buffer("in_mean", torch.zeros(input_dim))
        self.register_buffer("in_scale", torch.ones(input_dim))
        self.register_buffer("out_mean", torch.zeros(output_dim))
        self.register_buffer("out_scale", torch.ones(output_dim))

    # -- normalization -----------------------------------------------------

    def set_normalization(self, inputs, outputs=None):
        z = as_tensor(inputs).reshape(-1, self.input_dim)
        self.in_mean.copy_(z.mean(0))
        self.in_scale.copy_(z.std(0).clamp_min(1e-6) if len(z) > 1 else torch.ones(self.input_dim))
        if outputs is not None:
            o = as_tensor(outputs).reshape(-1, self.output_dim)
            self.out_mean.copy_(o.mean(0))
            self.out_scale.copy_(o.std(0).clamp_min(1e-6) if len(o) > 1 else torch.ones(self.output_dim))
        return self

    # -- distribution ------------------------------------------------------

    def forward(self, z: torch.Tensor):
        """Raw-unit ``(mean, std)`` for raw-unit inputs ``z`` of shape ``(n, input_dim)``."""
        h = self.net((z - self.in_mean) / self.in_scale)
        if self.state_dependent_std:
            h, log_std = h[:, :self.output_dim], h[:, self.output_dim:] + self.log_std
        else:
            log_std = self.log_std.expand(h.shape[0], -1)
        mean = h * self.out_scale + self.out_mean
        std = (log_std.exp() * self.out_scale).clamp_min(self.std_floor)
        return mean, std

    def log_prob(self, z, target) -> torch.Tensor:
        mean, std = self(as_tensor(z))
        target = as_tensor(target).reshape(mean.shape)
        return (-0.5 * ((target - mean) / std) ** 2 - std.log() - 0.5 * LOG_2PI).sum(-1)

    def entropy(self, z) -> torch.Tensor:
        _, std = self(as_tensor(z))
        return (0.5 * (LOG_2PI + 1.0) + std.log()).sum(-1)

    def kl_from(self, z, old_mean, old_std) -> torch.Tensor:
        """Per-row ``KL(old || self)`` for diagonal Gaussians."""
        mean, std = self(as_tensor(z))
        kl = (std.log() - old_std.log()
              + (old_std ** 2 + (old_mean - mean) ** 2) / (2 * std ** 2) - 0.5)
        return kl.sum(-1)

    # -- numpy conveniences ------------------------------------------------

    @staticmethod
    def model_input(x, a):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.column_stack([x, np.asarray(a, dtype=np.float64).reshape(-1)])

    @torch.no_grad()
    def mean_std(self, z):
        mean, std = self(as_tensor(z))
        return mean.double().numpy(), std.double().numpy()

    @torch.no_grad()
    def sample(self, z, rng):
        mean, std = self(as_tensor(z))
        eps = torch.randn(mean.shape, generator=torch_generator(rng))
        return (mean + std * eps).double().numpy()

    def predict_response(self, x, a):
        """Conditional mean of the first output given state ``x`` and action ``a``."""
        return self.mean_std(self.model_input(x, a))[0][:, 0]

    def sample_response(self, x, a, rng):
        return self.sample(self.model_input(x, a), rng)[:, 0]

    def sample_action(self, x, rng):
        return self.sample(np.atleast_2d(x), rng)[:, 0]

    # -- checkpoints -------------------------------------------------------

    def save(self, path, extra=None):
        save_checkpoint(self, path, "gaussian_conditional", extra)


def save_checkpoint(module: nn.Module, path, kind: str, extra=None):
    payload = {"kind": kind, "arch": module.arch, "state_dict": module.state_dict(), "extra": extra or {}}
    tmp = os.fspath(path) + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild a :class:`GaussianConditional` or ``Discriminator`` from a checkpoint."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    kind = payload["kind"]
    if kind == "gaussian_conditional":
        module = GaussianConditional(**payload["arch"])
    elif kind == "discriminator":
        from .models import Discriminator
        module = Discriminator(**payload["arch"])
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    module.load_state_dict(payload["state_dict"])
    return module


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def gaussian_log_prob(model: GaussianConditional, z, value) -> np.ndarray:
    """Exact diagonal-Gaussian log-density of ``value`` given inputs ``z``."""
    with torch.no_grad():
        return model.log_prob(np.atleast_2d(z), np.asarray(value, dtype=float)).double().numpy()


def gaussian_entropy(model: GaussianConditional, z) -> np.ndarray:
    """Closed-form entropy ``sum 0.5 log(2 pi e sigma^2)`` at inputs ``z``."""
    with torch.no_grad():
        return model.entropy(np.atleast_2d(z)).double().numpy()


def fit_gaussian(model: GaussianConditional, inputs, targets, steps: int, rng, lr: float = 3e-4,
                 batch_size: int = 5000, weights=None, on_step=None) -> list:
    """Maximize (optionally weighted) average log-likelihood with Adam; returns per-step losses."""
    z = as_tensor(inputs)
    y = as_tensor(targets).reshape(len(z), -1)
    w = None if weights is None else as_tensor(weights).reshape(-1)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch_generator(rng)
    n, losses = len(z), []
    for step in range(steps):
        idx = torch.randint(n, (min(batch_size, n),), generator=gen) if batch_size < n else slice(None)
        lp = model.log_prob(z[idx], y[idx])
        loss = -(lp * w[idx]).mean() if w is not None else -lp.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, model)
    return losses


def fit_behavior_policy(data, std_floor: float, steps: int, rng, hidden=(256, 256, 256, 256),
                        lr: float = 3e-4, batch_size: int = 5000, activation: str = "tanh",
                        on_step=None) -> GaussianConditional:
    """Behavior-clone ``a | x`` with a Gaussian whose std never drops below ``std_floor``."""
    if len(data) == 0:
        raise ValueError("cannot fit a behavior policy on an empty dataset")
    if std_floor <= 0:
        raise ValueError("std_floor must be > 0")
    policy = GaussianConditional(data.state_dim, 1, hidden, activation, std_floor=std_floor,
                                 seed=int(rng.integers(0, 2 ** 31)))
    policy.set_normalization(data.x, data.a)
    fit_gaussian(policy, data.x, data.a, steps, rng, lr=lr, batch_size=batch_size, on_step=on_step)
    return policy
