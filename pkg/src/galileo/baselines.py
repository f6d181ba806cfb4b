"""Supervised and inverse-propensity-weighted environment models."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .bc import GaussianConditional, as_tensor, gaussian_log_prob, torch_generator
from .envs import TrajectoryDataset

log = logging.getLogger(__name__)


@dataclass
class BaselineConfig:
    steps: int = 5000
    learning_rate: float = 3e-4
    batch_size: int = 256
    hidden: tuple = (256, 256, 256, 256)
    activation: str = "tanh"
    std_floor: float = 1e-3
    w_max: float = 100.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _regression_model(data: TrajectoryDataset, config: BaselineConfig, seed: int) -> GaussianConditional:
    z = GaussianConditional.model_input(data.x, data.a)
    model = GaussianConditional(z.shape[1], 1, config.hidden, config.activation,
                                std_floor=config.std_floor, seed=seed)
    return model.set_normalization(z, data.y)


def _fit_weighted_mse(model: GaussianConditional, data: TrajectoryDataset, weights, config, rng):
    """Adam on ``mean(w * ((y - mean) / out_scale)^2)``; the std is set to the residual std afterwards."""
    z = as_tensor(GaussianConditional.model_input(data.x, data.a))
    y = as_tensor(data.y).reshape(-1, 1)
    w = as_tensor(weights).reshape(-1, 1)
    params = list(model.net.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    gen = torch_generator(rng)
    n = len(z)
    losses = []
    for _ in range(config.steps):
        idx = torch.randint(n, (min(config.batch_size, n),), generator=gen)
        mean, _ = model(z[idx])
        loss = (w[idx] * ((y[idx] - mean) / model.out_scale) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    with torch.no_grad():
        mean, _ = model(z)
        resid_std = torch.sqrt(((y - mean) ** 2).mean()).clamp_min(config.std_floor)
        model.log_std.copy_(torch.log(resid_std / model.out_scale))
    model.train_losses = losses
    return model


def train_sl(data: TrajectoryDataset, config: BaselineConfig, rng) -> GaussianConditional:
    """Plain regression of the response on ``(x, a)``, blind to selection bias."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = _regression_model(data, config, int(rng.integers(0, 2 ** 31)))
    return _fit_weighted_mse(model, data, np.ones(len(data)), config, rng)


def ipw_weights(data: TrajectoryDataset, behavior, w_max: float) -> np.ndarray:
    """``min(1 / mu_hat(a | x), w_max)`` from the behavior model's Gaussian density."""
    if w_max <= 0:
        raise ValueError("w_max must be > 0")
    if hasattr(behavior, "density"):
        dens = np.asarray(behavior.density(data.x, data.a), dtype=float)
    else:
        dens = np.exp(gaussian_log_prob(behavior, data.x, data.a))
    with np.errstate(divide="ignore"):
        w = np.where(dens > 0, 1.0 / np.maximum(dens, 1e-300), np.inf)
    return np.minimum(w, w_max)


def train_ipw(data: TrajectoryDataset, behavior, w_max: float, config: BaselineConfig, rng) -> GaussianConditional:
    """Regression re-weighted by clipped inverse propensities."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    w = ipw_weights(data, behavior, w_max)
    clipped = float(np.mean(w >= w_max))
    log.info("ipw: %.1f%% of weights clipped at w_max=%g", 100 * clipped, w_max)
    model = _regression_model(data, config, int(rng.integers(0, 2 ** 31)))
    model = _fit_weighted_mse(model, data, w, config, rng)
    model.clipped_fraction = clipped
    return model


class UniformDensity:
    """Behavior model with constant density over ``[low, high]``."""

    def __init__(self, low: float, high: float):
        self.low, self.high = float(low), float(high)

    def density(self, x, a):
        a = np.asarray(a, dtype=float)
        inside = (a >= self.low) & (a <= self.high)
        return np.where(inside, 1.0 / (self.high - self.low), 0.0)
