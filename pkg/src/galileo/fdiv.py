"""Generator functions of f-divergences and discriminator-based ratio estimation.

Only the GAN generator ``f(u) = u log u - (u + 1) log(u + 1)`` is used for
training. With ``T = log D`` and ``f*(T) = log(1 - D)`` the variational
maximizer satisfies ``log D(x) = f'(p(x)/q(x)) = log(p / (p + q))``.
The other classic generators are kept for the ``f' <= 0`` property table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .envs import DomainError
from .models import Discriminator, train_discriminator


@dataclass(frozen=True)
class GeneratorFunction:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    f_prime: Callable[[np.ndarray], np.ndarray]
    # maps from discriminator output D in (0, 1) to T and to f*(T)
    T: Callable[[np.ndarray], np.ndarray] | None = None
    conjugate_T: Callable[[np.ndarray], np.ndarray] | None = None

    def nonpositive_derivative(self) -> bool:
        """Whether ``f'(u) <= 0`` for every ``u > 0`` (checked analytically via the limit cases)."""
        return _NONPOSITIVE[self.name]


def _positive(u):
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0)):
        raise DomainError("generator functions are defined for u > 0 only")
    return u


def generator_f(u):
    """GAN generator ``u log u - (u + 1) log(u + 1)``."""
    u = _positive(u)
    out = u * np.log(u) - (u + 1) * np.log1p(u)
    return float(out) if out.ndim == 0 else out


def generator_f_prime(u):
    """Derivative ``log(u / (u + 1))`` of the GAN generator; negative for all ``u > 0``."""
    u = _positive(u)
    out = np.log(u) - np.log1p(u)
    return float(out) if out.ndim == 0 else out


def _wrap(fn):
    def inner(u):
        out = fn(_positive(u))
        return float(out) if np.ndim(out) == 0 else out
    return inner


GAN = GeneratorFunction("gan", generator_f, generator_f_prime,
                        T=lambda d: np.log(d), conjugate_T=lambda d: np.log1p(-np.asarray(d)))

KL = GeneratorFunction("kl", _wrap(lambda u: u * np.log(u)), _wrap(lambda u: np.log(u) + 1))
REVERSE_KL = GeneratorFunction("reverse_kl", _wrap(lambda u: -np.log(u)), _wrap(lambda u: -1 / u))
PEARSON = GeneratorFunction("pearson", _wrap(lambda u: (u - 1) ** 2), _wrap(lambda u: 2 * (u - 1)))
SQUARED_HELLINGER = GeneratorFunction("squared_hellinger", _wrap(lambda u: (np.sqrt(u) - 1) ** 2),
                                      _wrap(lambda u: 1 - 1 / np.sqrt(u)))
JENSEN_SHANNON = GeneratorFunction("jensen_shannon",
                                   _wrap(lambda u: -(u + 1) * np.log((1 + u) / 2) + u * np.log(u)),
                                   _wrap(lambda u: np.log(2 * u / (1 + u))))

GENERATORS = {g.name: g for g in (KL, REVERSE_KL, PEARSON, SQUARED_HELLINGER, JENSEN_SHANNON, GAN)}

_NONPOSITIVE = {"kl": False, "reverse_kl": True, "pearson": False, "squared_hellinger": False,
                "jensen_shannon": False, "gan": True}


def first_order_estimate(g: GeneratorFunction, u):
    """``f(1) + f'(u) (u - 1)``, the linearization folded into the training objective."""
    return g.f(1.0) + g.f_prime(u) * (np.asarray(u, dtype=float) - 1)


def estimate_ratio_transform(real_samples, gen_samples, train_steps: int, rng, hidden=(64, 64),
                             lr: float = 1e-3, batch_size: int = 100_000) -> Discriminator:
    """Train ``D`` to maximize ``E_p[log D] + E_q[log(1 - D)]``.

    At the optimum ``log D(x)`` estimates ``f'(p(x)/q(x)) = log(p/(p + q))`` for the GAN generator.
    """
    p = np.asarray(real_samples, dtype=float)
    q = np.asarray(gen_samples, dtype=float)
    if p.size == 0 or q.size == 0:
        raise ValueError("ratio estimation needs non-empty sample sets")
    p = p.reshape(len(p), -1)
    q = q.reshape(len(q), -1)
    d = Discriminator(p.shape[1], "generic", hidden, "tanh", 0.0, lr, seed=int(rng.integers(0, 2 ** 31)))
    d.set_normalization(np.vstack([p, q]))
    train_discriminator(d, p, q, train_steps, rng, batch_size=batch_size, noisy=False)
    return d


def rearrangement_gap(weights, F, G) -> float:
    """``sum w F G - (sum w F)(sum w G)``; non-negative whenever ``F`` and ``G`` are comonotone."""
    w = np.asarray(weights, dtype=float)
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    if not (w.shape == F.shape == G.shape) or w.ndim != 1:
        raise ValueError("weights, F and G must be 1-D vectors of equal length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    return float(np.sum(w * F * G) - np.sum(w * F) * np.sum(w * G))
