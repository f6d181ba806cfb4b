"""Adversarial counterfactual environment-model learning.

Each iteration:

1. roll the frozen behavior-cloned policy ``kappa`` out inside the current
   model ``M_theta`` (parameters read-only while sampling);
2. update the joint discriminator ``D0(x, a, x')`` and the marginal one
   ``D1(x, a)`` to separate real from generated transitions;
3. take a conservative policy-gradient step on ``E_gen[A log M(y|x,a)]`` with
   ``A = Q - V``, where ``Q`` and ``V`` are discounted sums of ``log D0`` and
   ``log D1`` along each episode;
4. take a supervised step on the real data weighted by ``-A + H`` (``H`` is the
   model's own Gaussian entropy), falling back to plain maximum likelihood when
   the batch-mean ``D0`` on real data leaves ``[0.4, 0.6]``. The supervised
   gradient is rescaled so its norm never exceeds the policy-gradient norm.

The quantities of the adversarial objective that only appear in the
derivation (the adversarial policy, its occupancy, the regularizer and the
normalizers) are never materialized; they are absorbed into the weights above.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .bc import GaussianConditional, as_tensor, fit_behavior_policy, save_checkpoint, torch_generator
from .envs import ConfigError, TrajectoryDataset
from .models import (Discriminator, discriminator_score, joint_features, make_discriminator_pair,
                     marginal_features, train_discriminator_pair)

log = logging.getLogger(__name__)

ABLATIONS = ("no_inject_noise", "single_sl", "one_step", "single_dis", "pure_gail")
NO_NOISE_FLOOR = 1e-8


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    gamma: float = 0.99
    eps_mu: float = 0.005
    eps_d: float = 0.005
    rollout_samples_per_update: int = 5000
    disc_batch_size: int = 5000
    disc_updates: int = 2
    model_updates: int = 1
    sl_updates: int = 1
    sl_learning_rate: float = 1e-5
    trust_region_limit: Optional[float] = 0.001
    clip_ratio: Optional[float] = None
    total_iterations: int = 300
    hidden: tuple = (256, 256, 256, 256)
    activation: str = "tanh"
    disc_learning_rate: float = 3e-4
    bc_steps: int = 2000
    bc_learning_rate: float = 1e-3
    model_init_std: float = 1.0
    model_std_floor: float = 1e-3
    cg_iters: int = 10
    cg_damping: float = 0.1
    fvp_subsample: float = 0.2
    line_search_steps: int = 10
    ppo_epochs: int = 10
    ppo_learning_rate: float = 3e-4
    ppo_minibatch: int = 500
    single_dis_samples: int = 8
    fallback_low: float = 0.4
    fallback_high: float = 0.6
    no_inject_noise: bool = False
    single_sl: bool = False
    one_step: bool = False
    single_dis: bool = False
    pure_gail: bool = False
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def gnfc(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def tcga(cls, **overrides) -> "TrainConfig":
        base = dict(gamma=0.0, eps_mu=0.01, eps_d=0.01)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_task(cls, task, **overrides) -> "TrainConfig":
        return cls.tcga(**overrides) if task.kind == "tcga" else cls.gnfc(**overrides)

    def validate(self):
        if (self.trust_region_limit is None) == (self.clip_ratio is None):
            raise ConfigError("exactly one of trust_region_limit and clip_ratio must be set")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        for name in ("rollout_samples_per_update", "disc_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("disc_updates", "model_updates", "sl_updates", "total_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eps_mu < 0 or self.eps_d < 0:
            raise ConfigError("noise floors must be non-negative")
        if not self.fallback_low < self.fallback_high:
            raise ConfigError("fallback_low must be below fallback_high")
        return self

    def resolved(self) -> "TrainConfig":
        """Copy with ablation flags folded into the effective hyper-parameters."""
        cfg = replace(self)
        if cfg.one_step:
            cfg.gamma = 0.0
        if cfg.no_inject_noise:
            cfg.eps_mu, cfg.eps_d = 0.0, 0.0
        return cfg.validate()

    def with_ablation(self, *names) -> "TrainConfig":
        for n in names:
            if n not in ABLATIONS:
                raise ConfigError(f"unknown ablation {n!r}; expected one of {ABLATIONS}")
        return replace(self, **{n: True for n in names})

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class AdvantageRecord:
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray = field(init=False)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.a = self.q - self.v

    def __len__(self):
        return len(self.q)


# ---------------------------------------------------------------------------
# Rollouts and credit assignment
# ---------------------------------------------------------------------------


def rollout_in_model(kappa, model, init_states, horizon: int, n: int, rng, task) -> TrajectoryDataset:
    """``n`` trajectories of ``kappa`` acting inside ``model``.

    Start states are drawn uniformly (with replacement) from ``init_states``.
    ``model`` only needs ``sample_response(x, a, rng)``; ``task.next_state``
    maps the sampled response to the next state.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    init_states = np.atleast_2d(np.asarray(init_states, dtype=float))
    x = init_states[rng.integers(0, len(init_states), size=n)]
    xs, As, ys, xns = [], [], [], []
    with torch.no_grad():
        for _ in range(horizon):
            a = np.asarray(kappa.sample_action(x, rng), dtype=float).reshape(-1)
            y = np.asarray(model.sample_response(x, a, rng), dtype=float).reshape(-1)
            xn = task.next_state(x, y)
            xs.append(x); As.append(a); ys.append(y); xns.append(xn)
            x = xn
    X = np.stack(xs, axis=1).reshape(n * horizon, -1)
    XN = np.stack(xns, axis=1).reshape(n * horizon, -1)
    return TrajectoryDataset(X, np.stack(As, 1).reshape(-1), np.stack(ys, 1).reshape(-1), XN,
                             np.repeat(np.arange(n), horizon), np.tile(np.arange(horizon), n),
                             task.name, "generated")


def discounted_returns(rewards, episode_id, gamma: float) -> np.ndarray:
    """``G_t = sum_{s >= t} gamma^(s - t) r_s`` within each episode (backward recursion)."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if i == len(rewards) - 1 or episode_id[i + 1] != episode_id[i]:
            running = 0.0
        running = rewards[i] + gamma * running
        out[i] = running
    return out


def _log_d(d: Discriminator, features) -> np.ndarray:
    with torch.no_grad():
        return d.log_d(features).double().numpy()


def compute_advantages(traj: TrajectoryDataset, d0: Discriminator, d1: Discriminator, gamma: float,
                       single_dis: bool = False, model=None, task=None, rng=None,
                       n_samples: int = 8) -> AdvantageRecord:
    """Per-transition ``Q``, ``V`` and ``A = Q - V`` from discounted log-discriminator rewards.

    With ``single_dis`` the marginal discriminator is unused: ``V`` is the
    expectation of ``log D0(x, a, x')`` over ``x'`` sampled from ``model``
    plus the discounted continuation of the observed trajectory.
    """
    try:
        traj.check_episodes()
    except ValueError as err:
        from .models import ContractError
        raise ContractError(f"broken episode structure: {err}") from err
    r0 = _log_d(d0, joint_features(traj))
    q = discounted_returns(r0, traj.episode_id, gamma)
    if not single_dis:
        v = discounted_returns(_log_d(d1, marginal_features(traj)), traj.episode_id, gamma)
        return AdvantageRecord(q, v)
    if model is None or task is None or rng is None:
        raise ValueError("single_dis advantages need model, task and rng")
    samples = []
    for _ in range(n_samples):
        y = model.sample_response(traj.x, traj.a, rng)
        xn = task.next_state(traj.x, y)
        samples.append(_log_d(d0, np.column_stack([traj.x, traj.a, xn])))
    expected_r = np.mean(samples, axis=0)
    # continuation Q_{t+1}, zero at episode ends
    q_next = np.zeros_like(q)
    same = traj.episode_id[1:] == traj.episode_id[:-1]
    q_next[:-1][same] = q[1:][same]
    return AdvantageRecord(q, expected_r + gamma * q_next)


# ---------------------------------------------------------------------------
# Model updates
# ---------------------------------------------------------------------------


def _flat_grad(output, params, **kw):
    grads = torch.autograd.grad(output, params, allow_unused=True, **kw)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)])


def _conjugate_gradient(fvp, b, iters, tol=1e-10):
    x = torch.zeros_like(b)
    r, p = b.clone(), b.clone()
    rr = r @ r
    for _ in range(iters):
        Ap = fvp(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        if rr_new < tol:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def standardize(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    centered = adv - adv.mean()
    sd = centered.std()
    return centered / sd if sd > 1e-12 else np.zeros_like(adv)


def policy_gradient_model_update(model: GaussianConditional, generated: TrajectoryDataset,
                                 adv: AdvantageRecord, config: TrainConfig, rng=None) -> dict:
    """One conservative ascent step on ``E_gen[A log M(y|x,a)]``.

    Uses a trust-region step (``KL(old || new) <= trust_region_limit``, checked
    on the whole batch) or a clipped-ratio surrogate. Returns statistics with
    the gradient norm under ``g_pg_norm``.
    """
    if len(adv) != len(generated):
        raise ValueError("advantages are not aligned with the generated transitions")
    z = as_tensor(GaussianConditional.model_input(generated.x, generated.a))
    y = as_tensor(generated.y).reshape(-1, 1)
    A = as_tensor(standardize(adv.a))
    params = [p for p in model.parameters() if p.requires_grad]
    stats = {"noop": False, "accepted": False, "kl": 0.0, "g_pg_norm": 0.0, "improvement": 0.0}
    if not torch.any(A != 0):
        stats["noop"] = True
        return stats

    with torch.no_grad():
        old_mean, old_std = model(z)
        old_logp = model.log_prob(z, y)

    def surrogate():
        return (torch.exp(model.log_prob(z, y) - old_logp) * A).mean()

    surr = surrogate()
    g = _flat_grad(surr, params)
    stats["g_pg_norm"] = float(g.norm())
    if not math.isfinite(stats["g_pg_norm"]):
        raise TrainingDivergence("non-finite policy gradient")
    if stats["g_pg_norm"] == 0.0:
        stats["noop"] = True
        return stats

    if config.clip_ratio is not None:
        return _ppo_update(model, z, y, A, old_logp, old_mean, old_std, config, rng, stats)

    n = len(z)
    gen = torch_generator(rng) if rng is not None else None
    m = max(1, int(n * config.fvp_subsample))
    sub = torch.randperm(n, generator=gen)[:m] if m < n else torch.arange(n)
    zs, om, os_ = z[sub], old_mean[sub], old_std[sub]

    def fvp(v):
        kl = model.kl_from(zs, om, os_).mean()
        gkl = _flat_grad(kl, params, create_graph=True)
        return _flat_grad(gkl @ v, params) + config.cg_damping * v

    step_dir = _conjugate_gradient(fvp, g, config.cg_iters)
    shs = float(step_dir @ fvp(step_dir))
    if not (shs > 0 and math.isfinite(shs)):
        return stats
    full_step = step_dir * math.sqrt(2 * config.trust_region_limit / shs)
    old_params = parameters_to_vector(params).detach().clone()
    base = surr.item()
    expected = float(g @ full_step)
    with torch.no_grad():
        for k in range(config.line_search_steps):
            frac = 0.5 ** k
            vector_to_parameters(old_params + frac * full_step, params)
            kl = float(model.kl_from(z, old_mean, old_std).mean())
            improvement = float(surrogate()) - base
            if math.isfinite(kl) and kl <= config.trust_region_limit and improvement > 0:
                stats.update(accepted=True, kl=kl, improvement=improvement, step_fraction=frac,
                             expected_improvement=expected * frac)
                return stats
        vector_to_parameters(old_params, params)
    return stats


def _ppo_update(model, z, y, A, old_logp, old_mean, old_std, config, rng, stats):
    opt = getattr(model, "_ppo_opt", None)
    if opt is None:
        opt = model._ppo_opt = torch.optim.Adam(model.parameters(), lr=config.ppo_learning_rate)
    gen = torch_generator(rng) if rng is not None else None
    n, eps = len(z), config.clip_ratio
    for _ in range(config.ppo_epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, config.ppo_minibatch):
            idx = perm[start:start + config.ppo_minibatch]
            ratio = torch.exp(model.log_prob(z[idx], y[idx]) - old_logp[idx])
            obj = torch.min(ratio * A[idx], ratio.clamp(1 - eps, 1 + eps) * A[idx]).mean()
            opt.zero_grad()
            (-obj).backward()
            opt.step()
    with torch.no_grad():
        stats.update(accepted=True, kl=float(model.kl_from(z, old_mean, old_std).mean()))
    return stats


def rescale_factor(g_pg_norm: float, g_sl_norm: float) -> float:
    """``|g_pg| / max(|g_pg|, |g_sl|)``: the factor applied to the supervised gradient."""
    denom = max(g_pg_norm, g_sl_norm)
    return g_pg_norm / denom if denom > 0 else 0.0


def fallback_fires(mean_d0: float, config: TrainConfig) -> bool:
    """Whether the weighted term is replaced by plain maximum likelihood."""
    if config.single_sl:
        return False
    return not (config.fallback_low <= mean_d0 <= config.fallback_high)


def reweighted_sl_update(model: GaussianConditional, real: TrajectoryDataset, d0: Discriminator,
                         d1: Discriminator, gamma: float, g_pg_norm: float, config: TrainConfig,
                         optimizer: torch.optim.Optimizer, task=None, rng=None) -> dict:
    """Supervised step on real data weighted by ``-A + H`` (or plain likelihood on fallback)."""
    if len(real) == 0:
        raise ValueError("real dataset is empty")
    z = as_tensor(GaussianConditional.model_input(real.x, real.a))
    y = as_tensor(real.y).reshape(-1, 1)
    mean_d0 = float(discriminator_score(d0, joint_features(real)).mean())
    fired = fallback_fires(mean_d0, config)
    logp = model.log_prob(z, y)
    if fired:
        objective = logp.mean()
        weights = None
    else:
        adv = compute_advantages(real, d0, d1, gamma, config.single_dis, model, task, rng,
                                 config.single_dis_samples)
        with torch.no_grad():
            h = model.entropy(z).double().numpy()
        weights = h - adv.a
        objective = (as_tensor(weights) * logp).mean()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer.zero_grad()
    (-objective).backward()
    grads = [p.grad for p in params if p.grad is not None]
    g_sl = float(torch.sqrt(sum((g ** 2).sum() for g in grads))) if grads else 0.0
    if not math.isfinite(g_sl):
        raise TrainingDivergence("non-finite supervised gradient")
    scale = rescale_factor(g_pg_norm, g_sl)
    for g in grads:
        g.mul_(scale)
    optimizer.step()
    return {"fallback": fired, "mean_d0_real": mean_d0, "g_sl_norm": g_sl, "scale": scale,
            "applied_norm": g_sl * scale, "objective": objective.item(),
            "mean_weight": None if weights is None else float(np.mean(weights))}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def make_env_model(offline: TrajectoryDataset, config: TrainConfig, rng) -> GaussianConditional:
    z = GaussianConditional.model_input(offline.x, offline.a)
    model = GaussianConditional(z.shape[1], 1, config.hidden, config.activation,
                                std_floor=config.model_std_floor, init_std=config.model_init_std,
                                seed=int(rng.integers(0, 2 ** 31)))
    return model.set_normalization(z, offline.y)


def galileo_train(task, offline_data: TrajectoryDataset, config: TrainConfig, rng, log_path=None,
                  checkpoint_dir=None, kappa: Optional[GaussianConditional] = None, callback=None):
    """Train an environment model; returns ``(model, training_log)``."""
    cfg = config.resolved()
    if len(offline_data) == 0:
        raise ValueError("offline dataset is empty")
    offline_data.check_episodes()
    horizon = int(offline_data.t.max()) + 1
    n_episodes = max(1, cfg.rollout_samples_per_update // horizon)
    if kappa is None:
        kappa = fit_behavior_policy(offline_data, max(cfg.eps_mu, NO_NOISE_FLOOR), cfg.bc_steps, rng,
                                    cfg.hidden, lr=cfg.bc_learning_rate, activation=cfg.activation)
    kappa.requires_grad_(False)
    model = make_env_model(offline_data, cfg, rng)
    d0, d1 = make_discriminator_pair(offline_data, cfg.hidden, cfg.activation, cfg.eps_d,
                                     cfg.disc_learning_rate, rng)
    sl_opt = torch.optim.Adam(model.parameters(), lr=cfg.sl_learning_rate)
    init_states = offline_data.initial_states()
    records = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.total_iterations):
            t0 = time.perf_counter()
            gen = rollout_in_model(kappa, model, init_states, horizon, n_episodes, rng, task)
            if not (np.isfinite(gen.x).all() and np.isfinite(gen.y).all()):
                raise TrainingDivergence(f"non-finite model rollout at iteration {it}")
            loss0, loss1 = train_discriminator_pair(d0, d1, offline_data, gen, cfg.disc_updates, rng,
                                                    cfg.disc_batch_size, noisy=cfg.eps_d > 0)
            adv = compute_advantages(gen, d0, d1, cfg.gamma, cfg.single_dis, model, task, rng,
                                     cfg.single_dis_samples)
            pg = {"g_pg_norm": 0.0, "kl": 0.0, "accepted": False}
            for _ in range(cfg.model_updates):
                pg = policy_gradient_model_update(model, gen, adv, cfg, rng)
            rec = {"iteration": it, "disc_loss0": loss0, "disc_loss1": loss1,
                   "mean_d0_gen": float(discriminator_score(d0, joint_features(gen)).mean()),
                   "g_pg_norm": pg["g_pg_norm"], "kl": pg["kl"], "pg_accepted": pg["accepted"]}
            if not cfg.pure_gail:
                for _ in range(cfg.sl_updates):
                    sl = reweighted_sl_update(model, offline_data, d0, d1, cfg.gamma, pg["g_pg_norm"],
                                              cfg, sl_opt, task, rng)
                rec.update(sl_update=True, fallback=sl["fallback"], mean_d0_real=sl["mean_d0_real"],
                           g_sl_norm=sl["g_sl_norm"], sl_scale=sl["scale"])
            else:
                rec["mean_d0_real"] = float(discriminator_score(d0, joint_features(offline_data)).mean())
            rec["wall_time"] = time.perf_counter() - t0
            numeric = [v for v in rec.values() if isinstance(v, float)]
            if not all(math.isfinite(v) for v in numeric):
                raise TrainingDivergence(f"non-finite training statistics at iteration {it}: {rec}")
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if callback is not None:
                callback(it, model, rec)
            if checkpoint_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(checkpoint_dir, f"model_{it + 1:06d}.pt"),
                                "gaussian_conditional", {"iteration": it + 1})
    finally:
        if log_file:
            log_file.close()
    model.kappa, model.discriminators = kappa, (d0, d1)
    return model, records
