"""Subsampled likelihoods: control variates, block pseudo-marginal updates, SG-HMC and ECS.

Each datum's log-likelihood ``l_k`` is approximated by a second-order Taylor
expansion ``q_k`` around a reference point (diagonal Hessian).  The difference
estimator corrects the exact sum of the ``q_k`` with a subsample of
residuals ``l_k - q_k``.  Index sets are carried per chain (one row per
particle) so the energy-conserving scheme can run over a whole cloud.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from scipy.special import logsumexp

from .mcmc import HmcConfig, hmc_step, reflect
from .models import Dataset, LikelihoodModel, PairedData
from .particles import (
    JITTER,
    EvidenceAccumulator,
    ParticleCloud,
    cloud_covariance,
    cloud_mean,
    multinomial_indices,
)
from .smc import SmcConfig, SmcResult, TemperSchedule

log = logging.getLogger(__name__)


class ControlVariates:
    """Second-order Taylor control variates anchored at ``reference``."""

    def __init__(self, model: LikelihoodModel, data: Dataset, reference, exact: bool = False):
        ref = np.asarray(reference, dtype=float).reshape(1, model.dim)
        if not model.in_support(ref)[0]:
            raise ValueError("control-variate reference must lie inside the model support")
        self.model = model
        self.data = data
        self.reference = ref[0]
        self.exact = exact  # q_k == l_k: only for testing the estimator algebra
        with np.errstate(all="ignore"):
            self.value = model.loglik_terms(ref, data)[0]  # (N,)
            self.grad = model.grad_terms(ref, data)[0]  # (N, d)
            self.hess = model.hess_diag_terms(ref, data)[0]  # (N, d)
        if not (np.all(np.isfinite(self.value)) and np.all(np.isfinite(self.grad)) and np.all(np.isfinite(self.hess))):
            raise ValueError("reference sits on a likelihood root; choose another reference")
        self.sum_value = float(np.sum(self.value))
        self.sum_grad = self.grad.sum(axis=0)
        self.sum_hess = self.hess.sum(axis=0)

    @property
    def n_data(self) -> int:
        return len(self.data)

    def total(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Sum over all data of ``q_k(theta)`` and its gradient."""
        if self.exact:
            th = np.atleast_2d(theta)
            with np.errstate(all="ignore"):
                return self.model.loglik(th, self.data), self.model.grad_loglik(th, self.data)
        delta = np.atleast_2d(theta) - self.reference
        val = self.sum_value + delta @ self.sum_grad + 0.5 * (delta * delta) @ self.sum_hess
        grad = self.sum_grad + delta * self.sum_hess
        return val, grad

    def at_indices(self, theta, idx) -> tuple[np.ndarray, np.ndarray]:
        """``q_u(theta)`` for rows of indices ``idx`` (n, m), with gradients (n, m, d)."""
        delta = (np.atleast_2d(theta) - self.reference)[:, None, :]
        g, h = self.grad[idx], self.hess[idx]
        val = self.value[idx] + np.sum(g * delta, axis=-1) + 0.5 * np.sum(h * delta * delta, axis=-1)
        grad = g + h * delta
        return val, grad


@dataclass
class SubsampleState:
    """Per-chain subsample indices, shape ``(n, m)``, drawn with replacement."""

    indices: np.ndarray
    n_data: int
    block_count: int = 1
    next_block: int = 0

    def __post_init__(self):
        self.indices = np.atleast_2d(np.asarray(self.indices, dtype=np.int64))
        m = self.indices.shape[1]
        if not 1 <= m <= self.n_data:
            raise ValueError("subsample size must lie in [1, N]")
        if not 1 <= self.block_count <= m:
            raise ValueError("block count must lie in [1, m]")

    @classmethod
    def draw(cls, n_chains: int, m: int, n_data: int, rng, block_count: int = 1) -> "SubsampleState":
        return cls(rng.integers(0, n_data, size=(n_chains, m)), n_data, block_count)

    @property
    def m(self) -> int:
        return self.indices.shape[1]

    def block_slice(self, b: int) -> slice:
        size = math.ceil(self.m / self.block_count)
        return slice(b * size, min((b + 1) * size, self.m))

    def take(self, rows) -> "SubsampleState":
        return SubsampleState(self.indices[rows], self.n_data, self.block_count, self.next_block)


def _paired_terms(cv: ControlVariates, theta, idx, need_grad: bool):
    view = PairedData(cv.data, idx)
    model = cv.model
    with np.errstate(all="ignore"):
        ll = model.loglik_terms(theta, view)
        gl = model.grad_terms(theta, view) if need_grad else None
    return ll, gl


def difference_estimate(cv: ControlVariates, idx, theta, need_grad: bool = False):
    """Difference estimator of the full-data log-likelihood.

    Returns ``(estimate, variance_hat)`` and, with ``need_grad``, their
    gradients.  ``idx`` has one row of indices per parameter row.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    idx = np.atleast_2d(idx)
    if idx.shape[0] == 1 and theta.shape[0] > 1:
        idx = np.broadcast_to(idx, (theta.shape[0], idx.shape[1]))
    N, m = cv.n_data, idx.shape[1]
    q_tot, gq_tot = cv.total(theta)
    ll, gl = _paired_terms(cv, theta, idx, need_grad)
    if cv.exact:
        q_u, gq_u = ll, gl
    else:
        q_u, gq_u = cv.at_indices(theta, idx)
    with np.errstate(invalid="ignore"):
        diff = ll - q_u
    est = q_tot + (N / m) * diff.sum(axis=1)
    dbar = diff.mean(axis=1, keepdims=True)
    ddof = 1 if m > 1 else 0
    with np.errstate(invalid="ignore"):
        var = (N * N / m) * np.sum((diff - dbar) ** 2, axis=1) / max(m - ddof, 1)
    bad = ~np.all(np.isfinite(ll), axis=1)
    est = np.where(bad, -np.inf, est)
    var = np.where(bad, 0.0, var)
    if not need_grad:
        return est, var
    gdiff = gl - gq_u
    g_est = gq_tot + (N / m) * gdiff.sum(axis=1)
    gbar = gdiff.mean(axis=1, keepdims=True)
    g_var = (N * N / m) * 2.0 * np.sum((diff - dbar)[..., None] * (gdiff - gbar), axis=1) / max(m - ddof, 1)
    g_est = np.where(bad[:, None], 0.0, g_est)
    g_var = np.where(bad[:, None], 0.0, g_var)
    return est, var, g_est, g_var


def difference_log_likelihood(cv: ControlVariates, u: SubsampleState, theta):
    """Scalar-friendly wrapper: ``(estimate, variance_hat)``."""
    est, var = difference_estimate(cv, u.indices, theta)
    if np.ndim(theta) == 1 and est.size == 1:
        return float(est[0]), float(var[0])
    return est, var


def naive_estimate(model: LikelihoodModel, data: Dataset, idx, theta):
    """Plain scaled subsample sum ``(N/m) sum_j l_{u_j}``."""
    theta = np.atleast_2d(theta)
    idx = np.atleast_2d(idx)
    if idx.shape[0] == 1 and theta.shape[0] > 1:
        idx = np.broadcast_to(idx, (theta.shape[0], idx.shape[1]))
    ll = model.loglik_terms(theta, PairedData(data, idx))
    return len(data) / idx.shape[1] * ll.sum(axis=1)


def _log_prior(model: LikelihoodModel, theta):
    return np.where(model.in_support(theta), 0.0, -np.inf)


def estimated_log_target(cv: ControlVariates, u: SubsampleState, theta, gamma: float = 1.0, with_prior: bool = True):
    """``gamma * l_hat - gamma^2 * sigma_hat^2 / 2 + log prior``.

    At ``gamma = 1`` this is the bias-corrected log-likelihood estimator plus
    the flat log-prior.
    """
    theta2 = np.atleast_2d(theta)
    est, var = difference_estimate(cv, u.indices, theta2)
    with np.errstate(invalid="ignore"):
        out = gamma * est - 0.5 * gamma * gamma * var
    if with_prior:
        out = out + _log_prior(cv.model, theta2)
    if np.ndim(theta) == 1 and out.size == 1:
        return float(out[0])
    return out


class EstimatedTarget:
    """Tempered estimated log-target over chains that each hold their own indices."""

    row_aware = True

    def __init__(self, cv: ControlVariates, u: SubsampleState, gamma: float = 1.0, guard: float | None = 10.0):
        self.cv = cv
        self.u = u
        self.gamma = float(gamma)
        self.guard = guard
        self.dim = cv.model.dim
        self.bounds = cv.model.bounds
        self.fallbacks = 0

    def in_bounds(self, x):
        return self.cv.model.in_support(x)

    def _rows(self, x, rows):
        return np.arange(x.shape[0]) if rows is None else np.asarray(rows)

    def log_density_and_grad(self, x, rows=None):
        x = np.atleast_2d(x)
        idx = self.u.indices[self._rows(x, rows)]
        est, var, g_est, g_var = difference_estimate(self.cv, idx, x, need_grad=True)
        g = self.gamma
        lp = g * est - 0.5 * g * g * var
        grad = g * g_est - 0.5 * g * g * g_var
        if self.guard is not None:
            # curvature guard: residuals too large for the Taylor expansion
            ll, gl = _paired_terms(self.cv, x, idx, True)
            q_u, _ = self.cv.at_indices(x, idx)
            with np.errstate(invalid="ignore"):
                bad = np.nanmean(np.abs(ll - q_u), axis=1) > self.guard
            if np.any(bad):
                self.fallbacks += int(bad.sum())
                model, data = self.cv.model, self.cv.data
                lp[bad] = g * model.loglik(x[bad], data)
                with np.errstate(all="ignore"):
                    grad[bad] = g * model.grad_loglik(x[bad], data)
        return lp, grad

    def log_density(self, x, rows=None):
        return self.log_density_and_grad(x, rows)[0]


def block_pm_update(u: SubsampleState, cv: ControlVariates, theta, rng, gamma: float = 1.0):
    """Refresh one block of every chain's indices; accept by the estimator ratio.

    Returns ``(state, accepted)``; blocks advance round-robin.
    """
    theta = np.atleast_2d(theta)
    sl = u.block_slice(u.next_block)
    prop = u.indices.copy()
    prop[:, sl] = rng.integers(0, u.n_data, size=(prop.shape[0], sl.stop - sl.start))
    cur = SubsampleState(u.indices, u.n_data, u.block_count)
    new = SubsampleState(prop, u.n_data, u.block_count)
    lp_cur = estimated_log_target(cv, cur, theta, gamma, with_prior=False)
    lp_new = estimated_log_target(cv, new, theta, gamma, with_prior=False)
    with np.errstate(invalid="ignore"):
        log_alpha = np.where(np.isfinite(lp_new), np.atleast_1d(lp_new - lp_cur), -np.inf)
    log_alpha = np.nan_to_num(log_alpha, nan=-np.inf)
    accept = np.log(rng.random(theta.shape[0])) < np.minimum(log_alpha, 0.0)
    out = np.where(accept[:, None], prop, u.indices)
    nxt = (u.next_block + 1) % u.block_count
    return SubsampleState(out, u.n_data, u.block_count, nxt), accept


@dataclass
class EcsConfig:
    hmc: HmcConfig
    subsample_size: int = 50
    block_count: int = 3
    guard: Optional[float] = 10.0


def ecs_gibbs_step(theta, u: SubsampleState, cv: ControlVariates, cfg: EcsConfig, rng, gamma: float = 1.0):
    """Block pseudo-marginal index update, then HMC at fixed indices.

    Returns ``(theta, u, info)``.  The HMC acceptance uses the same estimated
    target that drives the dynamics.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    u, idx_acc = block_pm_update(u, cv, theta, rng, gamma)
    target = EstimatedTarget(cv, u, gamma, cfg.guard)
    theta, info = hmc_step(theta, target, cfg.hmc, rng)
    info = dict(info)
    info["index_accepted"] = idx_acc
    info["guard_fallbacks"] = target.fallbacks
    return theta, u, info


# ---------------------------------------------------------------------------
# SG-HMC
# ---------------------------------------------------------------------------


def sg_hmc_trajectory(
    position,
    momentum,
    noisy_grad: Callable,
    step_size: float,
    n_steps: int,
    rng,
    mass=None,
    friction: float = 0.0,
    bounds=None,
):
    """Leapfrog with stochastic gradients and momentum friction.

    ``noisy_grad(x, rng)`` returns an estimate of the log-density gradient
    (i.e. ``-grad U``).  After each leapfrog step the momentum decays by
    ``step_size * friction * p / mass``.  With ``friction = 0`` and an exact
    gradient this is the plain leapfrog integrator.  Returns the positions
    and momenta including the start, shape ``(n_steps + 1, d)``.
    """
    x = np.asarray(position, dtype=float).reshape(1, -1)
    p = np.asarray(momentum, dtype=float).reshape(1, -1)
    d = x.shape[1]
    inv_mass = 1.0 / (np.ones(d) if mass is None else np.asarray(mass, dtype=float))
    bounds = None if bounds is None else np.asarray(bounds, dtype=float)
    g = noisy_grad(x, rng)
    xs, ps = [x[0].copy()], [p[0].copy()]
    for _ in range(int(n_steps)):
        p = p + 0.5 * step_size * g
        x, p = reflect(x + step_size * p * inv_mass, p, bounds)
        g = noisy_grad(x, rng)
        p = p + 0.5 * step_size * g
        if friction:
            p = p - step_size * friction * p * inv_mass
        xs.append(x[0].copy())
        ps.append(p[0].copy())
    return np.array(xs), np.array(ps)


def noise_variance_estimate(grad_samples) -> np.ndarray:
    """Empirical per-coordinate variance of repeated noisy-gradient draws."""
    g = np.asarray(grad_samples, dtype=float)
    return g.var(axis=0, ddof=1)


def friction_for(noise_var, step_size: float) -> np.ndarray:
    """``B = step_size * V / 2``: the friction that balances gradient noise."""
    return 0.5 * step_size * np.asarray(noise_var, dtype=float)


# ---------------------------------------------------------------------------
# Tempered SMC with ECS moves
# ---------------------------------------------------------------------------


@dataclass
class EcsSmcResult:
    result: SmcResult
    index_acceptance: float
    hmc_acceptance: float
    guard_fallbacks: int
    references: list = field(default_factory=list)


def tle_ecs_run(
    model: LikelihoodModel,
    data: Dataset,
    schedule: TemperSchedule,
    smc_cfg: SmcConfig,
    ecs_cfg: EcsConfig,
    rng,
    init: ParticleCloud | None = None,
    n_moves: int = 1,
    rebuild_sd: float = 0.5,
) -> EcsSmcResult:
    """Tempered SMC where reweighting and HMC moves use subsampled likelihoods.

    Each particle carries an index set.  Reweighting uses the difference
    estimator at the particle's current indices; propagation is the ECS Gibbs
    composite.  The control-variate reference is the cloud mean, rebuilt when
    the mean moves more than ``rebuild_sd`` cloud SDs.
    """
    cloud = ParticleCloud.uniform(model.sample_prior(smc_cfg.n_particles, rng)) if init is None else init
    ref = cloud_mean(cloud)
    cv = ControlVariates(model, data, ref)
    refs = [ref.tolist()]
    u = SubsampleState.draw(cloud.size, ecs_cfg.subsample_size, len(data), rng, ecs_cfg.block_count)
    stats = {"idx": [], "hmc": [], "guard": 0}
    x = cloud.locations.copy()
    lw = cloud.log_weights - logsumexp(cloud.log_weights)
    acc = EvidenceAccumulator()
    history = []
    gam = schedule.coefficients
    cfg = ecs_cfg

    def loglik(pts):
        target = EstimatedTarget(cv, u, 1.0, cfg.guard)
        return target.log_density(pts)

    ell = loglik(x)
    for s in range(schedule.n_steps):
        dg = gam[s + 1] - gam[s]
        with np.errstate(invalid="ignore"):
            inc = np.where(np.isneginf(ell), -np.inf, dg * ell)
        lw_new = lw + inc
        total = logsumexp(lw_new)
        acc.update_log(total)
        lw = lw_new - total
        # resample with index sets travelling alongside their particles
        anc = multinomial_indices(lw, x.shape[0], rng)
        x = x[anc]
        u = u.take(anc)
        lw = np.full(x.shape[0], -np.log(x.shape[0]))
        cur = ParticleCloud(x, lw)
        mean, cov = cloud_mean(cur), cloud_covariance(cur)
        sd = np.sqrt(np.maximum(np.diag(cov), JITTER))
        if np.any(np.abs(mean - cv.reference) > rebuild_sd * sd):
            inside = model.in_support(mean[None])[0]
            if inside:
                try:
                    cv = ControlVariates(model, data, mean)
                    refs.append(mean.tolist())
                except ValueError:
                    pass
        hmc = HmcConfig(**{**cfg.hmc.__dict__, "mass_diag": 1.0 / (sd * sd)}) if cfg.hmc.mass_diag is None else cfg.hmc
        step_cfg = EcsConfig(hmc, cfg.subsample_size, cfg.block_count, cfg.guard)
        for _ in range(n_moves):
            x, u, info = ecs_gibbs_step(x, u, cv, step_cfg, rng, gam[s + 1])
            stats["idx"].append(float(np.mean(info["index_accepted"])))
            stats["hmc"].append(float(np.mean(info["accepted"])))
            stats["guard"] += info["guard_fallbacks"]
        ell = loglik(x)
        cur = ParticleCloud(x, lw)
        history.append({
            "step": s + 1,
            "gamma": float(gam[s + 1]),
            "mean": cloud_mean(cur).tolist(),
            "sd": np.sqrt(np.diag(cloud_covariance(cur))).tolist(),
            "log_evidence": acc.log_evidence,
        })
    res = SmcResult(ParticleCloud(x, lw), acc.log_evidence, history, schedule.n_steps)
    return EcsSmcResult(
        res,
        float(np.mean(stats["idx"])) if stats["idx"] else float("nan"),
        float(np.mean(stats["hmc"])) if stats["hmc"] else float("nan"),
        stats["guard"],
        refs,
    )
