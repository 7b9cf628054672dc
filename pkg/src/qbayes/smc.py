"""Sequential Monte Carlo drivers.

* :func:`sir_run`: one datum per step, the prior as importance function.
* :func:`tle_run`: tempered targets ``L(theta)^gamma`` with ``gamma`` rising from 0 to 1.
* :func:`sequential_targets_run`: an arbitrary list of target densities
  (used for the point-set smiley), optionally with a leave-one-out KDE of
  the current cloud as the reweighting denominator.
* :func:`grf_run`: Gaussian rejection filtering for a single, possibly
  periodic, parameter.

Propagation after a resampling trigger is either the Liu-West kernel
shrinkage filter or Markov moves (random walk or HMC) against the current
target.  Priors are uniform over the model's support box.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .mcmc import HmcConfig, RwmConfig, hmc_step, rwm_step
from .models import Dataset, LikelihoodModel, PosteriorTarget, TargetDensity
from .particles import (
    JITTER,
    DegenerateCloudError,
    EvidenceAccumulator,
    ParticleCloud,
    cloud_covariance,
    cloud_mean,
    log_normalize,
    loo_kde_log_density,
    multinomial_bootstrap,
    multinomial_indices,
    silverman_bandwidth,
)

log = logging.getLogger(__name__)


@dataclass
class TemperSchedule:
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if c.size < 2 or c[0] != 0.0 or c[-1] != 1.0 or np.any(np.diff(c) <= 0):
            raise ValueError("tempering coefficients must rise strictly from exactly 0 to exactly 1")
        self.coefficients = c

    @classmethod
    def even(cls, n_steps: int) -> "TemperSchedule":
        """``n_steps`` evenly spaced nonzero coefficients ending at 1."""
        c = np.linspace(0.0, 1.0, n_steps + 1)
        c[-1] = 1.0
        return cls(c)

    @property
    def n_steps(self) -> int:
        return self.coefficients.size - 1


@dataclass
class MarkovMoves:
    kernel: str = "rwm"  # "rwm" or "hmc"
    n_moves: int = 1
    rwm_scale: Optional[float] = None  # proposal = scale^2 * cloud covariance
    hmc: Optional[HmcConfig] = None  # mass defaults to inverse cloud variance
    adapt: bool = True  # rescale the random walk from the previous move's acceptance
    target_acceptance: tuple = (0.15, 0.5)

    def __post_init__(self):
        self.scale_factor = 1.0

    def adapt_scale(self, rate: float) -> None:
        if not self.adapt or self.kernel != "rwm" or not np.isfinite(rate):
            return
        lo, hi = self.target_acceptance
        if rate < lo:
            self.scale_factor *= 0.5
        elif rate > hi:
            self.scale_factor = min(1.0, self.scale_factor * 1.5)


@dataclass
class SmcConfig:
    n_particles: int = 1000
    ess_threshold: float = 0.5
    propagation: str = "liu_west"  # "liu_west", "markov" or "bootstrap"
    liu_west_a: float = 0.98
    moves: MarkovMoves = field(default_factory=MarkovMoves)
    reweight_denominator: str = "implicit"  # or "loo_kde"
    data_order: str = "as_given"
    record_history: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in [0, 1]")
        if not 0.0 <= self.liu_west_a <= 1.0:
            raise ValueError("Liu-West a must lie in [0, 1]")
        if self.propagation not in ("liu_west", "markov", "bootstrap"):
            raise ValueError(f"unknown propagation {self.propagation!r}")
        if self.reweight_denominator not in ("implicit", "loo_kde"):
            raise ValueError(f"unknown reweight denominator {self.reweight_denominator!r}")


@dataclass
class SmcResult:
    cloud: ParticleCloud
    log_evidence: float
    history: list
    n_resamples: int = 0
    completed: bool = True
    error: Optional[str] = None

    @property
    def evidence(self) -> float:
        return float(np.exp(self.log_evidence))

    @property
    def mean(self) -> np.ndarray:
        return cloud_mean(self.cloud)

    @property
    def covariance(self) -> np.ndarray:
        return cloud_covariance(self.cloud)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


class SmcAborted(DegenerateCloudError):
    def __init__(self, message, partial: SmcResult, index=None):
        super().__init__(message, index)
        self.partial = partial


# ---------------------------------------------------------------------------
# Elementary steps
# ---------------------------------------------------------------------------


def prior_sample(model: LikelihoodModel, n: int, rng) -> ParticleCloud:
    return ParticleCloud.uniform(model.sample_prior(n, rng))


def reweight(cloud: ParticleCloud, model: LikelihoodModel, datum, index=None):
    """Multiply weights by the likelihood of one datum and renormalize.

    Returns ``(cloud, step_sum)``.
    """
    data = datum if isinstance(datum, Dataset) else Dataset.from_data([datum])
    lw0 = cloud.log_weights - logsumexp(cloud.log_weights)
    lw = lw0 + model.loglik(cloud.locations, data)
    try:
        out, log_sum = log_normalize(cloud.with_log_weights(lw))
    except DegenerateCloudError:
        raise DegenerateCloudError(index=index) from None
    return out, float(np.exp(log_sum))


def reweight_batch(cloud: ParticleCloud, model: LikelihoodModel, data: Dataset) -> ParticleCloud:
    """Unnormalized log-weights after absorbing every datum, added in order."""
    lw = cloud.log_weights.copy()
    terms = model.loglik_terms(cloud.locations, data)
    for k in range(terms.shape[1]):
        lw = lw + terms[:, k]
    return cloud.with_log_weights(lw)


def liu_west_resample(cloud: ParticleCloud, a: float, rng, model: LikelihoodModel | None = None) -> ParticleCloud:
    """Liu-West kernel-shrinkage resampler.

    Ancestors are drawn by weight, pulled towards the cloud mean by
    ``m = a theta + (1 - a) mu`` and jittered with covariance
    ``(1 - a^2) Sigma``.  With a model, draws outside its support are redrawn.
    """
    if a >= 1.0:
        return multinomial_bootstrap(cloud, rng)
    cov = cloud_covariance(cloud)
    if not np.any(np.diag(cov) > 0):
        return multinomial_bootstrap(cloud, rng)
    mu = cloud_mean(cloud)
    idx = multinomial_indices(cloud.log_weights, cloud.size, rng)
    centers = a * cloud.locations[idx] + (1.0 - a) * mu
    chol = np.linalg.cholesky((1.0 - a * a) * cov + JITTER * np.eye(cloud.dim))
    new = centers + rng.standard_normal(centers.shape) @ chol.T
    if model is not None:
        for _ in range(20):
            bad = ~model.in_support(new)
            if not bad.any():
                break
            new[bad] = centers[bad] + rng.standard_normal((int(bad.sum()), cloud.dim)) @ chol.T
        lo, hi = model.bounds[:, 0], model.bounds[:, 1]
        new = np.clip(new, lo, hi)
    return ParticleCloud.uniform(new)


def _move_once(x, target: TargetDensity, moves: MarkovMoves, cloud_cov, rng):
    d = x.shape[1]
    var = np.maximum(np.diag(cloud_cov), JITTER)
    if moves.kernel == "rwm":
        scale = moves.rwm_scale if moves.rwm_scale is not None else 2.38 / math.sqrt(d)
        scale *= moves.scale_factor
        cfg = RwmConfig(scale**2 * cloud_cov + JITTER * np.eye(d))
        return rwm_step(x, target, cfg, rng)
    if moves.kernel == "hmc":
        base = moves.hmc or HmcConfig(step_size=0.1, path_length=10)
        if base.mass_diag is None:
            cfg = HmcConfig(**{**base.__dict__, "mass_diag": 1.0 / var})
        else:
            cfg = base
        if cfg.fallback and cfg.fallback_covariance is None:
            cfg = HmcConfig(**{**cfg.__dict__, "fallback_covariance": (2.38**2 / d) * cloud_cov + JITTER * np.eye(d)})
        x_new, info = hmc_step(x, target, cfg, rng)
        return x_new, info["accepted"]
    raise ValueError(f"unknown Markov kernel {moves.kernel!r}")


def markov_resample(cloud: ParticleCloud, moves: MarkovMoves, target: TargetDensity, rng):
    """Bootstrap to uniform weights, then apply ``n_moves`` kernel transitions.

    Returns ``(cloud, acceptance_rate)``.
    """
    boot = multinomial_bootstrap(cloud, rng)
    if moves.n_moves == 0:
        return boot, float("nan")
    x = boot.locations.copy()
    accepted = 0
    for _ in range(moves.n_moves):
        cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
        x, acc = _move_once(x, target, moves, cov, rng)
        accepted += int(np.sum(acc))
        moves.adapt_scale(float(np.mean(acc)))
    return ParticleCloud.uniform(x), accepted / (moves.n_moves * cloud.size)


def propagate(cloud, cfg: SmcConfig, model, target_factory, rng):
    if cfg.propagation == "liu_west":
        return liu_west_resample(cloud, cfg.liu_west_a, rng, model), None
    if cfg.propagation == "bootstrap":
        return multinomial_bootstrap(cloud, rng), None
    return markov_resample(cloud, cfg.moves, target_factory(), rng)


def _summary(step, cloud, ess, resampled, log_evidence, acc=None):
    mean = cloud_mean(cloud)
    sd = np.sqrt(np.maximum(np.diag(cloud_covariance(cloud)), 0.0))
    rec = {
        "step": step,
        "ess": ess,
        "resampled": resampled,
        "log_evidence": log_evidence,
        "mean": mean.tolist(),
        "sd": sd.tolist(),
    }
    if acc is not None:
        rec["acceptance"] = acc
    return rec


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def sir_run(model: LikelihoodModel, data: Dataset, cfg: SmcConfig, rng, init: ParticleCloud | None = None) -> SmcResult:
    """Sequential importance resampling over ``data``, one datum per step.

    Log-weights are kept unnormalized between resampling events; each step's
    evidence factor is the ratio of successive weight totals.
    """
    data = data.ordered(cfg.data_order)
    cloud = prior_sample(model, cfg.n_particles, rng) if init is None else init
    lw = cloud.log_weights - logsumexp(cloud.log_weights)
    x = cloud.locations
    acc = EvidenceAccumulator()
    history = []
    n_res = 0
    log_total = 0.0
    for k in range(len(data)):
        datum = data.take([k])
        terms = model.loglik_terms(x, datum)[:, 0]
        lw = lw + terms
        new_total = logsumexp(lw)
        if not np.isfinite(new_total):
            partial = SmcResult(ParticleCloud(x, lw - log_total if np.isfinite(log_total) else lw), -np.inf, history, n_res, False, f"degenerate cloud at datum {k}")
            raise SmcAborted("all particle weights are zero", partial, index=k)
        acc.update_log(new_total - log_total)
        log_total = new_total
        ess = float(np.exp(2 * new_total - logsumexp(2 * lw)))
        resampled = ess < cfg.ess_threshold * cfg.n_particles
        rate = None
        if resampled:
            prefix = data.take(np.arange(k + 1))
            new_cloud, rate = propagate(
                ParticleCloud(x, lw - new_total), cfg, model, lambda: PosteriorTarget(model, prefix), rng
            )
            x = new_cloud.locations
            lw = new_cloud.log_weights.copy()
            log_total = 0.0
            n_res += 1
        if cfg.record_history:
            cur = ParticleCloud(x, lw)
            history.append(_summary(k + 1, cur, cfg.n_particles if resampled else ess, bool(resampled), acc.log_evidence, rate))
    final = ParticleCloud(x, lw - logsumexp(lw))
    return SmcResult(final, acc.log_evidence, history, n_res)


def tle_run(
    model: LikelihoodModel,
    data: Dataset,
    schedule: TemperSchedule,
    cfg: SmcConfig,
    rng,
    init: ParticleCloud | None = None,
    loglik_fn: Callable | None = None,
    target_factory: Callable | None = None,
    always_move: bool = True,
) -> SmcResult:
    """Tempered likelihood estimation.

    Step ``s`` multiplies weights by ``exp((gamma_{s+1} - gamma_s) * l(theta))``
    where ``l`` is the full-data log-likelihood, cached per particle.  After
    each reweight the cloud is propagated against the tempered target when the
    ESS drops below threshold (or always, with ``always_move``).
    ``loglik_fn`` and ``target_factory(gamma)`` override the full-data
    likelihood and the tempered target (used by subsampling).
    """
    cloud = prior_sample(model, cfg.n_particles, rng) if init is None else init
    lw = cloud.log_weights - logsumexp(cloud.log_weights)
    x = cloud.locations
    loglik = (lambda pts: model.loglik(pts, data)) if loglik_fn is None else loglik_fn
    make_target = (lambda g: PosteriorTarget(model, data, g)) if target_factory is None else target_factory
    ell = loglik(x)
    acc = EvidenceAccumulator()
    history = []
    n_res = 0
    gam = schedule.coefficients
    for s in range(schedule.n_steps):
        dg = gam[s + 1] - gam[s]
        with np.errstate(invalid="ignore"):
            inc = np.where(np.isneginf(ell), -np.inf, dg * ell)
        lw_new = lw + inc
        total = logsumexp(lw_new)
        if not np.isfinite(total):
            partial = SmcResult(ParticleCloud(x, lw), -np.inf, history, n_res, False, f"degenerate cloud at tempering step {s}")
            raise SmcAborted("all particle weights are zero", partial, index=s)
        acc.update_log(total)
        lw = lw_new - total
        ess = float(np.exp(-logsumexp(2 * lw)))
        resample = always_move or ess < cfg.ess_threshold * cfg.n_particles
        rate = None
        if resample:
            g = gam[s + 1]
            new_cloud, rate = propagate(ParticleCloud(x, lw), cfg, model, lambda: make_target(g), rng)
            x = new_cloud.locations
            lw = new_cloud.log_weights.copy()
            ell = loglik(x)
            n_res += 1
        if cfg.record_history:
            rec = _summary(s + 1, ParticleCloud(x, lw), cfg.n_particles if resample else ess, bool(resample), acc.log_evidence, rate)
            rec["gamma"] = float(gam[s + 1])
            history.append(rec)
    return SmcResult(ParticleCloud(x, lw), acc.log_evidence, history, n_res)


def sequential_targets_run(
    targets: Sequence[TargetDensity],
    init: ParticleCloud,
    cfg: SmcConfig,
    rng,
    initial_log_density: Callable | None = None,
) -> SmcResult:
    """SMC through a fixed sequence of unnormalized target densities.

    With ``reweight_denominator='implicit'`` the weight update at step ``k``
    is ``pi_k / pi_{k-1}`` (``pi_0`` given by ``initial_log_density``); with
    ``'loo_kde'`` the denominator is a leave-one-out KDE of the current cloud.
    Propagation uses Markov moves against ``pi_k``.
    """
    x = init.locations
    lw = init.log_weights - logsumexp(init.log_weights)
    prev = initial_log_density
    history = []
    acc = EvidenceAccumulator()
    n_res = 0
    for k, target in enumerate(targets):
        num = target.log_density(x)
        if cfg.reweight_denominator == "loo_kde":
            cur = ParticleCloud(x, lw)
            den = loo_kde_log_density(cur, silverman_bandwidth(cur))
        elif prev is None:
            den = np.zeros(x.shape[0])
        else:
            den = prev(x)
        lw_new = lw + num - den
        total = logsumexp(lw_new)
        if not np.isfinite(total):
            raise DegenerateCloudError(index=k)
        acc.update_log(total)
        lw = lw_new - total
        ess = float(np.exp(-logsumexp(2 * lw)))
        resample = ess < cfg.ess_threshold * cfg.n_particles
        rate = None
        if resample:
            new_cloud, rate = markov_resample(ParticleCloud(x, lw), cfg.moves, target, rng)
            x, lw = new_cloud.locations, new_cloud.log_weights.copy()
            n_res += 1
        if cfg.record_history:
            history.append(_summary(k + 1, ParticleCloud(x, lw), cfg.n_particles if resample else ess, bool(resample), acc.log_evidence, rate))
        prev = target.log_density
    return SmcResult(ParticleCloud(x, lw), acc.log_evidence, history, n_res)


# ---------------------------------------------------------------------------
# Gaussian rejection filtering
# ---------------------------------------------------------------------------


@dataclass
class GrfResult:
    mean: float
    variance: float
    means: list
    variances: list
    flags: list


def _wrapped_moments(samples, period):
    """Mean and variance on a circle of length ``period`` via the half-period shift screen."""
    w = np.mod(samples, period)
    shifted = np.mod(w + period / 2.0, period)
    m1, v1 = float(w.mean()), float(w.var())
    m2, v2 = float(shifted.mean()), float(shifted.var())
    if v2 < v1:
        return float(np.mod(m2 - period / 2.0, period)), v2
    return m1, v1


def grf_run(
    model: LikelihoodModel,
    experiment: Callable,
    n_steps: int,
    prior_mean: float,
    prior_var: float,
    rng,
    n_candidates: int = 1000,
    period: float | None = None,
) -> GrfResult:
    """Gaussian rejection filter for a scalar parameter.

    ``experiment(mean, sd, rng)`` returns the next ``Datum`` (allowing
    adaptive controls).  Each step draws candidates from ``N(mean, var)``,
    keeps each with probability equal to its likelihood, and refits the mean
    and variance from the kept candidates.  For periodic parameters
    (``period`` set) the moments are taken on the circle via the half-period
    shift screen.
    """
    mu, var = float(prior_mean), float(prior_var)
    means, variances, flags = [], [], []
    for k in range(n_steps):
        datum = experiment(mu, math.sqrt(var), rng)
        data = Dataset.from_data([datum])
        cand = mu + math.sqrt(var) * rng.standard_normal(n_candidates)
        pts = cand if period is None else np.mod(cand, period)
        inside = model.in_support(pts[:, None])
        p = np.zeros(n_candidates)
        p[inside] = np.exp(model.loglik(pts[inside][:, None], data))
        keep = rng.random(n_candidates) < p
        if keep.sum() < 2:
            flags.append(k)
        else:
            if period is None:
                kept = cand[keep]
                mu, var = float(kept.mean()), float(kept.var())
            else:
                mu, var = _wrapped_moments(cand[keep], period)
            var = max(var, 1e-300)
        means.append(mu)
        variances.append(var)
    return GrfResult(mu, var, means, variances, flags)
