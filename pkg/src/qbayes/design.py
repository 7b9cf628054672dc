"""Experimental design: outcome-tree utilities, greedy selection and heuristics.

The utility of a posterior is the negative trace of its covariance.  Look-ahead
reweights a copy of the weight array only; locations are never resampled.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .models import (
    Dataset,
    Datum,
    LikelihoodModel,
    PhaseControl,
    PosteriorTarget,
    TimeControl,
    sample_outcome,
)
from .particles import (
    ParticleCloud,
    cloud_covariance,
    effective_sample_size,
    multinomial_indices,
)
from .smc import SmcConfig, propagate

HEURISTICS = ("sigma_inverse", "particle_pair", "exponential", "occupation", "fixed", "random", "increasing_random")


class DesignError(ValueError):
    pass


@dataclass
class DesignConfig:
    heuristic: str = "sigma_inverse"
    candidate_count: int = 20
    lookahead_depth: int = 1
    penalty: float = 0.0  # lambda in utility - lambda * sum(t)
    growth: float = 9.0 / 8.0  # C of the exponential schedule
    scale: float = 1.0
    cell_scale: float = 1.0
    occupation_constant: float = 1.0
    t_max: float = 100.0
    occupation_draw: str = "uniform"  # "uniform": t ~ U(0, bound); "exact": t = bound
    schedule: Optional[Sequence[float]] = None  # for "fixed"
    increase_scale: float = 100.0  # t_max at step k is scale * (k // every + 1)
    increase_every: int = 20

    def __post_init__(self):
        if self.heuristic not in HEURISTICS:
            raise DesignError(f"unknown heuristic {self.heuristic!r}")
        if self.candidate_count < 1:
            raise DesignError("candidate_count must be >= 1")
        if not 1 <= self.lookahead_depth <= 4:
            raise DesignError("lookahead_depth must lie in 1..4")
        if self.growth <= 1.0:
            raise DesignError("exponential growth constant must exceed 1")
        if self.occupation_draw not in ("uniform", "exact"):
            raise DesignError(f"unknown occupation draw {self.occupation_draw!r}")
        if self.cell_scale <= 0 or self.occupation_constant <= 0 or self.t_max <= 0:
            raise DesignError("occupation settings must be positive")


@dataclass
class DesignReport:
    controls: list = field(default_factory=list)
    utilities: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    sd: list = field(default_factory=list)
    elapsed_time: list = field(default_factory=list)  # cumulative evolution time
    cloud: Optional[ParticleCloud] = None
    log_evidence: float = 0.0
    n_resamples: int = 0

    @property
    def final_variance(self) -> float:
        return float(np.trace(cloud_covariance(self.cloud)))

    @property
    def total_time(self) -> float:
        return self.elapsed_time[-1] if self.elapsed_time else 0.0

    @property
    def precision(self) -> float:
        return precision_metric(self.final_variance, self.total_time)

    def as_dict(self) -> dict:
        return {
            "controls": [_control_dict(c) for c in self.controls],
            "utilities": [None if u is None else float(u) for u in self.utilities],
            "ess": [float(v) for v in self.ess],
            "sd": [float(v) for v in self.sd],
            "elapsed_time": [float(v) for v in self.elapsed_time],
            "final_variance": self.final_variance,
            "precision": self.precision,
            "log_evidence": float(self.log_evidence),
            "n_resamples": self.n_resamples,
        }


def _control_dict(c) -> dict:
    if isinstance(c, TimeControl):
        return {"kind": "time", "t": float(c.t)}
    if isinstance(c, PhaseControl):
        return {"kind": "phase", "m": int(c.m), "offset": float(c.offset)}
    return {"kind": "none"}


def _control_time(c) -> float:
    if isinstance(c, TimeControl):
        return float(c.t)
    if isinstance(c, PhaseControl):
        return float(c.m)
    return 0.0


def _p1_column(model: LikelihoodModel, x: np.ndarray, control) -> np.ndarray:
    data = Dataset.from_data([Datum(1, control)], kind=model.control_kind)
    return np.clip(model.p1(x, data)[:, 0], 0.0, 1.0)


def _neg_variance(x: np.ndarray, w: np.ndarray) -> float:
    lw = np.log(w, where=w > 0, out=np.full(w.shape, -np.inf))
    return -float(np.trace(cloud_covariance(ParticleCloud(x, lw))))


def expected_utility(cloud: ParticleCloud, model: LikelihoodModel, controls: Sequence, depth: int | None = None, penalty: float = 0.0) -> float:
    """Probability-weighted utility over all ``2**depth`` binary outcome paths."""
    controls = list(controls)
    if depth is not None and depth != len(controls):
        raise DesignError("depth must equal the number of controls")
    w = np.exp(cloud.log_weights - logsumexp(cloud.log_weights))
    x = cloud.locations
    cost = penalty * sum(_control_time(c) for c in controls)
    if not controls:
        return _neg_variance(x, w) - cost
    p1 = np.stack([_p1_column(model, x, c) for c in controls], axis=1)
    total = 0.0
    for path in itertools.product((0, 1), repeat=len(controls)):
        like = np.prod(np.where(np.asarray(path) == 1, p1, 1.0 - p1), axis=1)
        mock = w * like
        prob = float(mock.sum())
        if prob <= 0.0:
            continue  # -inf utility on a null path
        total += prob * _neg_variance(x, mock / prob)
    return total - cost


def path_probabilities(cloud: ParticleCloud, model: LikelihoodModel, controls: Sequence) -> np.ndarray:
    w = np.exp(cloud.log_weights - logsumexp(cloud.log_weights))
    p1 = np.stack([_p1_column(model, cloud.locations, c) for c in controls], axis=1)
    out = []
    for path in itertools.product((0, 1), repeat=len(controls)):
        out.append(float((w * np.prod(np.where(np.asarray(path) == 1, p1, 1.0 - p1), axis=1)).sum()))
    return np.array(out)


def greedy_next_control(cloud: ParticleCloud, model: LikelihoodModel, candidates: Sequence, penalty: float = 0.0, depth: int = 1):
    """Depth-``depth`` argmax over candidates; ties go to the shortest evolution."""
    candidates = list(candidates)
    if not candidates:
        raise DesignError("no candidate controls")
    if len(candidates) == 1:
        return candidates[0], expected_utility(cloud, model, [candidates[0]] * depth, penalty=penalty)
    utils = np.array([expected_utility(cloud, model, [c] * depth, penalty=penalty) for c in candidates])
    best = utils.max()
    tied = [i for i, u in enumerate(utils) if u >= best - 1e-12 * max(1.0, abs(best))]
    pick = min(tied, key=lambda i: (_control_time(candidates[i]), i))
    return candidates[pick], float(utils[pick])


def _cloud_sigma(cloud: ParticleCloud) -> float:
    return math.sqrt(max(float(np.trace(cloud_covariance(cloud))), 0.0))


def sigma_inverse_candidates(cloud: ParticleCloud, k: int, rng) -> list:
    if k < 1:
        raise DesignError("need at least one candidate")
    sigma = _cloud_sigma(cloud)
    if sigma <= 0.0:
        raise DesignError("cloud has collapsed to a point")
    center = 1.0 / sigma
    t = rng.normal(center, 0.3 * center, size=k)
    for _ in range(100):
        bad = t <= 0
        if not bad.any():
            break
        t[bad] = rng.normal(center, 0.3 * center, size=int(bad.sum()))
    t = np.where(t > 0, t, center)
    return [TimeControl(float(v)) for v in t]


def particle_pair_time(cloud: ParticleCloud, rng, retries: int = 100) -> TimeControl:
    for _ in range(retries):
        i, j = multinomial_indices(cloud.log_weights, 2, rng)
        dist = float(np.linalg.norm(cloud.locations[i] - cloud.locations[j]))
        if dist > 0.0:
            return TimeControl(1.0 / dist)
    raise DesignError("could not draw two distinct particles")


def _cells_per_side(m: int, d: int) -> int:
    n = max(1, int(round(m ** (1.0 / d))))
    while n**d < m:
        n += 1
    return n


def occupation_rate(cloud: ParticleCloud, bounds, cell_scale: float = 1.0) -> float:
    """Fraction of occupied cubic cells among those tiling the box ``bounds``."""
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    lo, width = b[:, 0], b[:, 1] - b[:, 0]
    side = cell_scale * width / _cells_per_side(cloud.size, cloud.dim)
    n_cells = np.ceil(width / side - 1e-9).astype(int)
    alive = np.isfinite(cloud.log_weights)
    idx = np.floor((cloud.locations[alive] - lo) / side).astype(int)
    idx = np.clip(idx, 0, n_cells - 1)
    occupied = len({tuple(r) for r in idx})
    return occupied / float(np.prod(n_cells))


def occupation_time(cloud: ParticleCloud, bounds, constant: float = 1.0, cell_scale: float = 1.0, t_max: float = 100.0) -> TimeControl:
    rate = occupation_rate(cloud, bounds, cell_scale)
    ratio = effective_sample_size(cloud) / cloud.size
    denom = rate * ratio
    t = t_max if denom <= 0 else min(t_max, constant / denom)
    return TimeControl(float(t))


def exponential_schedule(growth: float, n: int, scale: float = 1.0) -> list:
    if growth <= 1.0:
        raise DesignError("growth constant must exceed 1")
    return [TimeControl(scale * growth**k) for k in range(1, n + 1)]


def precision_metric(variance: float, elapsed_time: float) -> float:
    if variance < 0 or elapsed_time < 0:
        raise DesignError("variance and elapsed time must be nonnegative")
    return float(variance) * float(elapsed_time)


def phase_feedback_control(cloud: ParticleCloud, rng, constant: float = 1.25) -> PhaseControl:
    """Repetitions from the cloud spread, feedback angle from a posterior draw."""
    sigma = _cloud_sigma(cloud)
    m = 1 if sigma <= 0 else max(1, int(round(constant * math.ceil(1.0 / sigma))))
    (i,) = multinomial_indices(cloud.log_weights, 1, rng)
    phi = float(cloud.locations[i, 0])
    return PhaseControl(m, -m * phi)


def propose_control(cloud: ParticleCloud, model: LikelihoodModel, cfg: DesignConfig, step: int, rng):
    """Next control under ``cfg``; returns ``(control, utility or None)``."""
    h = cfg.heuristic
    if h == "fixed":
        return TimeControl(float(cfg.schedule[step])), None
    if h == "exponential":
        return TimeControl(cfg.scale * cfg.growth ** (step + 1)), None
    if h == "random":
        return TimeControl(float(rng.uniform(0.0, cfg.t_max))), None
    if h == "increasing_random":
        top = cfg.increase_scale * (step // cfg.increase_every + 1)
        return TimeControl(float(rng.uniform(0.0, top))), None
    if h == "occupation":
        bound = occupation_time(cloud, model.bounds, cfg.occupation_constant, cfg.cell_scale, cfg.t_max)
        if cfg.occupation_draw == "exact":
            return bound, None
        return TimeControl(float(rng.uniform(0.0, bound.t))), None
    if h == "particle_pair":
        cands = [particle_pair_time(cloud, rng) for _ in range(cfg.candidate_count)]
    else:
        cands = sigma_inverse_candidates(cloud, cfg.candidate_count, rng)
    if len(cands) == 1:
        return cands[0], None
    return greedy_next_control(cloud, model, cands, cfg.penalty, cfg.lookahead_depth)


def run_design(
    model: LikelihoodModel,
    truth,
    n_steps: int,
    cfg: DesignConfig,
    smc: SmcConfig,
    rng,
    init: ParticleCloud | None = None,
    outcome_rng=None,
    on_step: Callable | None = None,
) -> DesignReport:
    """Closed-loop design against a simulated device with parameters ``truth``.

    ``outcome_rng`` drives the simulated measurements (defaults to ``rng``),
    which lets two strategies share their measurement noise stream.
    """
    outcome_rng = rng if outcome_rng is None else outcome_rng
    cloud = ParticleCloud.uniform(model.sample_prior(smc.n_particles, rng)) if init is None else init
    report = DesignReport()
    data: list = []
    elapsed = 0.0
    log_ev = 0.0
    for k in range(n_steps):
        control, util = propose_control(cloud, model, cfg, k, rng)
        datum = sample_outcome(model, truth, control, outcome_rng)
        data.append(datum)
        lw = cloud.log_weights + model.loglik_terms(cloud.locations, Dataset.from_data([datum]))[:, 0]
        total = logsumexp(lw)
        if not np.isfinite(total):
            report.cloud = cloud
            raise DesignError(f"degenerate cloud at design step {k}")
        log_ev += float(total - logsumexp(cloud.log_weights))
        cloud = ParticleCloud(cloud.locations, lw - total)
        ess = effective_sample_size(cloud)
        if ess < smc.ess_threshold * smc.n_particles:
            seen = Dataset.from_data(data)
            cloud, _ = propagate(cloud, smc, model, lambda: PosteriorTarget(model, seen), rng)
            report.n_resamples += 1
        elapsed += _control_time(control)
        report.controls.append(control)
        report.utilities.append(util)
        report.ess.append(ess)
        report.sd.append(_cloud_sigma(cloud))
        report.elapsed_time.append(elapsed)
        if on_step is not None:
            on_step(k, cloud, control)
    report.cloud = cloud
    report.log_evidence = log_ev
    return report
