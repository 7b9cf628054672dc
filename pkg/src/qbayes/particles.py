"""Weighted particle clouds.

Weights live in log space.  A cloud is *normalized* when its log-weights
log-sum-exp to zero.  Moments sum over particles in sorted order, which makes
them independent of particle ordering down to the last bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

JITTER = 1e-12


class DegenerateCloudError(ArithmeticError):
    """Every particle carries zero weight."""

    def __init__(self, message="all particle weights are zero", index=None):
        super().__init__(message if index is None else f"{message} (datum {index})")
        self.index = index


@dataclass(frozen=True)
class ParticleCloud:
    locations: np.ndarray  # (M, d)
    log_weights: np.ndarray  # (M,)

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim == 1:
            loc = loc[:, None]
        lw = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if loc.shape[0] < 1 or loc.shape[0] != lw.size:
            raise ValueError("need M >= 1 locations with one weight each")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError("log-weights must be finite or -inf")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def uniform(cls, locations) -> "ParticleCloud":
        loc = np.asarray(locations, dtype=float)
        m = loc.shape[0]
        return cls(loc, np.full(m, -np.log(m)))

    @classmethod
    def from_weights(cls, locations, weights) -> "ParticleCloud":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        with np.errstate(divide="ignore"):
            return cls(locations, np.log(w))

    @property
    def size(self) -> int:
        return self.log_weights.size

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def with_log_weights(self, log_weights) -> "ParticleCloud":
        return ParticleCloud(self.locations, log_weights)


def log_normalize(cloud: ParticleCloud) -> tuple[ParticleCloud, float]:
    """Normalize in log space; returns the cloud and ``log`` of the pre-normalization sum."""
    total = logsumexp(cloud.log_weights)
    if not np.isfinite(total):
        raise DegenerateCloudError()
    return cloud.with_log_weights(cloud.log_weights - total), float(total)


def normalize(cloud: ParticleCloud) -> tuple[ParticleCloud, float]:
    """Normalize weights to sum to one; returns the cloud and the pre-normalization sum."""
    out, log_total = log_normalize(cloud)
    return out, float(np.exp(log_total))


def effective_sample_size(cloud: ParticleCloud) -> float:
    # 1 / sum w^2 with w normalized, robust to unnormalized input
    lw = cloud.log_weights
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # sorting along the particle axis fixes the summation order independent
    # of how particles happen to be arranged
    return np.sort(terms, axis=0).sum(axis=0)


def cloud_mean(cloud: ParticleCloud) -> np.ndarray:
    w = np.exp(cloud.log_weights - logsumexp(cloud.log_weights))
    return _ordered_sum(w[:, None] * cloud.locations)


def cloud_covariance(cloud: ParticleCloud) -> np.ndarray:
    w = np.exp(cloud.log_weights - logsumexp(cloud.log_weights))
    r = cloud.locations - cloud_mean(cloud)
    outer = w[:, None, None] * r[:, :, None] * r[:, None, :]
    cov = _ordered_sum(outer)
    return 0.5 * (cov + cov.T)


def cloud_variance(cloud: ParticleCloud) -> np.ndarray:
    return np.diag(cloud_covariance(cloud)).copy()


def multinomial_indices(log_weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    w = np.exp(log_weights - logsumexp(log_weights))
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, w.size - 1)


def multinomial_bootstrap(cloud: ParticleCloud, rng: np.random.Generator) -> ParticleCloud:
    idx = multinomial_indices(cloud.log_weights, cloud.size, rng)
    return ParticleCloud.uniform(cloud.locations[idx])


class EvidenceAccumulator:
    """Running log of the product of per-step unnormalized weight sums."""

    __slots__ = ("log_evidence",)

    def __init__(self, log_evidence: float = 0.0):
        self.log_evidence = float(log_evidence)

    def update(self, step_sum: float) -> "EvidenceAccumulator":
        if step_sum <= 0:
            self.log_evidence = -np.inf
        else:
            self.log_evidence += float(np.log(step_sum))
        return self

    def update_log(self, log_step_sum: float) -> "EvidenceAccumulator":
        self.log_evidence += float(log_step_sum)
        return self

    @property
    def evidence(self) -> float:
        return float(np.exp(self.log_evidence))


def evidence_update(acc: EvidenceAccumulator, step_sum: float) -> EvidenceAccumulator:
    return acc.update(step_sum)


def evidence(acc: EvidenceAccumulator) -> float:
    return acc.evidence


def bayes_factor(evidence_b: float, evidence_a: float) -> float:
    if evidence_a <= 0 or evidence_b < 0:
        raise ValueError("evidences must be positive")
    return evidence_b / evidence_a


def kde_log_density(cloud: ParticleCloud, bandwidth, points, leave_out=None):
    """Log of the weighted Gaussian-kernel mixture at ``points``.

    ``bandwidth`` is a kernel covariance (scalar, diagonal vector or matrix).
    ``leave_out`` drops one particle (renormalizing the rest).  With a single
    point of shape ``(d,)`` a float is returned.
    """
    d = cloud.dim
    cov = np.asarray(bandwidth, dtype=float)
    if cov.ndim == 0:
        cov = np.eye(d) * cov
    elif cov.ndim == 1:
        cov = np.diag(cov)
    chol = np.linalg.cholesky(cov)
    lw = cloud.log_weights
    loc = cloud.locations
    if leave_out is not None:
        if cloud.size < 2:
            raise ValueError("leave-one-out needs at least two particles")
        keep = np.arange(cloud.size) != leave_out
        lw, loc = lw[keep], loc[keep]
    lw = lw - logsumexp(lw)
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, d)
    z = np.linalg.solve(chol, (pts[:, None, :] - loc[None, :, :]).reshape(-1, d).T).T
    z = z.reshape(pts.shape[0], loc.shape[0], d)
    log_norm = -0.5 * d * np.log(2 * np.pi) - np.log(np.diag(chol)).sum()
    out = logsumexp(lw[None, :] - 0.5 * np.einsum("ijk,ijk->ij", z, z), axis=1) + log_norm
    return float(out[0]) if single else out


def loo_kde_log_density(cloud: ParticleCloud, bandwidth) -> np.ndarray:
    """Leave-one-out KDE log-density at every particle location, shape ``(M,)``."""
    d = cloud.dim
    cov = np.asarray(bandwidth, dtype=float)
    if cov.ndim == 0:
        cov = np.eye(d) * cov
    elif cov.ndim == 1:
        cov = np.diag(cov)
    chol = np.linalg.cholesky(cov)
    loc = cloud.locations
    diff = loc[:, None, :] - loc[None, :, :]
    z = np.linalg.solve(chol, diff.reshape(-1, d).T).T.reshape(diff.shape)
    logk = -0.5 * np.einsum("ijk,ijk->ij", z, z)
    lw = np.broadcast_to(cloud.log_weights, logk.shape).copy()
    np.fill_diagonal(lw, -np.inf)
    lw = lw - logsumexp(lw, axis=1, keepdims=True)
    log_norm = -0.5 * d * np.log(2 * np.pi) - np.log(np.diag(chol)).sum()
    return logsumexp(lw + logk, axis=1) + log_norm


def silverman_bandwidth(cloud: ParticleCloud) -> np.ndarray:
    """Scott/Silverman rule-of-thumb kernel covariance for a cloud."""
    n_eff = effective_sample_size(cloud)
    d = cloud.dim
    factor = n_eff ** (-2.0 / (d + 4))
    return cloud_covariance(cloud) * factor + JITTER * np.eye(d)


def write_cloud(cloud: ParticleCloud, path) -> None:
    w = np.exp(cloud.log_weights - logsumexp(cloud.log_weights))
    with open(path, "w") as fh:
        for theta, wi in zip(cloud.locations, w):
            fh.write(json.dumps({"theta": [float(v) for v in theta], "w": float(wi)}, sort_keys=True))
            fh.write("\n")


def read_cloud(path) -> ParticleCloud:
    locs, ws = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                locs.append(rec["theta"])
                ws.append(rec["w"])
    return ParticleCloud.from_weights(np.array(locs, dtype=float), np.array(ws))
