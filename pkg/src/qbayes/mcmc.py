"""Markov kernels: Metropolis-Hastings, random walk, Hamiltonian Monte Carlo and NUTS.

Kernels act on batches of positions with shape ``(n, d)``, each row an
independent chain; a single position of shape ``(d,)`` is accepted too.
Trajectory-sampling variants (uniform, progressive biased, NUTS) build a
binary tree of leapfrog states and therefore run one chain at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DIVERGENCE_THRESHOLD = 1000.0
MAX_TREE_DEPTH = 16
VARIANTS = ("last_state", "uniform", "progressive_biased", "nuts")


@dataclass
class RwmConfig:
    proposal_covariance: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.proposal_covariance, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise ValueError("proposal covariance must be square")
        self.chol = np.linalg.cholesky(cov)  # raises if not positive definite
        self.proposal_covariance = cov

    @classmethod
    def isotropic(cls, sigma: float, dim: int) -> "RwmConfig":
        return cls(np.eye(dim) * sigma**2)


@dataclass
class HmcConfig:
    step_size: float
    path_length: int = 10
    mass_diag: Optional[np.ndarray] = None
    variant: str = "last_state"
    max_tree_depth: int = 10
    uturn_mode: str = "or"
    fallback: bool = True
    fallback_threshold: float = 0.01
    fallback_covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if int(self.path_length) < 0:
            raise ValueError("path length must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown HMC variant {self.variant!r}")
        if self.uturn_mode not in ("or", "and"):
            raise ValueError("uturn_mode must be 'or' or 'and'")
        if not 1 <= self.max_tree_depth <= MAX_TREE_DEPTH:
            raise ValueError(f"max_tree_depth must lie in [1, {MAX_TREE_DEPTH}]")
        if self.mass_diag is not None:
            self.mass_diag = np.asarray(self.mass_diag, dtype=float).reshape(-1)
            if np.any(self.mass_diag <= 0):
                raise ValueError("masses must be positive")

    def masses(self, dim: int) -> np.ndarray:
        return np.ones(dim) if self.mass_diag is None else self.mass_diag

    def rwm_fallback(self, dim: int) -> RwmConfig:
        if self.fallback_covariance is not None:
            return RwmConfig(self.fallback_covariance)
        # optimal-scaling random walk matched to the kinetic metric
        return RwmConfig(np.diag(1.0 / self.masses(dim)) * (2.38**2 / dim))


@dataclass
class ChainStats:
    proposals: int = 0
    accepts: int = 0
    divergences: int = 0
    fallbacks: int = 0
    integrator_steps: int = 0
    tree_depths: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else 0.0

    @property
    def mean_trajectory_length(self) -> float:
        return self.integrator_steps / self.proposals if self.proposals else 0.0

    def record(self, info: dict) -> None:
        acc = np.atleast_1d(info["accepted"])
        self.proposals += acc.size
        self.accepts += int(acc.sum())
        self.divergences += int(np.sum(info.get("divergent", 0)))
        self.fallbacks += int(np.sum(info.get("fallback", 0)))
        self.integrator_steps += int(np.sum(info.get("n_steps", 0)))
        if "depth" in info:
            self.tree_depths.extend(np.atleast_1d(info["depth"]).tolist())

    def as_dict(self) -> dict:
        return {
            "proposals": self.proposals,
            "accepts": self.accepts,
            "acceptance_rate": self.acceptance_rate,
            "divergences": self.divergences,
            "fallbacks": self.fallbacks,
            "mean_trajectory_length": self.mean_trajectory_length,
        }


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :].copy(), True
    return arr.copy(), False


def _unbatch(x, single):
    return x[0] if single else x


def _rows_kw(target, rows, ok):
    # targets with per-chain state (e.g. subsample indices) need the chain ids
    if not getattr(target, "row_aware", False):
        return {}
    return {"rows": (np.arange(ok.size) if rows is None else np.asarray(rows))[ok]}


def _evaluate(target, x, rows=None):
    lp = np.full(x.shape[0], -np.inf)
    g = np.zeros_like(x)
    ok = target.in_bounds(x)
    if np.any(ok):
        with np.errstate(all="ignore"):
            lp_ok, g_ok = target.log_density_and_grad(x[ok], **_rows_kw(target, rows, ok))
        lp[ok] = lp_ok
        g[ok] = g_ok
    return np.nan_to_num(lp, nan=-np.inf), g


def _log_density(target, x, rows=None):
    lp = np.full(x.shape[0], -np.inf)
    ok = target.in_bounds(x)
    if np.any(ok):
        with np.errstate(all="ignore"):
            lp[ok] = target.log_density(x[ok], **_rows_kw(target, rows, ok))
    return np.nan_to_num(lp, nan=-np.inf)


def reflect(x, p, bounds):
    """Mirror positions into the box and flip the matching momentum components."""
    if bounds is None:
        return x, p
    lo, hi = bounds[:, 0], bounds[:, 1]
    x, p = x.copy(), p.copy()
    for _ in range(64):
        below = x < lo
        above = x > hi
        if not (below.any() or above.any()):
            break
        x = np.where(below, 2 * lo - x, x)
        x = np.where(above, 2 * hi - x, x)
        p = np.where(below | above, -p, p)
    return np.clip(x, lo, hi), p


def kinetic(p, inv_mass):
    return 0.5 * np.sum(p * p * inv_mass, axis=-1)


# ---------------------------------------------------------------------------
# Metropolis-Hastings and random walk
# ---------------------------------------------------------------------------


def mh_step(state, target, proposal: Callable, rng, log_density=None):
    """Generic MH transition.

    ``proposal(x, rng)`` returns ``(x_new, log_q_ratio)`` with
    ``log_q_ratio = log q(x | x_new) - log q(x_new | x)``.
    Returns ``(new_state, accepted)`` matching the input's batch shape.
    """
    x, single = _batch(state)
    lp = _log_density(target, x) if log_density is None else np.atleast_1d(log_density)
    y, log_q = proposal(x, rng)
    lp_y = _log_density(target, y)
    log_alpha = np.where(np.isfinite(lp_y), lp_y - lp + log_q, -np.inf)
    accept = np.log(rng.random(x.shape[0])) < np.minimum(log_alpha, 0.0)
    accept |= np.all(y == x, axis=-1) & np.isfinite(lp)
    out = np.where(accept[:, None], y, x)
    if single:
        return out[0], bool(accept[0])
    return out, accept


def _rwm_batch(x, target, cfg: RwmConfig, rng, rows=None):
    lp = _log_density(target, x, rows)
    y = x + rng.standard_normal(x.shape) @ cfg.chol.T
    lp_y = _log_density(target, y, rows)
    with np.errstate(invalid="ignore"):
        log_alpha = np.where(np.isfinite(lp_y), lp_y - lp, -np.inf)
    accept = np.log(rng.random(x.shape[0])) < np.minimum(log_alpha, 0.0)
    return np.where(accept[:, None], y, x), accept


def rwm_step(state, target, cfg: RwmConfig, rng):
    """Gaussian random-walk Metropolis step; returns ``(state, accepted)``."""
    x, single = _batch(state)
    out, accept = _rwm_batch(x, target, cfg, rng)
    if single:
        return out[0], bool(accept[0])
    return out, accept


# ---------------------------------------------------------------------------
# Leapfrog
# ---------------------------------------------------------------------------


def _leapfrog_once(x, p, g, target, eps, inv_mass, bounds, rows=None):
    p = p + 0.5 * eps * g
    x, p = reflect(x + eps * p * inv_mass, p, bounds)
    lp, g = _evaluate(target, x, rows)
    p = p + 0.5 * eps * g
    return x, p, lp, g


def leapfrog(position, momentum, target, step_size, n_steps, mass=None, bounds=None):
    """Integrate Hamilton's equations for ``n_steps`` leapfrog steps.

    Returns ``(positions, momenta, divergent)`` where the arrays hold the
    start and every subsequent synchronized state.  On divergence the
    trajectory is truncated after the last valid state.
    """
    x = np.asarray(position, dtype=float).reshape(1, -1)
    p = np.asarray(momentum, dtype=float).reshape(1, -1)
    d = x.shape[1]
    inv_mass = 1.0 / (np.ones(d) if mass is None else np.asarray(mass, dtype=float))
    if bounds is None:
        bounds = getattr(target, "bounds", None)
    bounds = None if bounds is None else np.asarray(bounds, dtype=float)
    lp, g = _evaluate(target, x)
    if not (np.isfinite(lp[0]) and np.all(np.isfinite(g))):
        from .models import NonFiniteGradientError

        raise NonFiniteGradientError("log-density or gradient non-finite at trajectory start")
    h0 = -lp[0] + kinetic(p, inv_mass)[0]
    xs, ps = [x[0].copy()], [p[0].copy()]
    divergent = False
    for _ in range(int(n_steps)):
        x_new, p_new, lp, g = _leapfrog_once(x, p, g, target, step_size, inv_mass, bounds)
        h = -lp[0] + kinetic(p_new, inv_mass)[0]
        if not (np.isfinite(h) and np.all(np.isfinite(g)) and np.all(np.isfinite(x_new))) or abs(h - h0) > DIVERGENCE_THRESHOLD:
            divergent = True
            break
        x, p = x_new, p_new
        xs.append(x[0].copy())
        ps.append(p[0].copy())
    return np.array(xs), np.array(ps), divergent


def hamiltonian(target, position, momentum, mass=None) -> float:
    x = np.asarray(position, dtype=float).reshape(1, -1)
    p = np.asarray(momentum, dtype=float).reshape(1, -1)
    inv_mass = 1.0 / (np.ones(x.shape[1]) if mass is None else np.asarray(mass, dtype=float))
    return float(-_log_density(target, x)[0] + kinetic(p, inv_mass)[0])


# ---------------------------------------------------------------------------
# Static HMC, batched
# ---------------------------------------------------------------------------


def _hmc_last_state(x, target, cfg: HmcConfig, rng, momentum=None):
    n, d = x.shape
    mass = cfg.masses(d)
    inv_mass = 1.0 / mass
    bounds = None if target.bounds is None else np.asarray(target.bounds, dtype=float)
    lp, g = _evaluate(target, x)
    p = rng.standard_normal((n, d)) * np.sqrt(mass) if momentum is None else np.array(momentum, dtype=float).reshape(n, d)
    h0 = -lp + kinetic(p, inv_mass)
    alive = np.isfinite(h0) & np.all(np.isfinite(g), axis=1)
    start_ok = alive.copy()
    xc, pc, gc, lpc = x.copy(), p.copy(), g.copy(), lp.copy()
    steps = np.zeros(n, dtype=np.int64)
    for _ in range(cfg.path_length):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xn, pn, lpn, gn = _leapfrog_once(xc[idx], pc[idx], gc[idx], target, cfg.step_size, inv_mass, bounds, idx)
        steps[idx] += 1
        h = -lpn + kinetic(pn, inv_mass)
        bad = ~(np.isfinite(h) & np.all(np.isfinite(gn), axis=1)) | (np.abs(h - h0[idx]) > DIVERGENCE_THRESHOLD)
        good = idx[~bad]
        xc[good], pc[good], gc[good], lpc[good] = xn[~bad], pn[~bad], gn[~bad], lpn[~bad]
        alive[idx[bad]] = False
    divergent = ~alive
    h1 = -lpc + kinetic(pc, inv_mass)
    with np.errstate(invalid="ignore", over="ignore"):
        log_alpha = np.where(divergent, -np.inf, np.minimum(h0 - h1, 0.0))
    log_alpha = np.nan_to_num(log_alpha, nan=-np.inf)
    accept = np.log(rng.random(n)) < log_alpha
    out = np.where(accept[:, None], xc, x)
    info = {
        "accepted": accept,
        "divergent": divergent,
        "accept_prob": np.exp(log_alpha),
        "n_steps": steps,
        "start_ok": start_ok,
    }
    return out, info


# ---------------------------------------------------------------------------
# Tree-building variants, single chain
# ---------------------------------------------------------------------------


class _Tree:
    __slots__ = ("minus", "plus", "sample", "log_w", "n_steps", "invalid", "divergent")

    def __init__(self, minus, plus, sample, log_w, n_steps, invalid=False, divergent=False):
        self.minus, self.plus, self.sample = minus, plus, sample
        self.log_w, self.n_steps = log_w, n_steps
        self.invalid, self.divergent = invalid, divergent


class _TreeBuilder:
    def __init__(self, target, cfg: HmcConfig, rng, inv_mass, h0, check_uturn, bias_inner, rows=None):
        self.rows = rows
        self.target = target
        self.cfg = cfg
        self.rng = rng
        self.inv_mass = inv_mass
        self.h0 = h0
        self.check_uturn = check_uturn
        self.bias_inner = bias_inner
        self.bounds = None if target.bounds is None else np.asarray(target.bounds, dtype=float)

    def turning(self, minus, plus) -> bool:
        dx = plus[0] - minus[0]
        fwd = float(np.dot(plus[1] * self.inv_mass, dx)) < 0
        bwd = float(np.dot(minus[1] * self.inv_mass, dx)) < 0
        return (fwd or bwd) if self.cfg.uturn_mode == "or" else (fwd and bwd)

    def pick(self, old_log_w, new_log_w, biased) -> bool:
        if biased:
            return math.log(self.rng.random()) < min(0.0, new_log_w - old_log_w)
        total = np.logaddexp(old_log_w, new_log_w)
        return self.rng.random() < math.exp(new_log_w - total)

    def leaf(self, edge, direction):
        x, p, g = edge[0][None], edge[1][None], edge[3][None]
        x, p, lp, g = _leapfrog_once(x, p, g, self.target, direction * self.cfg.step_size, self.inv_mass, self.bounds, self.rows)
        h = -lp[0] + kinetic(p, self.inv_mass)[0]
        if not (np.isfinite(h) and np.all(np.isfinite(g))) or h - self.h0 > DIVERGENCE_THRESHOLD:
            return _Tree(None, None, None, -np.inf, 1, invalid=True, divergent=True)
        state = (x[0], p[0], lp[0], g[0])
        return _Tree(state, state, state, self.h0 - h, 1)

    def build(self, edge, direction, depth):
        if depth == 0:
            return self.leaf(edge, direction)
        first = self.build(edge, direction, depth - 1)
        if first.invalid:
            return first
        nxt = first.plus if direction > 0 else first.minus
        second = self.build(nxt, direction, depth - 1)
        steps = first.n_steps + second.n_steps
        if second.invalid:
            return _Tree(None, None, None, -np.inf, steps, invalid=True, divergent=second.divergent)
        if direction > 0:
            minus, plus = first.minus, second.plus
        else:
            minus, plus = second.minus, first.plus
        sample = second.sample if self.pick(first.log_w, second.log_w, self.bias_inner) else first.sample
        tree = _Tree(minus, plus, sample, float(np.logaddexp(first.log_w, second.log_w)), steps)
        if self.check_uturn and self.turning(minus, plus):
            tree.invalid = True
        return tree


def _tree_step(x0, target, cfg: HmcConfig, rng, directions=None, momentum=None, row=None):
    """One transition of a doubling-trajectory variant for a single chain."""
    d = x0.size
    mass = cfg.masses(d)
    inv_mass = 1.0 / mass
    rows = None if row is None else np.array([row])
    lp, g = _evaluate(target, x0[None], rows)
    p0 = rng.standard_normal(d) * np.sqrt(mass) if momentum is None else np.asarray(momentum, dtype=float)
    h0 = float(-lp[0] + kinetic(p0, inv_mass))
    info = {"accepted": False, "divergent": False, "n_steps": 0, "depth": 0, "accept_prob": 0.0, "start_ok": True}
    if not (np.isfinite(h0) and np.all(np.isfinite(g))):
        info["start_ok"] = False
        return x0, info
    nuts = cfg.variant == "nuts"
    if nuts:
        max_depth = cfg.max_tree_depth
    else:
        max_depth = max(1, int(math.ceil(math.log2(max(cfg.path_length, 1)))))
    builder = _TreeBuilder(
        target, cfg, rng, inv_mass, h0,
        check_uturn=nuts,
        bias_inner=cfg.variant == "progressive_biased",
        rows=rows,
    )
    top_biased = cfg.variant in ("nuts", "progressive_biased")
    start = (x0.copy(), p0, float(lp[0]), g[0])
    tree = _Tree(start, start, start, 0.0, 0)
    depth = 0
    for j in range(max_depth):
        direction = (1 if rng.random() < 0.5 else -1) if directions is None else directions[j]
        edge = tree.plus if direction > 0 else tree.minus
        new = builder.build(edge, direction, j)
        tree.n_steps += new.n_steps
        if new.invalid:
            info["divergent"] = new.divergent
            break
        if builder.pick(tree.log_w, new.log_w, top_biased):
            tree.sample = new.sample
        if direction > 0:
            tree.plus = new.plus
        else:
            tree.minus = new.minus
        tree.log_w = float(np.logaddexp(tree.log_w, new.log_w))
        depth = j + 1
        if nuts and builder.turning(tree.minus, tree.plus):
            break
    info["n_steps"] = tree.n_steps
    info["depth"] = depth
    # probability mass that the trajectory places away from its start
    info["accept_prob"] = float(1.0 - math.exp(-tree.log_w)) if tree.log_w > 0 else float(-math.expm1(-tree.log_w))
    moved = not np.array_equal(tree.sample[0], x0)
    info["accepted"] = moved
    return (tree.sample[0].copy() if moved else x0), info


# ---------------------------------------------------------------------------
# Public HMC entry points
# ---------------------------------------------------------------------------


def hmc_step(state, target, cfg: HmcConfig, rng):
    """One HMC transition; returns ``(state, info)``.

    ``info`` holds per-chain arrays ``accepted``, ``divergent``, ``n_steps``,
    ``accept_prob`` and ``fallback`` (a random-walk rescue step was taken).
    """
    x, single = _batch(state)
    n, d = x.shape
    if cfg.variant == "last_state":
        out, info = _hmc_last_state(x, target, cfg, rng)
    else:
        steps = [_tree_step(x[i], target, cfg, rng, row=i) for i in range(n)]
        out = np.array([r[0] for r in steps])
        keys = steps[0][1].keys()
        info = {k: np.array([r[1][k] for r in steps]) for k in keys}
    fallback = np.zeros(n, dtype=bool)
    if cfg.fallback:
        need = (info["accept_prob"] < cfg.fallback_threshold) | ~info["start_ok"]
        if np.any(need):
            idx = np.flatnonzero(need)
            moved, _ = _rwm_batch(out[idx], target, cfg.rwm_fallback(d), rng, idx)
            out[idx] = moved
            fallback[idx] = True
    info["fallback"] = fallback
    if single:
        return out[0], {k: (v[0] if isinstance(v, np.ndarray) else v) for k, v in info.items()}
    return out, info


def nuts_step(state, target, cfg: HmcConfig, rng):
    """NUTS transition (forces ``variant='nuts'``); returns ``(state, info)``."""
    if cfg.variant != "nuts":
        cfg = HmcConfig(**{**cfg.__dict__, "variant": "nuts"})
    return hmc_step(state, target, cfg, rng)


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------


class RwmKernel:
    def __init__(self, target, cfg: RwmConfig):
        self.target, self.cfg = target, cfg

    def __call__(self, x, rng):
        out, acc = _rwm_batch(x, self.target, self.cfg, rng)
        return out, {"accepted": acc}


class HmcKernel:
    def __init__(self, target, cfg: HmcConfig):
        self.target, self.cfg = target, cfg

    def __call__(self, x, rng):
        return hmc_step(x, self.target, self.cfg, rng)


def chain_run(kernel, init, n_steps: int, burn_in: int = 0, thin: int = 1, rng=None):
    """Drive ``kernel(x, rng) -> (x, info)`` from ``init``.

    Returns kept samples with shape ``(k, d)`` for a single chain or
    ``(k, n, d)`` for a batch, plus :class:`ChainStats`.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    x, single = _batch(init)
    stats = ChainStats()
    kept = []
    for i in range(n_steps):
        x, info = kernel(x, rng)
        stats.record(info)
        if i >= burn_in and (i - burn_in) % thin == 0:
            kept.append(x.copy())
    shape = (0, x.shape[1]) if single else (0,) + x.shape
    if not kept:
        return np.zeros(shape), stats
    samples = np.array(kept)
    return (samples[:, 0, :] if single else samples), stats
