"""Analytic-vs-finite-difference gradient checks shared by the unit and acceptance suites."""

import numpy as np

from qbayes.models import (
    CoinModel,
    Dataset,
    DampedRamseyModel,
    IntervalModel,
    MultiCosModel,
    PhaseEstimationModel,
    PrecessionModel,
    RamseyModel,
    RosenbrockTarget,
    SmileyTarget,
    gaussian_6d,
    harmonic_oscillator,
    t1_model,
    t2_model,
)

N_POINTS = 20
TOL = 1e-5


def _data(kind, rng, n=6):
    outcomes = rng.integers(0, 2, n)
    if kind == "time":
        return Dataset(outcomes, "time", t=rng.uniform(0.1, 3.0, n))
    if kind == "phase":
        return Dataset(outcomes, "phase", m=rng.integers(1, 5, n), offset=rng.uniform(0, 2 * np.pi, n))
    return Dataset(outcomes)


def model_cases():
    return {
        "coin": CoinModel(),
        "interval": IntervalModel(0.2, 0.5, 1.0, dim=2),
        "precession": PrecessionModel(),
        "ramsey": RamseyModel(),
        "phase": PhaseEstimationModel(),
        "t1": t1_model(),
        "t2": t2_model(),
        "damped_ramsey": DampedRamseyModel(),
        "multicos": MultiCosModel(3),
    }


def target_cases():
    return {
        "gaussian6d": gaussian_6d(),
        "oscillator": harmonic_oscillator(),
        "rosenbrock": RosenbrockTarget(),
        "smiley": SmileyTarget(),
    }


def _rel_err(g, fd):
    scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-3)
    return float(np.linalg.norm(g - fd) / scale)


def _central(f, x, h):
    fd = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        fd[k] = (f(x + e) - f(x - e)) / (2 * h[k])
    return fd


def model_worst_error(model, seed=0):
    """Largest relative error over interior points, skipping near-certain outcomes."""
    rng = np.random.default_rng(seed)
    lo, hi = model.bounds[:, 0], model.bounds[:, 1]
    width = hi - lo
    data = _data(model.control_kind, rng)
    interval = isinstance(model, IntervalModel)
    if interval:
        # p1 is 0 or 1, so only points inside the box with all-ones data have finite likelihood
        data = Dataset(np.ones(len(data), dtype=int))
        lo, hi = np.full(model.dim, model.a), np.full(model.dim, model.b)
        width = hi - lo
    worst, used = 0.0, 0
    while used < N_POINTS:
        x = lo + width * rng.uniform(0.1, 0.9, model.dim)
        p = model.p1(x[None], data)[0]
        if not interval and (np.any(p < 1e-3) or np.any(p > 1 - 1e-3)):
            continue
        g = model.grad_loglik(x[None], data)[0]
        fd = _central(lambda y: model.loglik(y[None], data)[0], x, 1e-6 * np.maximum(np.abs(x), width * 1e-2))
        worst = max(worst, _rel_err(g, fd))
        used += 1
    return worst


def target_worst_error(target, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(N_POINTS):
        if target.dim == 2 and isinstance(target, SmileyTarget):
            x = target.points[rng.integers(len(target.points))] + rng.normal(0, 0.3, 2)
        elif target.dim == 6:
            x = rng.normal(0, 20, 6)
        else:
            x = rng.normal(0, 2, target.dim)
        g = target.log_density_and_grad(x[None])[1][0]
        fd = _central(lambda y: target.log_density(y[None])[0], x, 1e-6 * np.maximum(np.abs(x), 1.0))
        worst = max(worst, _rel_err(g, fd))
    return worst
