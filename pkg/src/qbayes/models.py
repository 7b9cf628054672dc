"""Likelihood models for binary-outcome experiments and benchmark sampling targets.

Every likelihood model maps a batch of parameter vectors ``theta`` with shape
``(n, d)`` and a :class:`Dataset` of ``N`` records to the probability of the
outcome ``1``, shape ``(n, N)``.  Derivatives are analytic.  Outcome ``0`` is
always the complement, so ``P(0) + P(1) == 1`` holds by construction.

Targets (:class:`TargetDensity`) are unnormalized log-densities with
gradients, evaluated on batches of points with shape ``(n, d)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Iterator, Union

import numpy as np
from scipy.special import logsumexp

TWO_PI = 2.0 * np.pi


class ModelError(ValueError):
    """Raised for invalid parameters or controls passed to a model."""


class NonFiniteGradientError(ArithmeticError):
    """The log-likelihood gradient is undefined (e.g. at a likelihood root)."""


# ---------------------------------------------------------------------------
# Controls and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeControl:
    t: float

    def __post_init__(self):
        if not np.isfinite(self.t) or self.t < 0:
            raise ModelError(f"evolution time must be finite and >= 0, got {self.t}")


@dataclass(frozen=True)
class PhaseControl:
    m: int
    offset: float = 0.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ModelError(f"repetition count must be a positive integer, got {self.m}")
        object.__setattr__(self, "offset", float(self.offset) % TWO_PI)


@dataclass(frozen=True)
class NoControl:
    pass


Control = Union[TimeControl, PhaseControl, NoControl]
NO_CONTROL = NoControl()

_KIND_OF = {TimeControl: "time", PhaseControl: "phase", NoControl: "none"}


def control_kind(control: Control) -> str:
    try:
        return _KIND_OF[type(control)]
    except KeyError:
        raise ModelError(f"unknown control type {type(control).__name__}") from None


@dataclass(frozen=True)
class Datum:
    outcome: int
    control: Control = NO_CONTROL

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ModelError(f"outcome must be 0 or 1, got {self.outcome!r}")


class Dataset:
    """Columnar, immutable store of binary outcomes and their controls.

    All records share one control kind (``"time"``, ``"phase"`` or ``"none"``).
    Unused control columns are zero-filled.
    """

    __slots__ = ("outcomes", "t", "m", "offset", "kind")

    def __init__(self, outcomes, kind="none", t=None, m=None, offset=None):
        outcomes = np.asarray(outcomes, dtype=np.int8).reshape(-1)
        n = outcomes.size
        if np.any((outcomes != 0) & (outcomes != 1)):
            raise ModelError("outcomes must be 0 or 1")
        if kind not in ("time", "phase", "none"):
            raise ModelError(f"unknown control kind {kind!r}")
        self.kind = kind
        self.outcomes = outcomes
        self.t = np.zeros(n) if t is None else np.asarray(t, dtype=float).reshape(-1)
        self.m = np.ones(n, dtype=np.int64) if m is None else np.asarray(m, dtype=np.int64).reshape(-1)
        self.offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
        if not (self.t.size == self.m.size == self.offset.size == n):
            raise ModelError("control columns must match the number of outcomes")
        if kind == "time" and (np.any(self.t < 0) or not np.all(np.isfinite(self.t))):
            raise ModelError("evolution times must be finite and >= 0")
        if kind == "phase" and np.any(self.m < 1):
            raise ModelError("repetition counts must be >= 1")
        for arr in (self.outcomes, self.t, self.m, self.offset):
            arr.flags.writeable = False

    @classmethod
    def from_data(cls, data: Iterable[Datum], kind: str | None = None) -> "Dataset":
        data = list(data)
        kinds = {control_kind(d.control) for d in data}
        if len(kinds) > 1:
            raise ModelError(f"mixed control kinds in dataset: {sorted(kinds)}")
        if kind is None:
            kind = kinds.pop() if kinds else "none"
        elif kinds and kinds != {kind}:
            raise ModelError(f"dataset kind {kind!r} does not match controls {sorted(kinds)}")
        outcomes = [d.outcome for d in data]
        t = [getattr(d.control, "t", 0.0) for d in data]
        m = [getattr(d.control, "m", 1) for d in data]
        offset = [getattr(d.control, "offset", 0.0) for d in data]
        return cls(outcomes, kind, t, m, offset)

    @classmethod
    def empty(cls, kind: str = "none") -> "Dataset":
        return cls(np.zeros(0, dtype=np.int8), kind)

    def __len__(self) -> int:
        return self.outcomes.size

    def control_at(self, i: int) -> Control:
        if self.kind == "time":
            return TimeControl(float(self.t[i]))
        if self.kind == "phase":
            return PhaseControl(int(self.m[i]), float(self.offset[i]))
        return NO_CONTROL

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Datum(int(self.outcomes[key]), self.control_at(int(key)))
        return self.take(np.arange(len(self))[key])

    def __iter__(self) -> Iterator[Datum]:
        for i in range(len(self)):
            yield self[i]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.outcomes[idx], self.kind, self.t[idx], self.m[idx], self.offset[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        if len(self) and len(other) and self.kind != other.kind:
            raise ModelError("cannot concatenate datasets of different control kinds")
        kind = self.kind if len(self) else other.kind
        return Dataset(
            np.concatenate([self.outcomes, other.outcomes]),
            kind,
            np.concatenate([self.t, other.t]),
            np.concatenate([self.m, other.m]),
            np.concatenate([self.offset, other.offset]),
        )

    def ordered(self, order: str = "as_given") -> "Dataset":
        """Reorder by evolution time: ``as_given``, ``ascending`` or ``descending``."""
        if order == "as_given":
            return self
        if order not in ("ascending", "descending"):
            raise ModelError(f"unknown data ordering {order!r}")
        key = self.t if order == "ascending" else -self.t
        idx = np.argsort(key, kind="stable")
        return self.take(idx)

    def count_ones(self) -> int:
        return int(self.outcomes.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.kind == other.kind
            and np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.offset, other.offset)
        )

    def __repr__(self) -> str:
        return f"Dataset(kind={self.kind!r}, n={len(self)}, ones={self.count_ones()})"


class PairedData:
    """Per-row data views: row ``i`` of every column pairs with parameter row ``i``.

    Columns have shape ``(n, m)``.  Model methods broadcast over it exactly as
    over a :class:`Dataset`, yielding ``(n, m)`` results.
    """

    __slots__ = ("outcomes", "t", "m", "offset", "kind")

    def __init__(self, data: Dataset, indices):
        idx = np.asarray(indices, dtype=np.int64)
        self.kind = data.kind
        self.outcomes = data.outcomes[idx]
        self.t = data.t[idx]
        self.m = data.m[idx]
        self.offset = data.offset[idx]

    def __len__(self) -> int:
        return self.outcomes.shape[-1]


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    if isinstance(data, Datum):
        return Dataset.from_data([data])
    return Dataset.from_data(data)


# ---------------------------------------------------------------------------
# Likelihood models
# ---------------------------------------------------------------------------


def _as_batch(theta, dim: int) -> np.ndarray:
    arr = np.asarray(theta, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size == dim else arr.reshape(-1, 1)
    if arr.shape[-1] != dim:
        raise ModelError(f"expected parameters of dimension {dim}, got shape {np.shape(theta)}")
    return arr


class LikelihoodModel:
    """Base class for binary-outcome likelihood models.

    Subclasses set ``dim``, ``bounds`` (shape ``(d, 2)``), ``control_kind`` and
    implement :meth:`p1` and :meth:`dp1`; :meth:`d2p1` (diagonal of the
    Hessian of ``P(1)``) is needed only for control variates.
    """

    dim: int = 1
    control_kind: str = "none"
    name: str = "model"

    def __init__(self, bounds):
        self.bounds = np.array(bounds, dtype=float).reshape(self.dim, 2)
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ModelError("each bound must satisfy lower < upper")

    # -- subclass hooks ----------------------------------------------------
    def p1(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def dp1(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def d2p1(self, theta: np.ndarray, data: Dataset) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no second derivative")

    # -- support -----------------------------------------------------------
    def in_support(self, theta) -> np.ndarray:
        theta = _as_batch(theta, self.dim)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return np.all((theta >= lo) & (theta <= hi) & np.isfinite(theta), axis=-1)

    def check_data(self, data: Dataset) -> None:
        if len(data) and data.kind != self.control_kind:
            raise ModelError(
                f"{type(self).__name__} expects {self.control_kind!r} controls, got {data.kind!r}"
            )

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (hi - lo) * rng.random((n, self.dim))

    # -- vectorized likelihood -------------------------------------------------
    def loglik_terms(self, theta, data: Dataset) -> np.ndarray:
        """Per-datum log-likelihoods, shape ``(n, N)``; ``-inf`` at roots."""
        theta = _as_batch(theta, self.dim)
        self.check_data(data)
        p = np.clip(self.p1(theta, data), 0.0, 1.0)
        q = np.where(data.outcomes == 1, p, 1.0 - p)
        with np.errstate(divide="ignore"):
            return np.log(q)

    def loglik(self, theta, data: Dataset) -> np.ndarray:
        """Total log-likelihood for each parameter vector, shape ``(n,)``."""
        theta = _as_batch(theta, self.dim)
        if len(data) == 0:
            return np.zeros(theta.shape[0])
        return self.loglik_terms(theta, data).sum(axis=-1)

    def grad_terms(self, theta, data: Dataset) -> np.ndarray:
        """Per-datum log-likelihood gradients, shape ``(n, N, d)``.

        Entries are non-finite where the datum has zero probability.
        """
        theta = _as_batch(theta, self.dim)
        self.check_data(data)
        p = np.clip(self.p1(theta, data), 0.0, 1.0)
        dp = self.dp1(theta, data)
        sign = np.where(data.outcomes == 1, 1.0, -1.0)
        q = np.where(data.outcomes == 1, p, 1.0 - p)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (sign / q)[..., None] * dp

    def grad_loglik(self, theta, data: Dataset) -> np.ndarray:
        theta = _as_batch(theta, self.dim)
        if len(data) == 0:
            return np.zeros_like(theta)
        return self.grad_terms(theta, data).sum(axis=-2)

    def hess_diag_terms(self, theta, data: Dataset) -> np.ndarray:
        """Per-datum diagonal of the log-likelihood Hessian, shape ``(n, N, d)``."""
        theta = _as_batch(theta, self.dim)
        self.check_data(data)
        p = np.clip(self.p1(theta, data), 0.0, 1.0)
        dp = self.dp1(theta, data)
        d2p = self.d2p1(theta, data)
        sign = np.where(data.outcomes == 1, 1.0, -1.0)[..., None]
        q = np.where(data.outcomes == 1, p, 1.0 - p)[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            return sign * d2p / q - (dp / q) ** 2

    def sample_outcomes(self, true_params, data: Dataset, rng: np.random.Generator) -> Dataset:
        """Redraw the outcomes of ``data`` from the model at ``true_params``."""
        p = self.p1(_as_batch(true_params, self.dim), data)[0]
        outcomes = (rng.random(len(data)) < p).astype(np.int8)
        return Dataset(outcomes, data.kind, data.t, data.m, data.offset)


class CoinModel(LikelihoodModel):
    """Bernoulli trials with success probability ``theta``; no controls."""

    name = "coin"

    def __init__(self, bounds=((0.0, 1.0),)):
        super().__init__(bounds)

    def p1(self, theta, data):
        return theta[:, :1] * np.ones_like(data.t)

    def dp1(self, theta, data):
        return np.ones_like(theta[:, :1] * data.t)[..., None]

    def d2p1(self, theta, data):
        return np.zeros_like(theta[:, :1] * data.t)[..., None]


class IntervalModel(LikelihoodModel):
    """Black box emitting 1 iff every parameter lies in ``[a, b]``.

    On a flat prior over ``[0, W)^d`` the evidence of ``D = 1`` is
    ``((b - a) / W) ** d``.
    """

    name = "interval"

    def __init__(self, a: float, b: float, width: float, dim: int = 1):
        if not 0 <= a <= b <= width:
            raise ModelError("need 0 <= a <= b <= W")
        self.dim = dim
        self.a, self.b, self.width = float(a), float(b), float(width)
        super().__init__([(0.0, width)] * dim)

    def p1(self, theta, data):
        inside = np.all((theta >= self.a) & (theta <= self.b), axis=-1)
        return inside[:, None].astype(float) * np.ones_like(data.t)

    def dp1(self, theta, data):
        return np.zeros(np.shape(theta[:, :1] * data.t) + (self.dim,))

    def d2p1(self, theta, data):
        return np.zeros(np.shape(theta[:, :1] * data.t) + (self.dim,))


class PrecessionModel(LikelihoodModel):
    """Precessing qubit: ``P(1 | omega; t) = cos^2(omega t / 2)``.

    Outcome 1 stands for finding the qubit in ``|+>``.
    """

    name = "precession"
    control_kind = "time"

    def __init__(self, bounds=((0.0, 10.0),)):
        super().__init__(bounds)

    def p1(self, theta, data):
        phase = theta[:, :1] * data.t
        return 0.5 * (1.0 + np.cos(phase))

    def dp1(self, theta, data):
        phase = theta[:, :1] * data.t
        return (-0.5 * data.t * np.sin(phase))[..., None]

    def d2p1(self, theta, data):
        phase = theta[:, :1] * data.t
        return (-0.5 * data.t**2 * np.cos(phase))[..., None]


class RamseyModel(PrecessionModel):
    """Undamped Ramsey fringes: ``P(1 | delta; dt) = cos^2(delta dt / 2)``."""

    name = "ramsey"


class PhaseEstimationModel(LikelihoodModel):
    """Iterative phase estimation: ``P(0 | phi; m, offset) = cos^2((m phi + offset) / 2)``."""

    name = "phase"
    control_kind = "phase"

    def __init__(self, bounds=((0.0, TWO_PI),)):
        super().__init__(bounds)

    def p1(self, theta, data):
        return 0.5 * (1.0 - np.cos(theta[:, :1] * data.m + data.offset))

    def dp1(self, theta, data):
        return (0.5 * data.m * np.sin(theta[:, :1] * data.m + data.offset))[..., None]

    def d2p1(self, theta, data):
        return (0.5 * data.m**2 * np.cos(theta[:, :1] * data.m + data.offset))[..., None]


class DecayModel(LikelihoodModel):
    """Exponential decay ``P(1 | T; dt) = A exp(-dt / T) + B``.

    ``A = 1, B = 0`` is energy relaxation (T1); ``A = B = 1/2`` is the echoed
    dephasing (T2) experiment, whose excited population settles at one half.
    """

    name = "decay"
    control_kind = "time"

    def __init__(self, bounds=((1e-6, 250.0),), amplitude: float = 1.0, offset: float = 0.0):
        if amplitude < 0 or offset < 0 or amplitude + offset > 1 + 1e-12:
            raise ModelError("need A, B >= 0 and A + B <= 1")
        self.amplitude = float(amplitude)
        self.offset = float(offset)
        super().__init__(bounds)
        if self.bounds[0, 0] <= 0:
            raise ModelError("decay constant support must be strictly positive")

    def p1(self, theta, data):
        return self.amplitude * np.exp(-data.t / theta[:, :1]) + self.offset

    def dp1(self, theta, data):
        T = theta[:, :1]
        return (self.amplitude * np.exp(-data.t / T) * data.t / T**2)[..., None]

    def d2p1(self, theta, data):
        T = theta[:, :1]
        e = np.exp(-data.t / T)
        return (self.amplitude * e * (data.t**2 / T**4 - 2.0 * data.t / T**3))[..., None]


def t1_model(bounds=((1e-6, 100.0),), amplitude=1.0, offset=0.0) -> DecayModel:
    return DecayModel(bounds, amplitude, offset)


def t2_model(bounds=((1e-6, 250.0),), amplitude=0.5, offset=0.5) -> DecayModel:
    return DecayModel(bounds, amplitude, offset)


class DampedRamseyModel(LikelihoodModel):
    """Ramsey fringes under an exponential envelope; parameters ``(delta, T2*)``.

    ``P(1) = e cos^2(delta dt / 2) + (1 - e) / 2`` with ``e = exp(-dt / T2*)``.
    """

    name = "damped_ramsey"
    control_kind = "time"
    dim = 2

    def __init__(self, bounds=((0.0, 5.0), (3.0, 25.0))):
        super().__init__(bounds)
        if self.bounds[1, 0] <= 0:
            raise ModelError("coherence time support must be strictly positive")

    def p1(self, theta, data):
        delta, T = theta[:, :1], theta[:, 1:2]
        e = np.exp(-data.t / T)
        return e * 0.5 * np.cos(delta * data.t) + 0.5

    def dp1(self, theta, data):
        delta, T = theta[:, :1], theta[:, 1:2]
        t = data.t
        e = np.exp(-t / T)
        half_cos = 0.5 * np.cos(delta * t)
        d_delta = -0.5 * e * t * np.sin(delta * t)
        d_T = half_cos * e * t / T**2
        return np.stack([d_delta, d_T], axis=-1)

    def d2p1(self, theta, data):
        delta, T = theta[:, :1], theta[:, 1:2]
        t = data.t
        e = np.exp(-t / T)
        half_cos = 0.5 * np.cos(delta * t)
        dd = -0.5 * e * t**2 * np.cos(delta * t)
        dT = half_cos * e * (t**2 / T**4 - 2.0 * t / T**3)
        return np.stack([dd, dT], axis=-1)


class MultiCosModel(LikelihoodModel):
    """Average of ``cos^2(omega_j t / 2)`` over ``d`` frequencies.

    Invariant under any permutation of the frequencies, so the posterior has
    ``d!`` symmetric modes.
    """

    name = "multicos"
    control_kind = "time"

    def __init__(self, dim: int = 2, bounds=None):
        self.dim = int(dim)
        super().__init__([(0.0, 1.0)] * self.dim if bounds is None else bounds)

    def p1(self, theta, data):
        return 0.5 * (1.0 + np.cos(theta[:, None, :] * data.t[..., None])).mean(axis=-1)

    def dp1(self, theta, data):
        t = data.t[..., None]
        return -0.5 * t * np.sin(theta[:, None, :] * t) / self.dim

    def d2p1(self, theta, data):
        t = data.t[..., None]
        return -0.5 * t**2 * np.cos(theta[:, None, :] * t) / self.dim


# ---------------------------------------------------------------------------
# Single-point API
# ---------------------------------------------------------------------------


def _check_support(model: LikelihoodModel, params) -> np.ndarray:
    theta = _as_batch(params, model.dim)
    if not np.all(model.in_support(theta)):
        raise ModelError(f"parameters {theta.tolist()} outside model support")
    return theta


def outcome_probability(model: LikelihoodModel, params, control: Control, outcome: int = 1) -> float:
    """Probability of ``outcome`` given ``params`` under ``control``."""
    if control_kind(control) != model.control_kind:
        raise ModelError(
            f"{type(model).__name__} expects {model.control_kind!r} controls, "
            f"got {control_kind(control)!r}"
        )
    theta = _check_support(model, params)
    data = Dataset.from_data([Datum(1, control)])
    p = float(np.clip(model.p1(theta, data)[0, 0], 0.0, 1.0))
    if outcome == 1:
        return p
    if outcome == 0:
        return 1.0 - p
    raise ModelError(f"outcome must be 0 or 1, got {outcome!r}")


def log_likelihood(model: LikelihoodModel, params, dataset) -> float:
    data = as_dataset(dataset)
    if len(data) == 0:
        raise ModelError("log_likelihood needs a nonempty dataset")
    return float(model.loglik(_check_support(model, params), data)[0])


def grad_log_likelihood(model: LikelihoodModel, params, dataset) -> np.ndarray:
    data = as_dataset(dataset)
    theta = _check_support(model, params)
    g = model.grad_loglik(theta, data)[0]
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(f"log-likelihood gradient undefined at {theta[0].tolist()}")
    return g


def sample_outcome(model: LikelihoodModel, true_params, control: Control, rng: np.random.Generator) -> Datum:
    p = outcome_probability(model, true_params, control, 1)
    return Datum(int(rng.random() < p), control)


# ---------------------------------------------------------------------------
# Conjugate beta oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ModelError("beta hyperparameters must be strictly positive")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))


def beta_posterior(prior: BetaParams, dataset) -> BetaParams:
    data = as_dataset(dataset)
    s = data.count_ones()
    return BetaParams(prior.alpha + s, prior.beta + (len(data) - s))


# ---------------------------------------------------------------------------
# Sampling targets
# ---------------------------------------------------------------------------


class TargetDensity:
    """Unnormalized log-density with gradient, evaluated on batches."""

    dim: int = 1
    bounds: np.ndarray | None = None

    def log_density_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return self.log_density_and_grad(x)[0]

    def in_bounds(self, x) -> np.ndarray:
        x = _as_batch(x, self.dim)
        if self.bounds is None:
            return np.all(np.isfinite(x), axis=-1)
        return np.all((x >= self.bounds[:, 0]) & (x <= self.bounds[:, 1]), axis=-1)


class GaussianTarget(TargetDensity):
    """Multivariate normal; the log-density omits the normalizing constant."""

    def __init__(self, mean, cov=None):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.dim = self.mean.size
        cov = np.eye(self.dim) if cov is None else np.atleast_2d(np.asarray(cov, dtype=float))
        self.precision = np.linalg.inv(cov)

    def log_density_and_grad(self, x):
        r = _as_batch(x, self.dim) - self.mean
        pr = r @ self.precision
        return -0.5 * np.einsum("ij,ij->i", r, pr), -pr


def gaussian_6d() -> GaussianTarget:
    return GaussianTarget([20.0, 20.0, 20.0, -20.0, -20.0, -20.0])


def harmonic_oscillator() -> GaussianTarget:
    """``U(theta) = theta^2 / 2``."""
    return GaussianTarget([0.0])


class RosenbrockTarget(TargetDensity):
    """``log g(x, y) = (-5 (y - x^2)^2 - x^2) / 8``."""

    dim = 2

    def log_density_and_grad(self, x):
        x = _as_batch(x, 2)
        u, v = x[:, 0], x[:, 1]
        r = v - u * u
        lp = (-5.0 * r * r - u * u) / 8.0
        gu = (20.0 * u * r - 2.0 * u) / 8.0
        gv = -10.0 * r / 8.0
        return lp, np.stack([gu, gv], axis=-1)


def load_points(path=None) -> np.ndarray:
    """Read ``(x, y)`` rows from a CSV file (header optional).

    With no path, the bundled smiley point set is returned.
    """
    if path is None:
        with resources.files("qbayes").joinpath("data/smiley.csv").open("r") as fh:
            rows = list(csv.reader(fh))
    else:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    out = []
    for row in rows:
        if not row:
            continue
        try:
            out.append([float(row[0]), float(row[1])])
        except ValueError:
            continue  # header
    return np.array(out)


class SmileyTarget(TargetDensity):
    """Equal-weight mixture of isotropic Gaussian kernels centred on a point set."""

    dim = 2

    def __init__(self, points=None, bandwidth: float = 0.25):
        self.points = load_points() if points is None else np.asarray(points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) == 0:
            raise ModelError("smiley points must be a nonempty (n, 2) array")
        if bandwidth <= 0:
            raise ModelError("bandwidth must be positive")
        self.bandwidth = float(bandwidth)

    def subset(self, n: int) -> "SmileyTarget":
        """The density built from the first ``n`` points only."""
        return SmileyTarget(self.points[:n], self.bandwidth)

    def log_density_and_grad(self, x):
        x = _as_batch(x, 2)
        h2 = self.bandwidth**2
        diff = self.points[None, :, :] - x[:, None, :]
        logk = -0.5 * np.einsum("ijk,ijk->ij", diff, diff) / h2
        lse = logsumexp(logk, axis=1)
        resp = np.exp(logk - lse[:, None])
        grad = np.einsum("ij,ijk->ik", resp, diff) / h2
        lp = lse - np.log(len(self.points)) - np.log(2.0 * np.pi * h2)
        return lp, grad


class PosteriorTarget(TargetDensity):
    """Tempered posterior ``gamma * loglik + log(flat prior)`` over a model's support."""

    def __init__(self, model: LikelihoodModel, data: Dataset, gamma: float = 1.0):
        self.model = model
        self.data = data
        self.gamma = float(gamma)
        self.dim = model.dim
        self.bounds = model.bounds

    def log_density_and_grad(self, x):
        x = _as_batch(x, self.dim)
        inside = self.model.in_support(x)
        lp = np.full(x.shape[0], -np.inf)
        grad = np.zeros_like(x)
        if np.any(inside):
            xi = x[inside]
            lp[inside] = self.gamma * self.model.loglik(xi, self.data)
            with np.errstate(invalid="ignore"):
                grad[inside] = self.gamma * self.model.grad_loglik(xi, self.data)
        return lp, grad


def target_log_density(target: TargetDensity, point) -> tuple[float, np.ndarray]:
    """Log of the unnormalized density at ``point`` and its gradient."""
    x = _as_batch(point, target.dim)
    if not target.in_bounds(x)[0]:
        raise ModelError(f"point {x[0].tolist()} outside target bounds")
    lp, g = target.log_density_and_grad(x)
    return float(lp[0]), g[0]


MODEL_REGISTRY = {
    "coin": CoinModel,
    "precession": PrecessionModel,
    "ramsey": RamseyModel,
    "phase": PhaseEstimationModel,
    "t1": t1_model,
    "t2": t2_model,
    "damped_ramsey": DampedRamseyModel,
    "multicos": MultiCosModel,
    "interval": IntervalModel,
}


def build_model(name: str, **params) -> LikelihoodModel:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(MODEL_REGISTRY)}") from None
    if "bounds" in params:
        params["bounds"] = [tuple(b) for b in params["bounds"]]
    return factory(**params)


def build_target(name: str, **params) -> TargetDensity:
    if name == "gaussian6d":
        return gaussian_6d()
    if name == "gaussian":
        return GaussianTarget(params.get("mean", [0.0]), params.get("cov"))
    if name == "rosenbrock":
        return RosenbrockTarget()
    if name == "smiley":
        pts = load_points(params["points"]) if "points" in params else None
        return SmileyTarget(pts, params.get("bandwidth", 0.25))
    if name == "oscillator":
        return harmonic_oscillator()
    raise ModelError(f"unknown target {name!r}")
