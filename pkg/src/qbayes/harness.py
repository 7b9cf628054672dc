"""Study orchestration: synthetic datasets, seeded multi-run studies, summaries.

A study is a grid of cells ``(dataset, run)``.  Every random stream is
derived from one root seed plus a purpose tag and the cell coordinates, so
cells can run in any order (or in parallel) and the report does not change.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .design import DesignConfig, DesignError, run_design
from .mcmc import HmcConfig, RwmConfig, rwm_step
from .models import (
    Dataset,
    LikelihoodModel,
    ModelError,
    PhaseControl,
    SmileyTarget,
    TimeControl,
    build_model,
)
from .particles import (
    DegenerateCloudError,
    ParticleCloud,
    cloud_covariance,
    cloud_mean,
)
from .smc import (
    MarkovMoves,
    SmcConfig,
    TemperSchedule,
    grf_run,
    sequential_targets_run,
    sir_run,
    tle_run,
)
from .subsampling import EcsConfig, tle_ecs_run

log = logging.getLogger(__name__)

DATASET_HEADER = ["outcome", "control_kind", "t", "m", "offset"]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def stream(root_seed: int, tag: str, dataset: int = 0, run: int = 0, particle: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, dataset, run, particle) cell."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), _tag_key(tag), dataset, run, particle]))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def _controls_dataset(kind: str, controls) -> Dataset:
    n = len(controls)
    if kind == "time":
        return Dataset(np.zeros(n), "time", t=[c.t for c in controls])
    if kind == "phase":
        return Dataset(np.zeros(n), "phase", m=[c.m for c in controls], offset=[c.offset for c in controls])
    return Dataset(np.zeros(n), "none")


def generate_dataset(model: LikelihoodModel, true_params, controls, shots_per_control: int, rng) -> Dataset:
    """Simulated outcomes, ``shots_per_control`` consecutive records per control."""
    controls = list(controls)
    if not controls:
        raise ModelError("need at least one control")
    if shots_per_control < 1:
        raise ModelError("shots_per_control must be >= 1")
    if not model.in_support(np.asarray(true_params, dtype=float)[None])[0]:
        raise ModelError("true parameters lie outside the model support")
    expanded = [c for c in controls for _ in range(shots_per_control)]
    template = _controls_dataset(model.control_kind, expanded)
    return model.sample_outcomes(true_params, template, rng)


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATASET_HEADER)
    for k in range(len(data)):
        w.writerow([int(data.outcomes[k]), data.kind, repr(float(data.t[k])), int(data.m[k]), repr(float(data.offset[k]))])
    return buf.getvalue()


def write_dataset(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(dataset_to_csv(data))


def read_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DATASET_HEADER:
            raise ModelError(f"dataset header must be {','.join(DATASET_HEADER)}")
        rows = list(reader)
    kinds = {r["control_kind"] for r in rows}
    if len(kinds) > 1:
        raise ModelError(f"mixed control kinds in dataset: {sorted(kinds)}")
    kind = kinds.pop() if kinds else "none"
    return Dataset(
        [int(r["outcome"]) for r in rows],
        kind,
        t=[float(r["t"]) for r in rows],
        m=[int(r["m"]) for r in rows],
        offset=[float(r["offset"]) for r in rows],
    )


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def quartiles(values) -> tuple[float, float, float]:
    """(q25, median, q75) with the lower-interpolation convention."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (float("nan"),) * 3
    q = np.percentile(v, [25, 50, 75], method="lower")
    return float(q[0]), float(q[1]), float(q[2])


def lower_median(values) -> float:
    return quartiles(values)[1]


@dataclass
class SuccessCriteria:
    max_mean_distance: float = 0.01
    max_mode_sd: float = 0.01
    max_calibration_gap: float = 0.01
    max_imbalance: float = 0.4

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ValueError("success thresholds must be positive")


def permutation_modes(truth) -> np.ndarray:
    """All distinct orderings of ``truth`` (modes of a permutation-symmetric model)."""
    perms = sorted(set(itertools.permutations([float(v) for v in truth])))
    return np.array(perms)


def success_evaluate(cloud: ParticleCloud, modes, criteria: SuccessCriteria) -> tuple[bool, dict]:
    """Nearest-mode assignment, then accuracy, precision, calibration and coverage checks."""
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    x = cloud.locations
    w = np.exp(cloud.log_weights - np.max(cloud.log_weights))
    w = w / w.sum()
    dist = np.linalg.norm(x[:, None, :] - modes[None, :, :], axis=2)
    label = dist.argmin(axis=1)
    near = dist[np.arange(len(x)), label]
    k = len(modes)
    occupancy = np.array([w[label == j].sum() for j in range(k)])
    sds, gaps = np.zeros(k), np.zeros(k)
    for j in range(k):
        sel = label == j
        if occupancy[j] <= 0:
            sds[j], gaps[j] = np.inf, np.inf
            continue
        wj = w[sel] / occupancy[j]
        # centring on one member keeps a cloud of identical points at exactly zero spread
        r = x[sel] - x[sel][0]
        r = r - (wj[:, None] * r).sum(axis=0)
        mu = x[sel][0] - r[0]
        sds[j] = math.sqrt(max(float((wj * (r**2).sum(axis=1)).sum()), 0.0))
        gaps[j] = abs(float(np.linalg.norm(mu - modes[j])) - sds[j])
    covered = occupancy > 0
    metrics = {
        "mean_distance": float((w * near).sum()),
        "mode_sd": float((occupancy[covered] * sds[covered]).sum() / occupancy[covered].sum()),
        "calibration_gap": float(np.max(gaps)),
        "imbalance": float(np.max(np.abs(occupancy - 1.0 / k))),
        "occupancy": occupancy.tolist(),
    }
    ok = (
        metrics["mean_distance"] <= criteria.max_mean_distance
        and np.all(sds <= criteria.max_mode_sd)
        and metrics["calibration_gap"] <= criteria.max_calibration_gap
        and metrics["imbalance"] <= criteria.max_imbalance
    )
    return bool(ok), metrics


# ---------------------------------------------------------------------------
# Builders from plain dictionaries
# ---------------------------------------------------------------------------


def build_hmc(spec: dict | None) -> Optional[HmcConfig]:
    if spec is None:
        return None
    spec = dict(spec)
    if "mass_diag" in spec and spec["mass_diag"] is not None:
        spec["mass_diag"] = np.asarray(spec["mass_diag"], dtype=float)
    return HmcConfig(**spec)


def build_smc(spec: dict) -> SmcConfig:
    mv = dict(spec.get("moves", {}))
    hmc = build_hmc(mv.pop("hmc", None))
    if "target_acceptance" in mv:
        mv["target_acceptance"] = tuple(mv["target_acceptance"])
    moves = MarkovMoves(hmc=hmc, **mv)
    keys = ("n_particles", "ess_threshold", "propagation", "liu_west_a", "reweight_denominator", "data_order")
    return SmcConfig(moves=moves, **{k: spec[k] for k in keys if k in spec})


def build_controls(spec: dict, kind: str, rng=None) -> list:
    """Controls from ``values`` / ``grid`` / ``random`` entries (times) or phase lists."""
    if kind == "phase":
        ms = spec["m"]
        offs = spec.get("offset", [0.0] * len(ms))
        return [PhaseControl(int(m), float(o)) for m, o in zip(ms, offs)]
    if kind == "none":
        from .models import NO_CONTROL

        return [NO_CONTROL] * int(spec.get("n", 1))
    if "values" in spec:
        ts = np.asarray(spec["values"], dtype=float)
    elif "grid" in spec:
        g = spec["grid"]
        n = int(g["n"])
        if g.get("include_start", False):
            ts = np.linspace(g["start"], g["stop"], n)
        else:
            ts = np.linspace(g["start"], g["stop"], n + 1)[1:]
    elif "random" in spec:
        r = spec["random"]
        ts = np.sort(rng.uniform(r["low"], r["high"], int(r["n"])))
    else:
        raise ModelError("time controls need 'values', 'grid' or 'random'")
    return [TimeControl(float(t)) for t in ts]


def build_design(spec: dict) -> DesignConfig:
    keys = set(DesignConfig.__dataclass_fields__)
    return DesignConfig(**{k: v for k, v in spec.items() if k in keys})


# ---------------------------------------------------------------------------
# Single inference runs
# ---------------------------------------------------------------------------


def _final(cloud: ParticleCloud) -> dict:
    cov = cloud_covariance(cloud)
    return {"mean": cloud_mean(cloud).tolist(), "sd": np.sqrt(np.maximum(np.diag(cov), 0.0)).tolist()}


def infer(model: LikelihoodModel, data: Dataset, sampler: dict, rng) -> dict:
    """Run one sampler on ``data``; returns a JSON-ready dict plus ``cloud``.

    Raises :class:`DegenerateCloudError` (with ``partial`` when available).
    """
    kind = sampler.get("kind", "sir")
    smc = build_smc(sampler)
    out: dict = {"sampler": kind}
    if kind == "sir":
        res = sir_run(model, data, smc, rng)
        trace = [h["sd"] for h in res.history]
        ess = [h["ess"] for h in res.history]
    elif kind in ("tle", "ecs"):
        sched = TemperSchedule.even(int(sampler.get("tempering_steps", 10)))
        if kind == "tle":
            res = tle_run(model, data, sched, smc, rng, always_move=bool(sampler.get("always_move", False)))
        else:
            sub = sampler.get("subsampling", {})
            hmc = build_hmc(smc_hmc_spec(sampler)) or HmcConfig(step_size=0.3, path_length=10)
            ecs = EcsConfig(hmc, int(sub.get("size", 50)), int(sub.get("blocks", 3)), sub.get("guard", 10.0))
            er = tle_ecs_run(model, data, sched, smc, ecs, rng, n_moves=int(sub.get("n_moves", smc.moves.n_moves)),
                             rebuild_sd=float(sub.get("rebuild_sd", 0.5)))
            res = er.result
            out.update(index_acceptance=er.index_acceptance, hmc_acceptance=er.hmc_acceptance, guard_fallbacks=er.guard_fallbacks)
        trace = [h["sd"] for h in res.history]
        ess = [h.get("ess") for h in res.history]
    else:
        raise ModelError(f"unknown sampler kind {kind!r}")
    out.update(_final(res.cloud))
    out.update(log_evidence=float(res.log_evidence), n_resamples=res.n_resamples, sd_trace=trace, ess_trace=ess)
    out["cloud"] = res.cloud
    return out


def smc_hmc_spec(sampler: dict):
    return sampler.get("moves", {}).get("hmc")


def run_grf(model: LikelihoodModel, truth, n_steps: int, spec: dict, rng, outcome_rng) -> dict:
    """Gaussian rejection filter with ``t = 1/sd`` controls against a simulated device."""
    from .models import sample_outcome

    def experiment(mu, sd, _rng):
        return sample_outcome(model, truth, TimeControl(1.0 / max(sd, 1e-12)), outcome_rng)

    lo, hi = model.bounds[0]
    res = grf_run(model, experiment, n_steps, spec.get("prior_mean", 0.5 * (lo + hi)),
                  spec.get("prior_var", (hi - lo) ** 2 / 12.0), rng, int(spec.get("n_candidates", 1000)), spec.get("period"))
    return {"sampler": "grf", "mean": [res.mean], "sd": [math.sqrt(res.variance)],
            "sd_trace": [[math.sqrt(v)] for v in res.variances], "flags": res.flags}


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


@dataclass
class RunSpec:
    model: str
    truth: list
    samplers: dict  # name -> sampler dict
    model_params: dict = field(default_factory=dict)
    controls: Optional[dict] = None
    shots: int = 1
    design: Optional[dict] = None  # with "steps"
    seed: int = 0
    n_datasets: int = 1
    runs_per_dataset: int = 1
    success: Optional[dict] = None  # SuccessCriteria fields; modes from truth permutations

    def __post_init__(self):
        if self.n_datasets < 1 or self.runs_per_dataset < 1:
            raise ValueError("need at least one dataset and one run")
        if not self.samplers:
            raise ValueError("need at least one sampler")
        if self.controls is None and self.design is None:
            raise ValueError("need either controls or a design section")


def _cell(spec: RunSpec, i: int, j: int) -> dict:
    model = build_model(spec.model, **spec.model_params)
    truth = np.asarray(spec.truth, dtype=float)
    criteria = SuccessCriteria(**spec.success) if spec.success is not None else None
    cell = {"dataset": i, "run": j, "results": {}}
    data = None
    if spec.controls is not None:
        ctl = build_controls(spec.controls, model.control_kind, stream(spec.seed, "controls", i))
        data = generate_dataset(model, truth, ctl, spec.shots, stream(spec.seed, "data", i))
    for name in sorted(spec.samplers):
        sampler = spec.samplers[name]
        rng = stream(spec.seed, f"run:{name}", i, j)
        try:
            if spec.design is not None:
                steps = int(spec.design.get("steps", 15))
                if sampler.get("kind") == "grf":
                    res = run_grf(model, truth, steps, sampler, rng, stream(spec.seed, "data", i, j))
                else:
                    dcfg = build_design({**spec.design, **sampler.get("design", {})})
                    rep = run_design(model, truth, steps, dcfg, build_smc(sampler), rng,
                                     outcome_rng=stream(spec.seed, "data", i, j))
                    res = {"sampler": "design", **_final(rep.cloud), "sd_trace": [[s] for s in rep.sd],
                           "ess_trace": rep.ess, "precision": rep.precision, "final_variance": rep.final_variance,
                           "elapsed_time": rep.total_time, "log_evidence": rep.log_evidence,
                           "n_resamples": rep.n_resamples, "cloud": rep.cloud}
            else:
                res = infer(model, data, sampler, rng)
        except (DegenerateCloudError, DesignError, FloatingPointError, np.linalg.LinAlgError) as exc:
            cell["results"][name] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        cloud = res.pop("cloud", None)
        if criteria is not None and cloud is not None:
            ok, metrics = success_evaluate(cloud, permutation_modes(truth), criteria)
            res["success"] = ok
            res["success_metrics"] = metrics
        sd = np.asarray(res["sd"])
        err = np.abs(np.asarray(res["mean"]) - truth)
        with np.errstate(divide="ignore"):
            res["within_3sd"] = bool(np.all(err <= 3.0 * sd))
        cell["results"][name] = res
    return cell


def _cell_star(args):
    return _cell(*args)


def run_study(spec: RunSpec, threads: int = 1) -> dict:
    """Run every (dataset, run) cell and aggregate; ``threads`` affects wall time only."""
    jobs = [(spec, i, j) for i in range(spec.n_datasets) for j in range(spec.runs_per_dataset)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell_star, jobs))
    else:
        cells = [_cell_star(job) for job in jobs]
    cells.sort(key=lambda c: (c["dataset"], c["run"]))
    summary = {name: summarize(cells, name) for name in sorted(spec.samplers)}
    return {"spec": asdict(spec), "cells": cells, "summary": summary}


def summarize(cells, name: str) -> dict:
    ok = [c["results"][name] for c in cells if "error" not in c["results"][name]]
    out: dict = {"runs": len(cells), "failures": len(cells) - len(ok)}
    if not ok:
        return out
    dim = len(ok[0]["mean"])
    out["mean"] = [quartiles([r["mean"][d] for r in ok]) for d in range(dim)]
    out["sd"] = [quartiles([r["sd"][d] for r in ok]) for d in range(dim)]
    out["within_3sd_rate"] = float(np.mean([r["within_3sd"] for r in ok]))
    if "log_evidence" in ok[0]:
        out["log_evidence"] = quartiles([r["log_evidence"] for r in ok])
    if "precision" in ok[0]:
        out["precision"] = quartiles([r["precision"] for r in ok])
        out["final_variance"] = quartiles([r["final_variance"] for r in ok])
    if "success" in ok[0]:
        out["success_rate"] = sum(r["success"] for r in ok) / len(cells)
        out["mode_sd"] = quartiles([r["success_metrics"]["mode_sd"] for r in ok])
    out["trace"] = sd_trace(ok)
    return out


def sd_trace(results) -> list:
    """Per-iteration (iteration, median, q25, q75) of the first-coordinate SD."""
    n = min(len(r["sd_trace"]) for r in results)
    rows = []
    for k in range(n):
        q25, med, q75 = quartiles([r["sd_trace"][k][0] for r in results])
        rows.append([k + 1, med, q25, q75])
    return rows


def trace_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "median_sd", "q25", "q75"])
    for it, med, q25, q75 in rows:
        w.writerow([it, repr(float(med)), repr(float(q25)), repr(float(q75))])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------

SMILEY_PRIOR_MEAN = np.array([0.0, 12.5])
SMILEY_PRIOR_COV = np.diag([10.0, 20.0])


def smiley_prior(n: int, rng) -> np.ndarray:
    return rng.multivariate_normal(SMILEY_PRIOR_MEAN, SMILEY_PRIOR_COV, size=n)


def smiley_chunks(n_points: int = 768, n_chunks: int = 8) -> list:
    size = math.ceil(n_points / n_chunks)
    return [min(size * (k + 1), n_points) for k in range(n_chunks)]


def smiley_smc(rng, n_particles: int = 128, n_chunks: int = 8, hmc: HmcConfig | None = None, target: SmileyTarget | None = None) -> ParticleCloud:
    """SMC over growing point subsets with HMC moves and a leave-one-out KDE denominator."""
    target = SmileyTarget() if target is None else target
    targets = [target.subset(n) for n in smiley_chunks(len(target.points), n_chunks)]
    hmc = hmc or HmcConfig(step_size=0.05, path_length=20, mass_diag=np.ones(2))
    cfg = SmcConfig(n_particles=n_particles, ess_threshold=1.0, propagation="markov",
                    moves=MarkovMoves("hmc", 1, hmc=hmc), reweight_denominator="loo_kde")
    init = ParticleCloud.uniform(smiley_prior(n_particles, rng))
    return sequential_targets_run(targets, init, cfg, rng).cloud


def smiley_rwm_chains(rng, n_chains: int = 128, n_steps: int = 8, sigma: float = 0.05, target: SmileyTarget | None = None) -> ParticleCloud:
    """Independent random-walk chains on the full target from the same prior."""
    target = SmileyTarget() if target is None else target
    x = smiley_prior(n_chains, rng)
    cfg = RwmConfig.isotropic(sigma, 2)
    for _ in range(n_steps):
        x, _ = rwm_step(x, target, cfg, rng)
    return ParticleCloud.uniform(x)


def smiley_occupancy(cloud: ParticleCloud, target: SmileyTarget | None = None, radius: float = 0.5) -> np.ndarray:
    """Weight share in (left eye, right eye, mouth).

    A particle belongs to the feature of its nearest point if that point is
    within ``radius``; points are labelled by row index modulo 3.
    """
    target = SmileyTarget() if target is None else target
    pts = target.points
    d = np.linalg.norm(cloud.locations[:, None, :] - pts[None, :, :], axis=2)
    near = d.argmin(axis=1)
    close = d[np.arange(len(near)), near] <= radius
    label = near % 3
    w = np.exp(cloud.log_weights - np.max(cloud.log_weights))
    w = w / w.sum()
    return np.array([w[close & (label == k)].sum() for k in range(3)])


def smiley_balanced(occupancy, min_share: float = 0.10, min_total: float = 0.9) -> bool:
    occ = np.asarray(occupancy)
    return bool(occ.min() >= min_share and occ.sum() >= min_total)
