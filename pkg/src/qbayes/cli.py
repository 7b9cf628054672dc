"""Command-line entry point: ``qbayes {gen-data,infer,sample,design,bench}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
degeneracy.  Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .design import DesignError, run_design
from .harness import (
    RunSpec,
    build_controls,
    build_design,
    build_hmc,
    build_smc,
    dataset_to_csv,
    generate_dataset,
    infer,
    read_dataset,
    report_json,
    run_grf,
    run_study,
    stream,
    trace_csv,
)
from .mcmc import HmcKernel, RwmConfig, RwmKernel, chain_run
from .models import ModelError, build_model, build_target
from .particles import DegenerateCloudError, write_cloud
from .smc import SmcAborted

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Degenerate(Exception):
    def __init__(self, message, written):
        super().__init__(message)
        self.written = written


def _outputs(doc: dict) -> dict:
    names = {"dataset": "dataset.csv", "report": "report.json", "cloud": "cloud.jsonl",
             "samples": "samples.jsonl", "trace": "trace.csv"}
    names.update(doc.get("output", {}))
    return names


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _model(doc):
    m = doc["model"]
    return build_model(m["name"], **dict(m.get("params", {})))


def _truth(doc, model):
    truth = np.asarray(doc["truth"], dtype=float)
    if truth.size != model.dim:
        raise ModelError(f"truth has {truth.size} entries, model needs {model.dim}")
    return truth


def _dataset_from_config(doc, seed):
    cfgmod.require(doc, "model", "truth", "controls")
    model = _model(doc)
    truth = _truth(doc, model)
    ctl_spec = doc["controls"]
    ctl = build_controls(ctl_spec, model.control_kind, stream(seed, "controls"))
    return model, generate_dataset(model, truth, ctl, int(ctl_spec.get("shots", 1)), stream(seed, "data"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(doc, seed, out: Path, args) -> list:
    _, data = _dataset_from_config(doc, seed)
    path = out / _outputs(doc)["dataset"]
    _write(path, dataset_to_csv(data))
    return [path]


def _inference_report(res: dict, n_data: int) -> dict:
    rep = {k: v for k, v in res.items() if k != "cloud"}
    rep["n_data"] = n_data
    rep["evidence"] = float(np.exp(res["log_evidence"]))
    return rep


def cmd_infer(doc, seed, out: Path, args) -> list:
    cfgmod.require(doc, "model", "sampler")
    names = _outputs(doc)
    if args.dataset is not None:
        model = _model(doc)
        try:
            data = read_dataset(args.dataset)
        except OSError as exc:
            raise ModelError(f"cannot read dataset {args.dataset}: {exc.strerror}") from None
    else:
        model, data = _dataset_from_config(doc, seed)
    sampler = doc["sampler"]
    if sampler.get("kind", "sir") not in ("sir", "tle", "ecs"):
        raise cfgmod.ConfigError("infer supports sampler kinds sir, tle and ecs")
    build_smc(sampler)  # surface config errors before running
    report_path, cloud_path = out / names["report"], out / names["cloud"]
    try:
        res = infer(model, data, sampler, stream(seed, "run"))
    except SmcAborted as exc:
        part = exc.partial
        rep = {"sampler": sampler.get("kind", "sir"), "completed": False, "error": str(exc), "n_data": len(data),
               "history": part.history, "n_resamples": part.n_resamples}
        _write(report_path, report_json(rep))
        write_cloud(part.cloud, cloud_path)
        raise _Degenerate(str(exc), [report_path, cloud_path]) from None
    rep = _inference_report(res, len(data))
    rep["completed"] = True
    _write(report_path, report_json(rep))
    write_cloud(res["cloud"], cloud_path)
    return [report_path, cloud_path]


def cmd_sample(doc, seed, out: Path, args) -> list:
    cfgmod.require(doc, "mcmc")
    mc = doc["mcmc"]
    target = build_target(mc["target"], **dict(mc.get("target_params", {})))
    init = np.asarray(mc.get("init", [0.0] * target.dim), dtype=float)
    if init.size != target.dim:
        raise ModelError(f"init has {init.size} entries, target needs {target.dim}")
    kernel_name = mc["kernel"]
    if kernel_name == "rwm":
        kernel = RwmKernel(target, RwmConfig.isotropic(float(mc.get("rwm_sigma", 0.1)), target.dim))
    else:
        hmc_spec = dict(mc.get("hmc", {"step_size": 0.1}))
        if kernel_name == "nuts":
            hmc_spec["variant"] = "nuts"
        hmc = build_hmc(hmc_spec)
        kernel = HmcKernel(target, hmc)
    samples, stats = chain_run(kernel, init, int(mc.get("steps", 1000)), int(mc.get("burn_in", 0)),
                               int(mc.get("thin", 1)), stream(seed, "chain"))
    names = _outputs(doc)
    spath, rpath = out / names["samples"], out / names["report"]
    lines = [json.dumps({"theta": [float(v) for v in row]}) for row in samples]
    _write(spath, "".join(line + "\n" for line in lines))
    rep = {"target": mc["target"], "kernel": kernel_name, "n_samples": int(len(samples)), "stats": stats.as_dict()}
    if len(samples):
        rep["mean"] = samples.mean(axis=0).tolist()
        rep["max"] = samples.max(axis=0).tolist()
        rep["min"] = samples.min(axis=0).tolist()
    if stats.proposals and stats.mean_trajectory_length > 0:
        rep["log2_mean_trajectory_length"] = float(np.log2(stats.mean_trajectory_length))
    _write(rpath, report_json(rep))
    return [spath, rpath]


def cmd_design(doc, seed, out: Path, args) -> list:
    cfgmod.require(doc, "model", "truth", "design", "sampler")
    model = _model(doc)
    truth = _truth(doc, model)
    sampler = doc["sampler"]
    steps = int(doc["design"].get("steps", 15))
    names = _outputs(doc)
    rng, outcome_rng = stream(seed, "run"), stream(seed, "data")
    if sampler.get("kind") == "grf":
        res = run_grf(model, truth, steps, sampler, rng, outcome_rng)
        trace = res["sd_trace"]
        rep = res
        cloud = None
    else:
        dcfg = build_design({**doc["design"], **sampler.get("design", {})})
        smc = build_smc(sampler)
        try:
            report = run_design(model, truth, steps, dcfg, smc, rng, outcome_rng=outcome_rng)
        except DesignError as exc:
            if "degenerate" in str(exc):
                raise DegenerateCloudError(str(exc)) from None
            raise
        rep = {"sampler": "design", **report.as_dict()}
        cloud = report.cloud
        rep["mean"] = np.atleast_1d(np.average(cloud.locations, axis=0, weights=cloud.weights)).tolist()
        trace = [[s] for s in report.sd]
    rep["truth"] = truth.tolist()
    paths = [out / names["report"], out / names["trace"]]
    _write(paths[0], report_json(rep))
    _write(paths[1], trace_csv([[k + 1, t[0], t[0], t[0]] for k, t in enumerate(trace)]))
    if cloud is not None:
        write_cloud(cloud, out / names["cloud"])
        paths.append(out / names["cloud"])
    return paths


def cmd_bench(doc, seed, out: Path, args) -> list:
    cfgmod.require(doc, "model", "truth")
    if "samplers" not in doc and "sampler" not in doc:
        raise cfgmod.ConfigError("bench needs a 'sampler' or 'samplers' section")
    samplers = doc.get("samplers") or {"main": doc["sampler"]}
    for s in samplers.values():
        build_smc(s)
    study = doc.get("study", {})
    ctl = doc.get("controls")
    spec = RunSpec(
        model=doc["model"]["name"],
        model_params=dict(doc["model"].get("params", {})),
        truth=list(doc["truth"]),
        samplers=samplers,
        controls=ctl,
        shots=int(ctl.get("shots", 1)) if ctl else 1,
        design=doc.get("design"),
        seed=seed,
        n_datasets=int(study.get("n_datasets", 1)),
        runs_per_dataset=int(study.get("runs_per_dataset", 1)),
        success=study.get("success"),
    )
    _truth(doc, build_model(spec.model, **spec.model_params))
    report = run_study(spec, threads=args.threads)
    names = _outputs(doc)
    paths = [out / names["report"]]
    _write(paths[0], report_json(report))
    stem = Path(names["trace"])
    for name, summ in report["summary"].items():
        if "trace" in summ:
            p = out / f"{stem.stem}_{name}{stem.suffix}"
            _write(p, trace_csv(summ["trace"]))
            paths.append(p)
    return paths


COMMANDS = {
    "gen-data": cmd_gen_data,
    "infer": cmd_infer,
    "sample": cmd_sample,
    "design": cmd_design,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbayes", description="Bayesian inference toolkit for qubit characterization.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML or JSON run config")
        sp.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker processes; never changes results")
        if name == "infer":
            sp.add_argument("--dataset", default=None, help="dataset CSV (default: simulate from the config)")
    return p


def _fail(code: int, kind: str, message: str, extra: dict | None = None) -> int:
    payload = {"error": kind, "message": message, "exit_code": code}
    if extra:
        payload.update(extra)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads < 1:
        return _fail(EXIT_CONFIG, "config", "--threads must be >= 1")
    try:
        doc = cfgmod.load(args.config)
        seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
        if seed < 0:
            raise cfgmod.ConfigError("seed must be nonnegative")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[args.command](doc, seed, out, args)
    except _Degenerate as exc:
        return _fail(EXIT_NUMERIC, "degenerate", str(exc), {"partial": [str(p) for p in exc.written]})
    except DegenerateCloudError as exc:
        return _fail(EXIT_NUMERIC, "degenerate", str(exc))
    except (cfgmod.ConfigError, ModelError, ValueError, KeyError, TypeError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
