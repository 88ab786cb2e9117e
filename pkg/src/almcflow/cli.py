"""Experiment runner: presets, TOML configs, per-seed runs and comparison tables.

Usage::

    almcflow run gmm2d --scale 0.2 --jobs 2 --out runs/gmm2d
    almcflow run my_experiment.toml
    almcflow table runs/gmm2d
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w
from threadpoolctl import threadpool_limits

from .almc import AlmcConfig, AnnealPath, parse_weight_mode, run_almc
from .baselines import HmcConfig, hmc_chain, run_mc_ode
from .core import STREAM_HMC, STREAM_METRICS, STREAM_REFERENCE, RngStream, save_ensemble, save_samples
from .flow_ode import FlowConfig, run_flow
from .metrics import MetricReport, compare_samples, ksd_imq
from .target import AllenCahn1D, GaussianMixture, gmm100d5, kou20

log = logging.getLogger(__name__)

METHODS = ("almc_ode", "mc_ode", "hmc")
TABLE_METRICS = (
    "mean_err",
    "second_moment_err",
    "energy_distance",
    "mmd_rbf",
    "sliced_wasserstein",
    "ksd_u",
    "ksd_v",
    "acceptance_rate",
)

EXIT_OK, EXIT_CONFIG, EXIT_SEED_FAILURE = 0, 1, 2


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "methods": list(METHODS),
    "seeds": [0],
    "scale": 1.0,
    "notes": [],
    "target": {"name": "kou20"},
    "almc": {
        "n": 10000,
        "K": 1000,
        "delta_start": 0.01,
        "delta_end": 0.005,
        "lambda_schedule": "linear",
        "lambda_rate": 50.0,
        "lambda_end": 1.0,
        "ess_fraction": 0.5,
        "weight_mode": "jarzynski",
        "marginal_m": 2048,
        "weight_stride": 10,
        "resample_method": "systematic",
    },
    "flow": {"N": 10000, "M": 100, "epsilon": 1e-2, "interpolant": "follmer"},
    "hmc": {"step_size": 0.05, "leapfrog_steps": 10, "burn_in": 1000, "n_samples": 10000},
    "mc_ode": {"n_mc": 10000},
    "metrics": {"n_reference": 10000, "n_proj": 200, "min_mode_count": 1},
}

PRESETS = {
    "gmm2d": {
        "seeds": list(range(20)),
        "target": {"name": "kou20"},
        "almc": {"n": 10000, "K": 1000, "delta_start": 0.01, "delta_end": 0.005, "lambda_schedule": "linear"},
        "flow": {"N": 10000, "M": 100, "epsilon": 1e-2},
        "hmc": {"step_size": 0.05, "leapfrog_steps": 10, "burn_in": 1000, "n_samples": 10000},
        "notes": [
            "ALMC schedule chosen here: K=1000, linear lambda, delta 0.01 -> 0.005 "
            "(0.5 -> 0.05 violates the ULA stability bound delta * L < 2 for L = 100)",
        ],
    },
    "gmm100d": {
        "methods": ["almc_ode", "hmc"],
        "seeds": list(range(10)),
        "target": {"name": "gmm100d5", "d": 100},
        "almc": {"n": 10000, "K": 1000, "delta_start": 0.1, "delta_end": 0.05, "lambda_schedule": "linear"},
        "flow": {"N": 10000, "M": 100, "epsilon": 1e-2},
        "hmc": {"step_size": 0.05, "leapfrog_steps": 10, "burn_in": 1000, "n_samples": 10000},
        "notes": ["delta 1.0 -> 0.1 replaced by 0.1 -> 0.05: the former exceeds delta * L < 2 for L = 10"],
    },
    "allen_cahn": {
        "seeds": list(range(5)),
        "target": {"name": "allen_cahn", "d": 64, "a": 0.1, "b": 10.0, "beta": 20.0},
        "almc": {
            "n": 10000,
            "K": 10000,
            "delta_start": 0.0005,
            "delta_end": 0.0002,
            "lambda_schedule": "exp_saturating",
            "lambda_rate": 50.0,
        },
        "flow": {"N": 1000, "M": 100, "epsilon": 3e-3},
        "hmc": {"step_size": 0.02, "leapfrog_steps": 30, "burn_in": 2000, "n_samples": 1000},
        "mc_ode": {"n_mc": 10000},
        "notes": [
            "delta 0.1 -> 0.001 replaced by 0.0005 -> 0.0002: the curvature near the modes is about 500",
            "HMC keeps 1000 post-burn-in samples to match the flow sample count",
            "flow epsilon 3e-3: the Euler flow stops at 1 - epsilon, and 1e-2 leaves the fields visibly under-resolved",
        ],
    },
}

_TARGET_KEYS = ("name", "d", "a", "b", "beta", "means", "sigmas", "weights")
_SECTIONS = ("target", "almc", "flow", "hmc", "mc_ode", "metrics")
_TOP_LEVEL = ("preset", "methods", "seeds", "scale", "notes", "scale_applied")


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings (preset merged, scale applied)."""

    target: dict
    methods: list
    almc: dict
    flow: dict
    hmc: dict
    mc_ode: dict
    metrics: dict
    seeds: list
    scale: float = 1.0
    preset: str = ""
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "preset": self.preset,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "scale": self.scale,
            "notes": list(self.notes),
            "target": dict(self.target),
            "almc": dict(self.almc),
            "flow": dict(self.flow),
            "hmc": dict(self.hmc),
            "mc_ode": dict(self.mc_ode),
            "metrics": dict(self.metrics),
            "scale_applied": True,
        }


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _scaled(value, f):
    return max(1, int(round(value * f)))


def resolve_config(raw: dict, scale: float | None = None, seeds=None) -> ExperimentConfig:
    """Merge ``raw`` over its preset and the defaults, validate, and apply ``scale``.

    ``scale`` multiplies n, N, K and the reference-sample count.
    """
    raw = dict(raw)
    unknown = set(raw) - set(_SECTIONS) - set(_TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    preset = raw.pop("preset", "")
    # a resolved config.toml already carries scaled sizes
    already_scaled = bool(raw.pop("scale_applied", False))
    merged = copy.deepcopy(_DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = _merge(merged, PRESETS[preset])
    for section in _SECTIONS:
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        allowed = set(_TARGET_KEYS) if section == "target" else set(merged[section])
        extra = set(given) - allowed
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    merged = _merge(merged, raw)
    if scale is not None:
        merged["scale"] = float(scale)
    if seeds is not None:
        merged["seeds"] = list(seeds)

    f = float(merged["scale"])
    if not f > 0:
        raise ConfigError("scale must be positive")
    for method in merged["methods"]:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {list(METHODS)}")
    if not merged["seeds"]:
        raise ConfigError("need at least one seed")
    for s in merged["seeds"]:
        if not isinstance(s, int) or not 0 <= s < 2**64:
            raise ConfigError(f"seeds must be 64-bit unsigned integers, got {s!r}")
    if f != 1.0 and not already_scaled:
        merged["almc"]["n"] = _scaled(merged["almc"]["n"], f)
        merged["almc"]["K"] = _scaled(merged["almc"]["K"], f)
        merged["flow"]["N"] = _scaled(merged["flow"]["N"], f)
        merged["metrics"]["n_reference"] = _scaled(merged["metrics"]["n_reference"], f)

    cfg = ExperimentConfig(
        target=merged["target"],
        methods=list(merged["methods"]),
        almc=merged["almc"],
        flow=merged["flow"],
        hmc=merged["hmc"],
        mc_ode=merged["mc_ode"],
        metrics=merged["metrics"],
        seeds=list(merged["seeds"]),
        scale=f,
        preset=preset,
        notes=list(merged["notes"]),
    )
    # fail early on anything the builders reject
    try:
        make_target(cfg.target)
        make_path(cfg.almc)
        make_flow_config(cfg.flow)
        parse_weight_mode(cfg.almc["weight_mode"])
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def load_config(source, scale=None, seeds=None) -> ExperimentConfig:
    """``source`` is a preset name or a path to a TOML file."""
    if source in PRESETS:
        return resolve_config({"preset": source}, scale, seeds)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"{source!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a file")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return resolve_config(raw, scale, seeds)


def make_target(spec: dict):
    name = spec.get("name")
    if name == "kou20":
        return kou20()
    if name == "gmm100d5":
        return gmm100d5(int(spec.get("d", 100)))
    if name == "allen_cahn":
        return AllenCahn1D(int(spec.get("d", 64)), float(spec.get("a", 0.1)), float(spec.get("b", 10.0)), float(spec.get("beta", 20.0)))
    if name == "gmm":
        return GaussianMixture(spec["means"], spec["sigmas"], spec.get("weights"))
    raise ValueError(f"unknown target {name!r}")


def make_path(almc: dict) -> AnnealPath:
    K = int(almc["K"])
    kind = almc["lambda_schedule"]
    if kind == "linear":
        return AnnealPath.linear(K, almc["delta_start"], almc["delta_end"], almc.get("lambda_end", 1.0))
    if kind == "exp_saturating":
        return AnnealPath.exp_saturating(K, almc["lambda_rate"], almc["delta_start"], almc["delta_end"])
    raise ValueError(f"unknown lambda schedule {kind!r}")


def make_flow_config(flow: dict) -> FlowConfig:
    return FlowConfig(flow["interpolant"], int(flow["M"]), int(flow["N"]), float(flow["epsilon"]))


def emit_mode_coverage(samples, g: GaussianMixture, min_count=1):
    """Assign each sample to its nearest mean when within 3 sigma of it.

    Returns ``{"counts": [...], "unassigned": u, "covered": c}`` where a mode
    counts as covered once it holds ``min_count`` samples.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    counts = np.zeros(g.n_components, dtype=int)
    unassigned = 0
    for lo in range(0, len(samples), 4096):
        block = samples[lo : lo + 4096]
        sq = np.sum(block * block, 1)[:, None] - 2.0 * block @ g.means.T + np.sum(g.means**2, 1)[None, :]
        nearest = np.argmin(sq, axis=1)
        dist = np.sqrt(np.maximum(sq[np.arange(len(block)), nearest], 0.0))
        inside = dist <= 3.0 * g.sigmas[nearest]
        counts += np.bincount(nearest[inside], minlength=g.n_components)
        unassigned += int((~inside).sum())
    return {"counts": counts.tolist(), "unassigned": unassigned, "covered": int((counts >= min_count).sum())}


def emit_field_polarity(samples):
    """Fractions of fields whose spatial mean is positive and negative."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    mean = samples.mean(axis=1)
    return float(np.mean(mean > 0)), float(np.mean(mean < 0))


def _run_method(cfg: ExperimentConfig, method, seed, target, seed_dir):
    """Run one sampler; returns ``(samples, info)``."""
    root = RngStream(seed)
    info = {}
    if method == "almc_ode":
        a = cfg.almc
        mode = a["weight_mode"]
        if mode == "marginal":
            mode = f"marginal:{a['marginal_m']}"
        mode = parse_weight_mode(mode, int(a["n"]))
        res = run_almc(
            AlmcConfig(
                n=int(a["n"]),
                path=make_path(a),
                target=target,
                weight_mode=mode,
                ess_threshold=float(a["ess_fraction"]) * int(a["n"]),
                seed=seed,
                weight_stride=int(a["weight_stride"]),
                resample_method=a["resample_method"],
            )
        )
        res.write_diagnostics(seed_dir / "diagnostics.jsonl")
        save_ensemble(res.ensemble, seed_dir / "particles.csv", seed=seed)
        info.update(
            n_resamples=res.n_resamples,
            final_ess=res.ensemble.ess(),
            log_z_estimate=res.log_z,
        )
        samples = run_flow(make_flow_config(cfg.flow), res.ensemble, root)
    elif method == "mc_ode":
        out = run_mc_ode(make_flow_config(cfg.flow), target, int(cfg.mc_ode["n_mc"]), root)
        info.update(min_proposal_ess=out.min_proposal_ess, degenerate=out.degenerate)
        with open(seed_dir / "diagnostics.jsonl", "w") as fh:
            for m, e in enumerate(out.proposal_ess):
                fh.write(json.dumps({"step": m, "proposal_ess": float(e)}) + "\n")
        samples = out.samples
    elif method == "hmc":
        h = cfg.hmc
        init = root.child(STREAM_HMC, 0).generator().standard_normal(target.dim)
        out = hmc_chain(
            HmcConfig(float(h["step_size"]), int(h["leapfrog_steps"]), int(h["burn_in"]), int(h["n_samples"]), seed),
            target,
            init,
        )
        info.update(acceptance_rate=out.acceptance_rate, burn_in_acceptance_rate=out.burn_in_acceptance_rate)
        samples = out.samples
    else:
        raise ValueError(f"unknown method {method!r}")
    return samples, info


def _score(cfg: ExperimentConfig, method, seed, target, samples, info) -> MetricReport:
    report = MetricReport(acceptance_rate=info.get("acceptance_rate"))
    report.extra = {k: v for k, v in info.items() if k != "acceptance_rate"}
    if not np.all(np.isfinite(samples)):
        report.undefined = list(TABLE_METRICS[:-1])
        report.extra["non_finite_samples"] = int((~np.isfinite(samples).all(axis=1)).sum())
        return report
    root = RngStream(seed)
    if isinstance(target, GaussianMixture):
        ref = target.sample(int(cfg.metrics["n_reference"]), root.child(STREAM_REFERENCE).generator())
        for key, value in compare_samples(samples, ref, root.child(STREAM_METRICS), int(cfg.metrics["n_proj"])).items():
            setattr(report, key, value)
        report.extra["mode_coverage"] = emit_mode_coverage(samples, target, int(cfg.metrics["min_mode_count"]))
        report.undefined = [k for k in TABLE_METRICS[:5] if getattr(report, k) is None] + ["ksd_u", "ksd_v"]
    else:
        pos, neg = emit_field_polarity(samples)
        report.extra["polarity"] = {"positive": pos, "negative": neg}
        report.undefined = ["mean_err", "second_moment_err", "energy_distance", "mmd_rbf", "sliced_wasserstein"]
        if method == "mc_ode" and info.get("degenerate"):
            # proposal weights collapsed: the flow output carries no information about the target
            report.undefined += ["ksd_u", "ksd_v"]
            report.extra["ksd_status"] = "undefined"
        else:
            report.ksd_u, report.ksd_v = ksd_imq(samples, target)
            report.extra["ksd_status"] = "defined"
    return report


def _report_json(report: MetricReport):
    data = report.to_dict()
    # wall-clock time lives in timing.json so metrics.json stays reproducible
    data.pop("runtime_seconds", None)
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def run_single(cfg: ExperimentConfig, method: str, seed: int, out_dir) -> dict:
    """Run and score one (method, seed) pair, writing its files under ``out_dir/method/seed_<seed>``."""
    seed_dir = Path(out_dir) / method / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        target = make_target(cfg.target)
        samples, info = _run_method(cfg, method, seed, target, seed_dir)
        save_samples(samples, seed_dir / "samples.csv", seed=seed)
        report = _score(cfg, method, seed, target, samples, info)
    except Exception as err:  # recorded per seed; the experiment carries on
        log.exception("%s seed %s failed", method, seed)
        (seed_dir / "error.json").write_text(
            json.dumps({"method": method, "seed": seed, "error": type(err).__name__, "message": str(err)}, indent=2) + "\n"
        )
        return {"method": method, "seed": seed, "ok": False, "error": f"{type(err).__name__}: {err}"}
    report.runtime_seconds = time.perf_counter() - start
    (seed_dir / "metrics.json").write_text(_report_json(report))
    (seed_dir / "timing.json").write_text(json.dumps({"runtime_seconds": report.runtime_seconds}) + "\n")
    return {"method": method, "seed": seed, "ok": True, "report": report.to_dict()}


def _thread_cap():
    """Upper bound on concurrent worker processes from ``ALMCFLOW_THREADS``."""
    value = os.environ.get("ALMCFLOW_THREADS")
    return int(value) if value else None


def _job(cfg_dict, method, seed, out_dir):
    cfg = ExperimentConfig(**{k: v for k, v in cfg_dict.items() if k != "scale_applied"})
    # multi-threaded BLAS reductions change the last bits of results, so each
    # run is single-threaded and parallelism comes from running seeds side by side
    with threadpool_limits(1):
        return run_single(cfg, method, seed, out_dir)


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, scatter: bool = False) -> list:
    """Run every (method, seed) pair, then write the aggregate table.

    Returns one result dict per pair, in config order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.toml").write_text(tomli_w.dumps(cfg.to_dict()))
    tasks = [(method, seed) for method in cfg.methods for seed in cfg.seeds]
    cfg_dict = cfg.to_dict()
    if jobs <= 1:
        results = [_job(cfg_dict, m, s, out_dir) for m, s in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_job, cfg_dict, m, s, out_dir) for m, s in tasks]
            results = [f.result() for f in futures]
    if scatter:
        for r in results:
            if r["ok"]:
                _write_scatter(out_dir / r["method"] / f"seed_{r['seed']}")
    write_table(out_dir)
    return results


def _write_scatter(seed_dir):
    with open(seed_dir / "samples.csv", newline="") as src, open(seed_dir / "scatter.csv", "w", newline="") as dst:
        reader = csv.reader(src)
        writer = csv.writer(dst)
        header = next(reader)
        writer.writerow(["x", "y"])
        two = min(2, len(header) - 2)
        for row in reader:
            writer.writerow(row[1 : 1 + two])


def collect_reports(out_dir):
    """``{method: [metrics dict per surviving seed]}`` from a run directory."""
    out = {}
    for path in sorted(Path(out_dir).glob("*/seed_*/metrics.json"), key=lambda p: (p.parts[-3], int(p.parts[-2][5:]))):
        out.setdefault(path.parts[-3], []).append(json.loads(path.read_text()))
    return out


def aggregate(reports: dict):
    """Mean and sample standard deviation of each metric over seeds with a defined value."""
    rows = []
    for method in sorted(reports, key=lambda m: METHODS.index(m) if m in METHODS else len(METHODS)):
        for metric in TABLE_METRICS:
            values = [r[metric] for r in reports[method] if r.get(metric) is not None]
            if values:
                arr = np.array(values, dtype=float)
                std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
                rows.append({"method": method, "metric": metric, "mean": float(arr.mean()), "std": std, "n_seeds": arr.size})
            elif reports[method] and all(metric in r.get("undefined", []) for r in reports[method]):
                rows.append({"method": method, "metric": metric, "mean": None, "std": None, "n_seeds": 0})
    return rows


def format_table(rows) -> str:
    methods = list(dict.fromkeys(r["method"] for r in rows))
    metrics = [m for m in TABLE_METRICS if any(r["metric"] == m for r in rows)]
    cell = {(r["method"], r["metric"]): r for r in rows}
    lines = [[""] + methods]
    for metric in metrics:
        line = [metric]
        for method in methods:
            r = cell.get((method, metric))
            if r is None:
                line.append("---")
            elif r["mean"] is None:
                line.append("undefined")
            else:
                line.append(f"{r['mean']:.4f} ± {r['std']:.4f}")
        lines.append(line)
    widths = [max(len(line[j]) for line in lines) for j in range(len(lines[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines) + "\n"


def write_table(out_dir):
    out_dir = Path(out_dir)
    rows = aggregate(collect_reports(out_dir))
    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "metric", "mean", "std", "n_seeds"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("undefined" if v is None else v) for k, v in r.items()})
    text = format_table(rows)
    (out_dir / "table.txt").write_text(text)
    return text


def _parse_seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="almcflow", description="Annealed Langevin + probability-flow ODE sampling experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a preset name or TOML file")
    run.add_argument("config", help=f"preset ({', '.join(sorted(PRESETS))}) or TOML path")
    run.add_argument("--scale", type=float, default=None, help="multiply n, N and K by this factor")
    run.add_argument("--jobs", type=int, default=1, help="concurrent (method, seed) runs")
    run.add_argument("--out", default=None, help="output directory (default runs/<name>)")
    run.add_argument("--seeds", type=_parse_seeds, default=None, help="comma-separated seed override")
    run.add_argument("--scatter", action="store_true", help="also write two-column scatter CSVs")
    table = sub.add_parser("table", help="aggregate metrics.json files under a run directory")
    table.add_argument("dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "table":
        if not Path(args.dir).is_dir():
            print(f"error: no such directory {args.dir}", file=sys.stderr)
            return EXIT_CONFIG
        sys.stdout.write(write_table(args.dir))
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.scale, args.seeds)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.path.join("runs", cfg.preset or Path(args.config).stem)
    jobs = args.jobs if _thread_cap() is None else max(1, min(args.jobs, _thread_cap()))
    results = run_experiment(cfg, out, jobs, args.scatter)
    sys.stdout.write((Path(out) / "table.txt").read_text())
    failed = [r for r in results if not r["ok"]]
    for r in failed:
        print(f"failed: {r['method']} seed {r['seed']}: {r['error']}", file=sys.stderr)
    return EXIT_SEED_FAILURE if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
