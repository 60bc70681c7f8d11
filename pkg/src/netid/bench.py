"""Configuration-driven Monte Carlo benchmark harness.

An experiment is one network (preset or inline topology), one target, a
set of estimation methods and a number of Monte Carlo runs.  Run k draws
its dataset from a seed derived from (master_seed, k), every method sees
the same dataset, and all sampling inside the methods is seeded the same
way, so a rerun of the same configuration reproduces every emitted byte
except the wall-time columns.

Emitted artifacts: ``runs.csv`` (per run/method/module metrics),
``params.csv`` (long-form parameter estimates), ``summary.csv`` (sample
means, length-scaled sample variances, FIT quartiles, negative-fit counts,
for all runs and for the positive-fit subset), and ``manifest.json``
(config echo, seeds, versions).  ``--format json`` bundles everything into
one ``results.json`` instead.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import fit_metric, smpe, two_stage
from .lti import RationalTF, impulse_response
from .neb import (
    NebOptions,
    RationalParametrization,
    fir_parametrization,
    neb_identify,
)
from .nebx import NebxOptions, nebx_identify
from .network import (
    IdentificationTask,
    NetworkModel,
    build_problem,
    sensitivity,
    simulate,
    spectral_radius,
)

KNOWN_METHODS = ("two_stage", "smpe", "neb", "nebx")


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    network: NetworkModel
    target: IdentificationTask
    module_structure: dict
    samples: int                 # N, data record length
    runs: int
    master_seed: int
    methods: tuple[str, ...]
    options: dict = field(default_factory=dict)
    workers: int | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("need at least one Monte Carlo run")
        if not self.methods:
            raise ValueError("the method list is empty")
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; pick from {KNOWN_METHODS}")
        if "nebx" in self.methods and self.target.downstream is None:
            raise ValueError("nebx needs a downstream sensor in the target spec")

    @property
    def n(self) -> int:
        return self.target.n


def network_from_dict(d: dict) -> NetworkModel:
    """Build a network from the config schema (see README for the format)."""
    modules = {}
    for entry in d["modules"]:
        key = (int(entry["to"]), int(entry["from"]))
        modules[key] = RationalTF(
            num=tuple(entry["num"]),
            den=tuple(entry.get("den", ())),
            b0=float(entry.get("b0", 0.0)),
        )
    ratios, variances = {}, {}
    for node, spec in d.get("noise", {}).items():
        if "ratio" in spec:
            ratios[int(node)] = float(spec["ratio"])
        elif "variance" in spec:
            variances[int(node)] = float(spec["variance"])
        else:
            raise ValueError(f"noise entry for node {node} needs 'ratio' or 'variance'")
    net = NetworkModel(
        L=int(d["nodes"]),
        modules=modules,
        references=tuple(int(l) for l in d["references"]),
        noise_ratios=ratios,
        noise_variances=variances,
    )
    for (j, i), tf in net.modules.items():
        if not tf.is_stable():
            raise ValueError(f"module ({j},{i}) is unstable (pole radius {tf.pole_radius():.3f})")
    rho = spectral_radius(net)
    if rho >= 1.0:
        raise ValueError(f"closed-loop network is unstable (spectral radius {rho:.3f})")
    return net


def config_from_dict(d: dict) -> ExperimentConfig:
    if "preset" in d:
        base = _preset_dict(d["preset"])
        merged = {**base, **{k: v for k, v in d.items() if k != "preset"}}
        d = merged
    net = network_from_dict(d["network"])
    tgt = d["target"]
    task = IdentificationTask(
        output=int(tgt["output"]),
        inputs=tuple(int(i) for i in tgt["inputs"]),
        references=net.references,
        n=int(d["ir_length"]),
        downstream=(int(tgt["downstream"]) if tgt.get("downstream") else None),
    )
    return ExperimentConfig(
        name=str(d.get("name", "experiment")),
        network=net,
        target=task,
        module_structure=d.get("module_structure", {"kind": "rational", "nb": 2, "na": 2}),
        samples=int(d["samples"]),
        runs=int(d.get("runs", 1)),
        master_seed=int(d.get("master_seed", 0)),
        methods=tuple(d.get("methods", ("two_stage",))),
        options=dict(d.get("options", {})),
        workers=d.get("workers"),
    )


def _preset_dict(name: str) -> dict:
    path = resources.files("netid").joinpath(f"presets/{name}.json")
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ValueError(f"unknown preset {name!r}; available: {available_presets()}") from None
    return json.loads(text)


def available_presets() -> list[str]:
    root = resources.files("netid").joinpath("presets")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def preset_config(name: str) -> ExperimentConfig:
    return config_from_dict({"preset": name})


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def _config_echo(config: ExperimentConfig) -> dict:
    """JSON-serializable echo of everything that determines the results."""
    net = config.network
    return {
        "name": config.name,
        "network": {
            "nodes": net.L,
            "modules": [
                {"to": j, "from": i, "num": list(tf.num), "den": list(tf.den), "b0": tf.b0}
                for (j, i), tf in sorted(net.modules.items())
            ],
            "references": list(net.references),
            "noise": {
                **{str(k): {"ratio": v} for k, v in sorted(net.noise_ratios.items())},
                **{str(k): {"variance": v} for k, v in sorted(net.noise_variances.items())},
            },
        },
        "target": {
            "output": config.target.output,
            "inputs": list(config.target.inputs),
            "downstream": config.target.downstream,
        },
        "module_structure": config.module_structure,
        "samples": config.samples,
        "ir_length": config.n,
        "runs": config.runs,
        "master_seed": config.master_seed,
        "methods": list(config.methods),
        "options": config.options,
    }


# ----------------------------------------------------------------------
# Running
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    run_id: int
    method: str
    module: str
    params: dict[str, float]
    fit: float
    iterations: int
    converged: bool
    wall_ms: float


def _make_params(config: ExperimentConfig):
    spec = config.module_structure
    N = config.samples
    kind = spec.get("kind", "rational")
    out = []
    for _ in config.target.inputs:
        if kind == "rational":
            out.append(RationalParametrization(int(spec["nb"]), int(spec["na"]), N))
        elif kind == "fir":
            out.append(fir_parametrization(int(spec["order"]), N))
        else:
            raise ValueError(f"unknown module structure kind {kind!r}")
    return out


def _param_names(param) -> list[str]:
    if isinstance(param, RationalParametrization):
        return [f"b{k}" for k in range(1, param.nb + 1)] + [
            f"a{k}" for k in range(1, param.na + 1)
        ]
    return [f"g{k}" for k in range(1, param.n_theta + 1)]


def _module_names(config: ExperimentConfig) -> list[str]:
    j = config.target.output
    return [f"G{j}{i}" for i in config.target.inputs]


def _run_seed(master_seed: int, k: int, salt: int) -> int:
    return int(np.random.SeedSequence((master_seed, k, salt)).generate_state(1)[0])


def _limit_blas_threads():
    # one BLAS thread per worker: the matrices are small and runs already
    # parallelize across processes
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except Exception:
        pass


def run_one(config: ExperimentConfig, k: int) -> list[ResultRow]:
    """All requested methods on the k-th simulated dataset."""
    _limit_blas_threads()
    net, task = config.network, config.target
    N, n = config.samples, config.n
    ds = simulate(net, N, n, seed=_run_seed(config.master_seed, k, 0))
    params = _make_params(config)
    prob = build_problem(ds, task, params)
    names = _module_names(config)
    g_true = [impulse_response(net.modules[(task.output, i)], n) for i in task.inputs]
    opts = config.options
    neb_opts = NebOptions(
        tol=float(opts.get("tol", 1e-10)), max_iter=int(opts.get("max_iter", 300))
    )
    nebx_opts = NebxOptions(
        tol=float(opts.get("tol", 1e-10)),
        max_iter=int(opts.get("nebx_max_iter", 50)),
        gibbs_samples=int(opts.get("gibbs_samples", 500)),
        gibbs_burn_in=int(opts.get("gibbs_burn_in", 100)),
        seed=_run_seed(config.master_seed, k, 1),
        neb=neb_opts,
    )

    rows: list[ResultRow] = []
    cache: dict[str, object] = {}

    def thetas_to_rows(method, thetas, g_hats, iterations, converged, wall_ms):
        for u, name in enumerate(names):
            pnames = _param_names(params[u])
            vals = dict(zip(pnames, (float(x) for x in thetas[u])))
            fit = fit_metric(g_true[u], g_hats[u][:n])
            rows.append(
                ResultRow(
                    run_id=k,
                    method=method,
                    module=name,
                    params=vals,
                    fit=float(fit),
                    iterations=int(iterations),
                    converged=bool(converged),
                    wall_ms=wall_ms,
                )
            )

    def failure_rows(method, wall_ms):
        for u, name in enumerate(names):
            pnames = _param_names(params[u])
            rows.append(
                ResultRow(
                    run_id=k,
                    method=method,
                    module=name,
                    params={q: float("nan") for q in pnames},
                    fit=float("nan"),
                    iterations=0,
                    converged=False,
                    wall_ms=wall_ms,
                )
            )

    for method in config.methods:
        t0 = time.perf_counter()
        try:
            if method == "two_stage":
                res = cache.setdefault("two_stage", two_stage(prob))
                g_hats = [params[u].g(res.thetas[u])[1:] for u in range(prob.p)]
                thetas_to_rows(method, res.thetas, g_hats, 1, True, _ms(t0))
            elif method == "smpe":
                init = cache.get("two_stage")
                state = smpe(prob, init, tol=float(opts.get("tol", 1e-10)))
                g_hats = [params[u].g(state.thetas[u])[1:] for u in range(prob.p)]
                thetas_to_rows(method, state.thetas, g_hats, state.iterations, state.converged, _ms(t0))
            elif method == "neb":
                est = cache.setdefault("neb", neb_identify(prob, neb_opts))
                thetas_to_rows(method, est.hypers.thetas, est.g_hat, est.iterations, est.converged, _ms(t0))
            elif method == "nebx":
                neb_est = cache.get("neb")
                est = nebx_identify(prob, nebx_opts, neb_init=neb_est)
                thetas_to_rows(method, est.hypers.thetas, est.g_hat, est.iterations, est.converged, _ms(t0))
        except Exception:
            failure_rows(method, _ms(t0))
    return rows


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def _run_star(payload) -> list[ResultRow]:
    config, k = payload
    return run_one(config, k)


def run_monte_carlo(config: ExperimentConfig) -> list[ResultRow]:
    """Execute all runs (on a process pool when workers allow) and return
    the rows sorted by (run, method, module)."""
    payloads = [(config, k) for k in range(config.runs)]
    workers = config.workers
    if workers is None:
        import os

        workers = min(os.cpu_count() or 1, config.runs)
    if workers <= 1 or config.runs == 1:
        _limit_blas_threads()
        chunks = [run_one(config, k) for k in range(config.runs)]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_limit_blas_threads) as pool:
            chunks = list(pool.map(_run_star, payloads))
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r.run_id, r.method, r.module))
    return rows


# ----------------------------------------------------------------------
# Summaries
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryStats:
    """Sample statistics of a result table, for all runs and for the
    subset of runs where every module fit of the method is nonnegative."""

    param_rows: list[dict]
    fit_rows: list[dict]
    data_length: int


def _positive_fit_runs(rows: list[ResultRow], method: str) -> set[int]:
    bad = {
        r.run_id
        for r in rows
        if r.method == method and (not np.isfinite(r.fit) or r.fit < 0)
    }
    return {r.run_id for r in rows if r.method == method} - bad


def summarize(rows: list[ResultRow], data_length: int) -> SummaryStats:
    """Per-parameter sample means and N-scaled sample variances (divisor
    runs-1), per-module FIT quartiles, and negative-fit counts."""
    if not rows:
        raise ValueError("cannot summarize an empty result table")
    methods = sorted({r.method for r in rows})
    modules = sorted({r.module for r in rows})
    param_rows: list[dict] = []
    fit_rows: list[dict] = []
    for method in methods:
        keep = {"all": None, "positive_fit": _positive_fit_runs(rows, method)}
        for subset, runs_kept in keep.items():
            for module in modules:
                sel = [
                    r
                    for r in rows
                    if r.method == method
                    and r.module == module
                    and (runs_kept is None or r.run_id in runs_kept)
                ]
                fits = np.array([r.fit for r in sel], dtype=float)
                finite = fits[np.isfinite(fits)]
                fit_rows.append(
                    {
                        "subset": subset,
                        "method": method,
                        "module": module,
                        "runs_used": len(sel),
                        "fit_mean": float(np.mean(finite)) if finite.size else float("nan"),
                        "fit_q1": float(np.percentile(finite, 25)) if finite.size else float("nan"),
                        "fit_median": float(np.percentile(finite, 50)) if finite.size else float("nan"),
                        "fit_q3": float(np.percentile(finite, 75)) if finite.size else float("nan"),
                        "negative_fits": int(np.sum(finite < 0)),
                    }
                )
                if not sel:
                    continue
                for pname in sel[0].params:
                    vals = np.array([r.params[pname] for r in sel], dtype=float)
                    vals = vals[np.isfinite(vals)]
                    mean = float(np.mean(vals)) if vals.size else float("nan")
                    nvar = (
                        float(data_length * np.var(vals, ddof=1))
                        if vals.size > 1
                        else float("nan")
                    )
                    param_rows.append(
                        {
                            "subset": subset,
                            "method": method,
                            "module": module,
                            "param": pname,
                            "mean": mean,
                            "n_scaled_var": nvar,
                            "runs_used": int(vals.size),
                        }
                    )
    return SummaryStats(param_rows=param_rows, fit_rows=fit_rows, data_length=data_length)


# ----------------------------------------------------------------------
# Emission
# ----------------------------------------------------------------------

_RUNS_HEADER = ["run_id", "method", "module", "fit", "iterations", "converged", "wall_ms"]
_PARAMS_HEADER = ["run_id", "method", "module", "param_name", "value"]


def emit(
    rows: list[ResultRow],
    stats: SummaryStats | None,
    fmt: str,
    out_dir,
    config: ExperimentConfig | None = None,
) -> dict[str, Path]:
    """Write the result artifacts; returns the paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    manifest = {
        "config": _config_echo(config) if config else None,
        "master_seed": config.master_seed if config else None,
        "run_seeds": [
            _run_seed(config.master_seed, k, 0) for k in range(config.runs)
        ]
        if config
        else [],
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "netid": __version__,
        },
    }
    paths: dict[str, Path] = {}
    if fmt == "csv":
        paths["runs"] = out / "runs.csv"
        with open(paths["runs"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_RUNS_HEADER)
            for r in rows:
                w.writerow(
                    [r.run_id, r.method, r.module, repr(r.fit), r.iterations, r.converged, repr(r.wall_ms)]
                )
        paths["params"] = out / "params.csv"
        with open(paths["params"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_PARAMS_HEADER)
            for r in rows:
                for pname, val in r.params.items():
                    w.writerow([r.run_id, r.method, r.module, pname, repr(val)])
        paths["summary"] = out / "summary.csv"
        with open(paths["summary"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["row_type", "subset", "method", "module", "param", "mean",
                 "n_scaled_var", "fit_mean", "fit_q1", "fit_median", "fit_q3",
                 "negative_fits", "runs_used"]
            )
            if stats is not None:
                for pr in stats.param_rows:
                    w.writerow(["param", pr["subset"], pr["method"], pr["module"],
                                pr["param"], repr(pr["mean"]), repr(pr["n_scaled_var"]),
                                "", "", "", "", "", pr["runs_used"]])
                for fr in stats.fit_rows:
                    w.writerow(["fit", fr["subset"], fr["method"], fr["module"], "",
                                "", "", repr(fr["fit_mean"]), repr(fr["fit_q1"]),
                                repr(fr["fit_median"]), repr(fr["fit_q3"]),
                                fr["negative_fits"], fr["runs_used"]])
        paths["manifest"] = out / "manifest.json"
        with open(paths["manifest"], "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "json":
        paths["results"] = out / "results.json"
        payload = {
            "manifest": manifest,
            "runs": [
                {
                    "run_id": r.run_id,
                    "method": r.method,
                    "module": r.module,
                    "params": r.params,
                    "fit": r.fit,
                    "iterations": r.iterations,
                    "converged": r.converged,
                    "wall_ms": r.wall_ms,
                }
                for r in rows
            ],
            "summary": {
                "param_rows": stats.param_rows if stats else [],
                "fit_rows": stats.fit_rows if stats else [],
            },
        }
        with open(paths["results"], "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return paths


def read_rows(out_dir) -> list[ResultRow]:
    """Parse ``runs.csv`` and ``params.csv`` back into result rows."""
    out = Path(out_dir)
    params: dict[tuple[int, str, str], dict[str, float]] = {}
    with open(out / "params.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["run_id"]), rec["method"], rec["module"])
            params.setdefault(key, {})[rec["param_name"]] = float(rec["value"])
    rows = []
    with open(out / "runs.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["run_id"]), rec["method"], rec["module"])
            rows.append(
                ResultRow(
                    run_id=key[0],
                    method=key[1],
                    module=key[2],
                    params=params.get(key, {}),
                    fit=float(rec["fit"]),
                    iterations=int(rec["iterations"]),
                    converged=rec["converged"] == "True",
                    wall_ms=float(rec["wall_ms"]),
                )
            )
    rows.sort(key=lambda r: (r.run_id, r.method, r.module))
    return rows


# ----------------------------------------------------------------------
# CLI
# ----------------------------------------------------------------------

def _print_summary(stats: SummaryStats) -> None:
    print(f"{'method':<10} {'module':<8} {'subset':<13} {'mean FIT':>9} {'median':>8} {'neg':>4} {'runs':>5}")
    for fr in stats.fit_rows:
        print(
            f"{fr['method']:<10} {fr['module']:<8} {fr['subset']:<13} "
            f"{fr['fit_mean']:9.4f} {fr['fit_median']:8.4f} {fr['negative_fits']:4d} {fr['runs_used']:5d}"
        )
    print()
    print(f"{'method':<10} {'module':<8} {'subset':<13} {'param':<6} {'mean':>9} {'N*var':>9}")
    for pr in stats.param_rows:
        print(
            f"{pr['method']:<10} {pr['module']:<8} {pr['subset']:<13} {pr['param']:<6} "
            f"{pr['mean']:9.4f} {pr['n_scaled_var']:9.4f}"
        )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="netid-bench",
        description="Monte Carlo benchmark of dynamic-network module estimators",
    )
    parser.add_argument("--config", type=Path, help="JSON experiment configuration")
    parser.add_argument("--preset", help=f"built-in experiment ({', '.join(available_presets())})")
    parser.add_argument("--runs", type=int, help="override the number of Monte Carlo runs")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--methods", help="comma-separated subset of " + ",".join(KNOWN_METHODS))
    parser.add_argument("--out", type=Path, default=Path("bench_out"), help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--workers", type=int, help="process pool size (default: CPU count)")
    args = parser.parse_args(argv)

    if args.config is not None:
        config = load_config(args.config)
    elif args.preset is not None:
        config = preset_config(args.preset)
    else:
        parser.error("need --config or --preset")
    if args.preset is not None and args.config is not None:
        parser.error("--config and --preset are mutually exclusive")
    if args.runs is not None:
        config.runs = args.runs
    if args.seed is not None:
        config.master_seed = args.seed
    if args.methods is not None:
        config.methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if args.workers is not None:
        config.workers = args.workers
    config.__post_init__()  # re-validate after overrides

    t0 = time.perf_counter()
    rows = run_monte_carlo(config)
    stats = summarize(rows, config.samples)
    paths = emit(rows, stats, args.format, args.out, config)
    _print_summary(stats)
    print(f"\n{config.runs} runs in {time.perf_counter() - t0:.1f}s; wrote:")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
