"""Command-line interface.

Subcommands: simulate, fit, eval, study, export-curves.  All randomness
flows from --seed.  Numerical reductions run in a fixed order, so every
output is byte-identical across reruns with the same seed, and fit
results do not depend on --threads (the flag caps auxiliary parallelism
only and is never recorded in outputs).

Exit codes: 0 success, 2 usage error, 1 runtime failure.  File schemas
are documented in FORMATS.md.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from .chain import (
    ExponentialCensoring,
    FixedHorizonCensoring,
    UniformCensoring,
    UniformCovariates,
    read_dataset_csv,
    simulate_dataset,
    topology_from_dict,
    write_dataset_csv,
)
from .errors import CtmcFitError, NeedsSliceSpecError
from .fit_emvs import EmvsConfig, fit_emvs
from .fit_freq import FreqConfig, fit_frequentist
from .ioutil import dump_json, load_json
from .kernel import (
    KernelRateFunction,
    KernelSpec,
    LinearKernel,
    PolynomialKernel,
    RbfKernel,
    rate_function_from_dict,
)
from .metrics import absorption_distance, export_curve, log_rate_mse
from .plots import plot_absorption_bars, plot_curve_comparison, plot_mse_trend
from .study import ScenarioSpec, preset_topology, run_scenario, truth_rate_function

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Flag values that fail config validation before any work starts."""


# ---------------------------------------------------------------------------
# Flag value parsers (argparse types)


def censoring_type(text: str):
    try:
        if text == "none":
            return FixedHorizonCensoring(math.inf)
        family, _, rest = text.partition(":")
        if family in ("exp", "exponential"):
            return ExponentialCensoring(float(rest))
        if family == "uniform":
            lo, hi = rest.split(",")
            return UniformCensoring(float(lo), float(hi))
        if family == "horizon":
            return FixedHorizonCensoring(math.inf if rest == "inf" else float(rest))
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"bad censoring spec {text!r}: {exc}") from None
    raise argparse.ArgumentTypeError(
        f"bad censoring spec {text!r} (use exp:RATE, uniform:LO,HI, horizon:T, none)"
    )


def kernel_type(text: str):
    try:
        family, _, rest = text.partition(":")
        if family == "rbf":
            return RbfKernel(float(rest) if rest else 1.0)
        if family == "linear":
            return LinearKernel()
        if family == "poly":
            parts = rest.split(":")
            degree = int(parts[0])
            offset = float(parts[1]) if len(parts) > 1 else 1.0
            return PolynomialKernel(degree, offset)
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"bad kernel spec {text!r}: {exc}") from None
    raise argparse.ArgumentTypeError(
        f"bad kernel spec {text!r} (use rbf:SIGMA, linear, poly:DEG[:OFFSET])"
    )


def covariate_law_type(text: str):
    try:
        family, _, rest = text.partition(":")
        if family == "uniform":
            parts = rest.split(",")
            lo, hi = float(parts[0]), float(parts[1])
            dim = int(parts[2]) if len(parts) > 2 else 1
            return UniformCovariates(lo, hi, dim)
    except (ValueError, TypeError, IndexError) as exc:
        raise argparse.ArgumentTypeError(f"bad covariate law {text!r}: {exc}") from None
    raise argparse.ArgumentTypeError(f"bad covariate law {text!r} (use uniform:LO,HI[,DIM])")


def arm_type(text: str):
    for sep in ("-", ","):
        if sep in text:
            try:
                i, j = text.split(sep)
                return (int(i), int(j))
            except ValueError:
                break
    raise argparse.ArgumentTypeError(f"bad arm {text!r} (use FROM-TO, e.g. 1-2)")


def int_list_type(text: str):
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


# ---------------------------------------------------------------------------
# Helpers


def _load_rate_function(path):
    """Accept either a bare rate-function JSON or a fit.json wrapper."""
    blob = load_json(path)
    if "rate_function" in blob:
        blob = blob["rate_function"]
    return rate_function_from_dict(blob)


def _load_dataset(data_path, topology_path=None):
    data_path = Path(data_path)
    if topology_path is not None:
        topo_blob = load_json(topology_path)
        topo_blob = topo_blob.get("topology", topo_blob)
    else:
        sidecar = data_path.parent / "metadata.json"
        if not sidecar.exists():
            raise UsageError(
                f"no metadata.json next to {data_path}; pass --topology explicitly"
            )
        topo_blob = load_json(sidecar)["topology"]
    return read_dataset_csv(data_path, topology_from_dict(topo_blob))


def _same_topology(a, b) -> bool:
    return a.n_states == b.n_states and a.arms == b.arms


def _curve_grid(points: np.ndarray, count: int = 200) -> np.ndarray:
    lo, hi = float(points.min()), float(points.max())
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    return np.linspace(lo, hi, count)


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_simulate(ns) -> int:
    topology = preset_topology(ns.preset)
    truth = truth_rate_function(ns.preset, ns.case)
    data = simulate_dataset(
        topology, truth, ns.n, ns.censoring, ns.covariate_law, ns.seed, ns.initial_state
    )
    out = Path(ns.out)
    write_dataset_csv(data, out / "data.csv")
    dump_json(
        {
            "seed": [ns.seed],
            "n": ns.n,
            "preset": ns.preset,
            "case": ns.case,
            "initial_state": ns.initial_state,
            "topology": topology.to_dict(),
            "censoring": ns.censoring.to_dict(),
            "covariate_law": ns.covariate_law.to_dict(),
        },
        out / "metadata.json",
    )
    truth.save(out / "truth.json")
    print(f"wrote {out / 'data.csv'}, metadata.json, truth.json")
    return 0


def cmd_fit(ns) -> int:
    data = _load_dataset(ns.data, ns.topology)
    kernel = KernelSpec.uniform(data.topology, ns.kernel)
    standardize = ns.standardize == "on"
    init_mode = ns.init or ("mixture" if ns.method == "emvs" else "zero")
    if ns.method == "freq" and init_mode != "zero":
        raise UsageError("--init mixture applies to --method emvs only")
    out = Path(ns.out)

    if ns.method == "freq":
        cfg = FreqConfig(ridge=ns.ridge, max_iters=ns.max_iters)
        result = fit_frequentist(
            data, kernel, cfg, standardize=standardize, trace_path=out / "fit_trace.csv"
        )
        blob = {
            "method": "freq",
            "config": {
                "ridge": cfg.ridge if cfg.ridge is not None else 0.1 / data.n,
                "max_iters": cfg.max_iters,
                "grad_tol": cfg.grad_tol,
                "standardize": standardize,
                "kernel": ns.kernel.to_dict(),
            },
            "converged": result.converged,
            "final_loss": result.final_loss,
            "iterations": result.iterations,
            "grad_norm": result.grad_norm,
            "diagnostics": {
                "n_clamped": result.diagnostics.n_clamped,
                "line_search_failures": result.diagnostics.line_search_failures,
                "n_evaluations": result.diagnostics.n_evaluations,
            },
            "rate_function": result.rate_function.to_dict(),
        }
    else:
        overrides = {}
        if ns.nu0 is not None:
            overrides["spike_var"] = ns.nu0
        if ns.nu1 is not None:
            overrides["slab_var"] = ns.nu1
        if ns.a0 is not None:
            overrides["shape_a"] = ns.a0
        if ns.a1 is not None:
            overrides["shape_b"] = ns.a1
        try:
            cfg = EmvsConfig(**overrides)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        result = fit_emvs(
            data,
            kernel,
            cfg,
            init="mixture" if init_mode == "mixture" else "config",
            standardize=standardize,
            trace_path=out / "em_trace.csv",
            restarts=ns.restarts,
            restart_seed=ns.seed,
        )
        blob = {
            "method": "emvs",
            "config": {
                "spike_var": cfg.spike_var,
                "slab_var": cfg.slab_var,
                "shape_a": cfg.shape_a,
                "shape_b": cfg.shape_b,
                "init": init_mode,
                "standardize": standardize,
                "kernel": ns.kernel.to_dict(),
            },
            "converged": result.converged,
            "em_iterations": result.state.iteration,
            "prior_inclusion": result.state.prior_inclusion,
            "selected": [int(flag) for flag in result.selected],
            "sparsified_weights": result.sparsified_weights.tolist(),
            "rate_function": result.rate_function.to_dict(),
        }
        if result.mixture is not None:
            blob["mixture_init"] = {
                "spike_var": result.mixture.spike_var,
                "slab_var": result.mixture.slab_var,
                "inclusion": result.mixture.inclusion,
                "fallback": result.mixture.fallback,
            }
    dump_json(blob, out / "fit.json")
    print(f"wrote {out / 'fit.json'}")
    return 0


def cmd_eval(ns) -> int:
    estimate = _load_rate_function(ns.fit)
    truth = _load_rate_function(ns.truth)
    if not _same_topology(estimate.topology, truth.topology):
        raise CtmcFitError("fit and truth cover different topologies")
    topology = estimate.topology

    if ns.data is not None:
        eval_points = _load_dataset(ns.data, ns.topology).covariates
    elif isinstance(estimate, KernelRateFunction):
        eval_points = estimate.train_covariates
    else:
        raise UsageError("--data is required when the fit carries no training covariates")

    mse = log_rate_mse(truth, estimate, eval_points)
    absorption = absorption_distance(
        topology, truth, estimate, eval_points, ns.censoring, n_sims=ns.n_sims, seed=ns.seed
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    mse.to_frame().to_csv(out / "mse.csv", index=False)
    absorption.to_frame().to_csv(out / "absorption.csv", index=False)
    dump_json({"mse": mse.to_dict(), "absorption": absorption.to_dict()}, out / "metrics.json")
    plot_absorption_bars(out / "absorption.png", absorption)
    if eval_points.shape[1] == 1:
        grid = _curve_grid(eval_points[:, 0])
        for arm in sorted(mse.per_arm):
            curves = {
                "true": truth.log_rate_curve(arm, grid[:, None]),
                "fit": estimate.log_rate_curve(arm, grid[:, None]),
            }
            plot_curve_comparison(out / f"curves_{arm[0]}-{arm[1]}.png", grid, curves, arm)
    print(f"wrote metrics under {out}")
    return 0


def cmd_study(ns) -> int:
    if ns.config is not None:
        blob = load_json(ns.config)
        n_grid = blob.pop("n_grid", None)
        try:
            spec = ScenarioSpec.from_dict(blob)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad study config: {exc}") from None
        n_grid = n_grid or [spec.n]
    else:
        if ns.preset is None or ns.case is None:
            raise UsageError("study needs --preset and --case (or --config)")
        n_grid = ns.n_grid or [100, 200, 400, 600, 800, 1000]
        try:
            spec = ScenarioSpec(
                preset=ns.preset,
                case=ns.case,
                n=n_grid[0],
                replicates=ns.replicates,
                method=ns.method,
                master_seed=ns.seed,
                censoring=ns.censoring,
                n_sims=ns.n_sims,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    out = Path(ns.out)
    frames = []
    for n in n_grid:
        spec_n = replace(spec, n=n)
        report = run_scenario(spec_n, out / spec_n.name)
        frames.append(report.to_frame())
    summary = frames[0] if len(frames) == 1 else pd.concat(frames, ignore_index=True)
    summary.to_csv(out / "summary.csv", index=False)
    trend = summary[(summary["metric"] == "mse") & (summary["replicate"] == "mean")]
    if not trend.empty:
        trend = trend.groupby(["n", "method"], as_index=False)["value"].mean()
        plot_mse_trend(out / "mse_vs_n.png", trend)
    print(f"wrote {out / 'summary.csv'}")
    return 0


def cmd_export_curves(ns) -> int:
    fn = _load_rate_function(ns.fn)
    slice_spec = None
    if ns.slice_dim is not None or ns.slice_at is not None:
        if ns.slice_dim is None or ns.slice_at is None:
            raise UsageError("--slice-dim and --slice-at go together")
        slice_spec = (ns.slice_dim, np.array([float(v) for v in ns.slice_at.split(",")]))
    try:
        table = export_curve(fn, ns.arm, (ns.lo, ns.hi, ns.count), slice_spec)
    except NeedsSliceSpecError as exc:
        raise UsageError(str(exc)) from None
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"curves_{ns.arm[0]}-{ns.arm[1]}"
    table.to_csv(out / f"{stem}.csv", index=False)
    plot_curve_comparison(
        out / f"{stem}.png", table["z"].to_numpy(), {"fit": table["log_rate"].to_numpy()}, ns.arm
    )
    print(f"wrote {out / (stem + '.csv')}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_shared(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    sub.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="cap auxiliary parallelism; never changes results",
    )
    sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctmcfit",
        description="Covariate-dependent transition-rate estimation for CTMCs.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="simulate a dataset from a preset")
    sim.add_argument("--preset", required=True, help="topology preset name")
    sim.add_argument("--case", required=True, help="quadratic | cubic | quartic")
    sim.add_argument("--n", type=int, required=True, help="number of trajectories")
    sim.add_argument("--censoring", type=censoring_type, default=ExponentialCensoring(0.05))
    sim.add_argument("--covariate-law", type=covariate_law_type, default=UniformCovariates())
    sim.add_argument("--initial-state", type=int, default=1)
    _add_shared(sim)
    sim.set_defaults(handler=cmd_simulate)

    fit = commands.add_parser("fit", help="fit expansion weights to a dataset")
    fit.add_argument("--data", required=True, help="trajectory CSV path")
    fit.add_argument("--topology", default=None, help="topology JSON (else metadata.json)")
    fit.add_argument("--method", choices=("freq", "emvs"), default="freq")
    fit.add_argument("--lambda", dest="ridge", type=float, default=None,
                     help="ridge weight (default 0.1/n)")
    fit.add_argument("--kernel", type=kernel_type, default=RbfKernel(1.0),
                     help="rbf:SIGMA | linear | poly:DEG[:OFFSET]")
    fit.add_argument("--standardize", choices=("on", "off"), default="on")
    fit.add_argument("--nu0", type=float, default=None, help="spike variance")
    fit.add_argument("--nu1", type=float, default=None, help="slab variance")
    fit.add_argument("--a0", type=float, default=None, help="Beta shape a")
    fit.add_argument("--a1", type=float, default=None, help="Beta shape b")
    fit.add_argument("--init", choices=("zero", "mixture"), default=None)
    fit.add_argument("--max-iters", type=int, default=500)
    fit.add_argument("--restarts", type=int, default=0, help="extra EM starts (emvs)")
    _add_shared(fit)
    fit.set_defaults(handler=cmd_fit)

    ev = commands.add_parser("eval", help="score a fit against a truth function")
    ev.add_argument("--fit", required=True, help="fit.json or rate-function JSON")
    ev.add_argument("--truth", required=True, help="truth rate-function JSON")
    ev.add_argument("--data", default=None, help="evaluation covariates CSV")
    ev.add_argument("--topology", default=None, help="topology JSON for --data")
    ev.add_argument("--n-sims", type=int, default=1000)
    ev.add_argument("--censoring", type=censoring_type, default=ExponentialCensoring(0.05))
    _add_shared(ev)
    ev.set_defaults(handler=cmd_eval)

    st = commands.add_parser("study", help="run a replicated simulation study")
    st.add_argument("--config", default=None, help="scenario JSON (overrides flags)")
    st.add_argument("--preset", default=None)
    st.add_argument("--case", default=None)
    st.add_argument("--n-grid", type=int_list_type, default=None,
                    help="comma-separated sample sizes")
    st.add_argument("--replicates", type=int, default=5)
    st.add_argument("--method", choices=("freq", "emvs", "both"), default="both")
    st.add_argument("--censoring", type=censoring_type, default=ExponentialCensoring(0.05))
    st.add_argument("--n-sims", type=int, default=1000)
    _add_shared(st)
    st.set_defaults(handler=cmd_study)

    ex = commands.add_parser("export-curves", help="tabulate a fitted log-rate curve")
    ex.add_argument("--fn", required=True, help="fit.json or rate-function JSON")
    ex.add_argument("--arm", type=arm_type, required=True, help="arm as FROM-TO")
    ex.add_argument("--lo", type=float, default=-1.0)
    ex.add_argument("--hi", type=float, default=1.0)
    ex.add_argument("--count", type=int, default=200)
    ex.add_argument("--slice-dim", type=int, default=None)
    ex.add_argument("--slice-at", default=None, help="comma-separated base point")
    _add_shared(ex)
    ex.set_defaults(handler=cmd_export_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return ns.handler(ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run `ctmcfit {ns.command} --help` for the flag synopsis", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
