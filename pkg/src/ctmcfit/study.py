"""Simulation-study harness: topology presets, generative polynomial
log-rates, replicate loops, and aggregate tables.

Presets
    three-state-one-arm   1 -> {2, 3}; arm (1,2) nonparametric, arm (1,3)
                          fixed at the known polynomial 0.07 + 0.6 z
    three-state-two-arm   1 -> {2, 3}; both arms nonparametric
    four-state-tree       1 -> {2, 3}, 2 -> 4; all arms nonparametric

Cases (true log-rate of every nonparametric arm)
    quadratic   0.5  + 0.01 z - 2 z^2
    cubic      -2    + 0.1  z - 0.05 z^2 + z^3
    quartic     2    + 0.02 z - 4 z^2 + 0.5 z^4
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .chain import (
    CensoringModel,
    ChainTopology,
    Dataset,
    ExponentialCensoring,
    UniformCovariates,
    censoring_from_dict,
    covariates_from_dict,
    seed_list,
    simulate_dataset,
    write_dataset_csv,
)
from .fit_emvs import EmvsConfig, fit_emvs
from .fit_freq import FreqConfig, fit_frequentist
from .ioutil import dump_json
from .kernel import KernelSpec, PolynomialRateFunction, RbfKernel
from .metrics import AbsorptionReport, MseReport, absorption_distance, log_rate_mse

log = logging.getLogger(__name__)

FIXED_ARM_COEFFS = (0.07, 0.6)

CASE_COEFFS = {
    "quadratic": (0.5, 0.01, -2.0),
    "cubic": (-2.0, 0.1, -0.05, 1.0),
    "quartic": (2.0, 0.02, -4.0, 0.0, 0.5),
}

PRESET_NAMES = ("three-state-one-arm", "three-state-two-arm", "four-state-tree")
METHOD_NAMES = ("freq", "emvs")


def preset_topology(preset: str) -> ChainTopology:
    if preset == "three-state-one-arm":
        return ChainTopology(3, ((1, 2), (1, 3)), (((1, 3), FIXED_ARM_COEFFS),))
    if preset == "three-state-two-arm":
        return ChainTopology(3, ((1, 2), (1, 3)))
    if preset == "four-state-tree":
        return ChainTopology(4, ((1, 2), (1, 3), (2, 4)))
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESET_NAMES}")


def case_coefficients(case: str) -> tuple[float, ...]:
    try:
        return CASE_COEFFS[case]
    except KeyError:
        raise ValueError(f"unknown case {case!r}; choose from {tuple(CASE_COEFFS)}") from None


def truth_rate_function(preset: str, case: str) -> PolynomialRateFunction:
    """Generative rate function: the case polynomial on every
    nonparametric arm, the fixed polynomial elsewhere."""
    topology = preset_topology(preset)
    coeffs = case_coefficients(case)
    per_arm = {}
    for arm in topology.arms:
        fixed = topology.fixed_coefficients(arm)
        per_arm[arm] = tuple(fixed) if fixed is not None else coeffs
    return PolynomialRateFunction(topology, per_arm)


@dataclass
class ScenarioSpec:
    """One study scenario: preset/case pair, sample size, replicate count,
    and estimation method ("freq", "emvs", or "both")."""

    preset: str
    case: str
    n: int
    replicates: int = 5
    method: str = "both"
    master_seed: int = 0
    censoring: CensoringModel = field(default_factory=ExponentialCensoring)
    covariates: UniformCovariates = field(default_factory=UniformCovariates)
    bandwidth: float = 1.0
    standardize: bool = True
    n_sims: int = 1000
    emvs_init: str = "mixture"

    def __post_init__(self):
        preset_topology(self.preset)
        case_coefficients(self.case)
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be positive")
        if self.method not in METHOD_NAMES + ("both",):
            raise ValueError(f"method must be one of {METHOD_NAMES + ('both',)}")

    @property
    def methods(self) -> tuple[str, ...]:
        return METHOD_NAMES if self.method == "both" else (self.method,)

    @property
    def name(self) -> str:
        return f"{self.preset}_{self.case}_n{self.n}"

    def kernel_spec(self, topology: ChainTopology) -> KernelSpec:
        return KernelSpec.uniform(topology, RbfKernel(self.bandwidth))

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "case": self.case,
            "n": self.n,
            "replicates": self.replicates,
            "method": self.method,
            "master_seed": self.master_seed,
            "censoring": self.censoring.to_dict(),
            "covariates": self.covariates.to_dict(),
            "bandwidth": self.bandwidth,
            "standardize": self.standardize,
            "n_sims": self.n_sims,
            "emvs_init": self.emvs_init,
        }

    @classmethod
    def from_dict(cls, spec: Mapping) -> "ScenarioSpec":
        kwargs = dict(spec)
        if "censoring" in kwargs:
            kwargs["censoring"] = censoring_from_dict(kwargs["censoring"])
        if "covariates" in kwargs:
            kwargs["covariates"] = covariates_from_dict(kwargs["covariates"])
        return cls(**kwargs)


@dataclass
class ReplicateOutcome:
    replicate: int
    method: str
    mse: MseReport | None
    absorption: AbsorptionReport | None
    runtime_s: float
    error: str | None = None


@dataclass
class StudyReport:
    """Per-replicate metrics plus across-replicate means.

    Aggregates are arithmetic means over the replicates that completed;
    failed replicates are recorded with their error and excluded.
    Runtimes stay in memory only, keeping written reports byte-stable.
    """

    spec: ScenarioSpec
    outcomes: list[ReplicateOutcome]

    def completed(self, method: str) -> list[ReplicateOutcome]:
        return [o for o in self.outcomes if o.method == method and o.error is None]

    def aggregates(self) -> dict[str, dict[str, float]]:
        """method -> {"mse arm i-j": mean, "absorption <outcome>": mean}."""
        table: dict[str, dict[str, float]] = {}
        for method in self.spec.methods:
            done = self.completed(method)
            if not done:
                continue
            entry: dict[str, float] = {}
            for arm in done[0].mse.per_arm:
                key = f"mse {arm[0]}-{arm[1]}"
                entry[key] = float(np.mean([o.mse.per_arm[arm] for o in done]))
            for outcome in done[0].absorption.outcomes:
                key = f"absorption {outcome}"
                entry[key] = float(np.mean([o.absorption.abs_diff[outcome] for o in done]))
            table[method] = entry
        return table

    def to_frame(self) -> pd.DataFrame:
        """Long-format table; aggregate rows carry replicate="mean"."""
        rows = []
        base = [self.spec.preset, self.spec.case, self.spec.n]
        for o in self.outcomes:
            if o.error is not None:
                rows.append([*base, str(o.replicate), o.method, "error", "", np.nan])
                continue
            for arm, value in sorted(o.mse.per_arm.items()):
                rows.append(
                    [*base, str(o.replicate), o.method, "mse", f"{arm[0]}-{arm[1]}", value]
                )
            for arm, value in sorted(o.mse.normalized.items()):
                rows.append(
                    [*base, str(o.replicate), o.method, "mse_normalized",
                     f"{arm[0]}-{arm[1]}", value]
                )
            for outcome in o.absorption.outcomes:
                rows.append(
                    [*base, str(o.replicate), o.method, "absorption_abs_diff", outcome,
                     o.absorption.abs_diff[outcome]]
                )
                rows.append(
                    [*base, str(o.replicate), o.method, "absorption_p_true", outcome,
                     o.absorption.p_true[outcome]]
                )
                rows.append(
                    [*base, str(o.replicate), o.method, "absorption_p_est", outcome,
                     o.absorption.p_est[outcome]]
                )
        frame = pd.DataFrame(
            rows, columns=["preset", "case", "n", "replicate", "method", "metric", "key", "value"]
        )
        means = (
            frame[frame["metric"] != "error"]
            .groupby(["preset", "case", "n", "method", "metric", "key"], as_index=False)["value"]
            .mean()
        )
        means.insert(3, "replicate", "mean")
        return pd.concat([frame, means], ignore_index=True)


def _fit_one(method: str, spec: ScenarioSpec, data: Dataset, trace_dir: Path | None):
    kernel = spec.kernel_spec(data.topology)
    if method == "freq":
        trace = None if trace_dir is None else trace_dir / "fit_trace.csv"
        result = fit_frequentist(
            data, kernel, FreqConfig(), standardize=spec.standardize, trace_path=trace
        )
        extra = {
            "final_loss": result.final_loss,
            "converged": result.converged,
            "iterations": result.iterations,
        }
        return result.rate_function, extra
    trace = None if trace_dir is None else trace_dir / "em_trace.csv"
    result = fit_emvs(
        data,
        kernel,
        EmvsConfig(),
        init=spec.emvs_init,
        standardize=spec.standardize,
        trace_path=trace,
    )
    extra = {
        "converged": result.converged,
        "em_iterations": result.state.iteration,
        "prior_inclusion": result.state.prior_inclusion,
        "n_selected": int(result.selected.sum()),
    }
    return result.rate_function, extra


def run_scenario(spec: ScenarioSpec, out_dir=None) -> StudyReport:
    """Simulate, fit, and score every replicate of one scenario.

    For replicate r, the dataset draws from seed (master_seed, r) and the
    absorption comparison from (master_seed, r, 1), so reruns with the
    same spec reproduce every file byte for byte.  When out_dir is given,
    each replicate writes data.csv, metadata.json, truth.json,
    fit_<method>.json, metrics.json, and traces/.
    """
    topology = preset_topology(spec.preset)
    truth = truth_rate_function(spec.preset, spec.case)
    outcomes: list[ReplicateOutcome] = []
    root = None if out_dir is None else Path(out_dir)

    for r in range(1, spec.replicates + 1):
        rep_dir = None if root is None else root / f"replicate_{r}"
        trace_dir = None if rep_dir is None else rep_dir / "traces"
        data_seed = seed_list(spec.master_seed) + [r]
        data = simulate_dataset(
            topology, truth, spec.n, spec.censoring, spec.covariates, data_seed
        )
        if rep_dir is not None:
            write_dataset_csv(data, rep_dir / "data.csv")
            dump_json(
                {
                    "seed": data_seed,
                    "n": spec.n,
                    "preset": spec.preset,
                    "case": spec.case,
                    "topology": topology.to_dict(),
                    "censoring": spec.censoring.to_dict(),
                    "covariate_law": spec.covariates.to_dict(),
                },
                rep_dir / "metadata.json",
            )
            truth.save(rep_dir / "truth.json")

        metrics_blob: dict = {}
        for method in spec.methods:
            started = time.perf_counter()
            try:
                fitted, extra = _fit_one(method, spec, data, trace_dir)
                mse = log_rate_mse(truth, fitted, data.covariates)
                absorption = absorption_distance(
                    topology,
                    truth,
                    fitted,
                    data.covariates,
                    spec.censoring,
                    n_sims=spec.n_sims,
                    seed=data_seed + [1],
                )
            except Exception as exc:  # a failed replicate is reported, not fatal
                log.warning("replicate %d method %s failed: %s", r, method, exc)
                outcomes.append(
                    ReplicateOutcome(r, method, None, None,
                                     time.perf_counter() - started, str(exc))
                )
                continue
            runtime = time.perf_counter() - started
            outcomes.append(ReplicateOutcome(r, method, mse, absorption, runtime))
            metrics_blob[method] = {
                "mse": mse.to_dict(),
                "absorption": absorption.to_dict(),
                "fit": extra,
            }
            if rep_dir is not None:
                fitted.save(rep_dir / f"fit_{method}.json")
            log.info(
                "scenario %s replicate %d method %s done in %.1fs", spec.name, r, method, runtime
            )
        if rep_dir is not None:
            dump_json(metrics_blob, rep_dir / "metrics.json")

    return StudyReport(spec, outcomes)
