"""Recovery metrics: log-rate MSE and Monte Carlo absorption distance.

The absorption distance simulates the chain under the true and the
estimated rate functions with common covariate draws and per-simulation
random substreams shared between the two legs, then compares the
empirical distribution over terminal outcomes (each absorbing state plus
"censored while transient").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .chain import (
    Arm,
    CensoringModel,
    ChainTopology,
    derived_rng,
    simulate_trajectory,
)
from .errors import ArmMismatchError, NeedsSliceSpecError, UnknownArmError
from .kernel import KernelRateFunction, RateFunction

CENSORED_OUTCOME = "censored"


@dataclass
class MseReport:
    """Per-arm mean squared error between two log-rate functions.

    ``normalized`` divides by the empirical variance of the true log-rate
    over the evaluation set (NaN when that variance is zero).
    """

    per_arm: dict[Arm, float]
    normalized: dict[Arm, float]
    eval_descriptor: str
    n_points: int

    def to_dict(self):
        return {
            "per_arm": {f"{a[0]}-{a[1]}": v for a, v in sorted(self.per_arm.items())},
            "normalized": {f"{a[0]}-{a[1]}": v for a, v in sorted(self.normalized.items())},
            "eval_descriptor": self.eval_descriptor,
            "n_points": self.n_points,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            [f"{a[0]}-{a[1]}", self.per_arm[a], self.normalized[a]]
            for a in sorted(self.per_arm)
        ]
        return pd.DataFrame(rows, columns=["arm", "mse", "mse_normalized"])


@dataclass
class AbsorptionReport:
    """Terminal-outcome distributions under the true and estimated chains."""

    outcomes: list[str]
    p_true: dict[str, float]
    p_est: dict[str, float]
    abs_diff: dict[str, float]
    n_sims: int
    seed: object

    def to_dict(self):
        return {
            "outcomes": self.outcomes,
            "p_true": self.p_true,
            "p_est": self.p_est,
            "abs_diff": self.abs_diff,
            "n_sims": self.n_sims,
            "seed": self.seed,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            [o, self.p_true[o], self.p_est[o], self.abs_diff[o]] for o in self.outcomes
        ]
        return pd.DataFrame(rows, columns=["outcome", "p_true", "p_est", "abs_diff"])


def _curve(fn: RateFunction, arm: Arm, points: np.ndarray) -> np.ndarray:
    try:
        return np.asarray(fn.log_rate_curve(arm, points), dtype=float)
    except UnknownArmError as exc:
        raise ArmMismatchError(str(exc)) from exc


def log_rate_mse(
    true_fn: RateFunction,
    est_fn: RateFunction,
    eval_points,
    arms=None,
    eval_descriptor: str = "sample-covariates",
) -> MseReport:
    """MSE between two log-rate functions over an evaluation set.

    Defaults to the arms the estimate models nonparametrically (all arms
    for a fully parametric estimate); both functions must cover them.
    """
    points = np.asarray(eval_points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.size == 0:
        raise ValueError("eval_points must be nonempty")
    if arms is None:
        arms = (
            est_fn.topology.nonparametric_arms
            if isinstance(est_fn, KernelRateFunction)
            else est_fn.topology.arms
        )
    per_arm = {}
    normalized = {}
    for arm in arms:
        arm = tuple(arm)
        truth = _curve(true_fn, arm, points)
        estimate = _curve(est_fn, arm, points)
        mse = float(np.mean((truth - estimate) ** 2))
        spread = float(np.var(truth))
        per_arm[arm] = mse
        normalized[arm] = mse / spread if spread > 0 else float("nan")
    return MseReport(per_arm, normalized, eval_descriptor, points.shape[0])


def _draw_covariates(covariate_source, rng, n_sims: int) -> np.ndarray:
    if hasattr(covariate_source, "sample"):
        return np.asarray(covariate_source.sample(rng, n_sims), dtype=float)
    if callable(covariate_source):
        return np.asarray(covariate_source(rng, n_sims), dtype=float)
    pool = np.asarray(covariate_source, dtype=float)
    if pool.ndim == 1:
        pool = pool[:, None]
    picks = rng.integers(0, pool.shape[0], size=n_sims)
    return pool[picks]


def _tally(topology: ChainTopology, fn: RateFunction, Z, censoring, seed, initial_state):
    outcomes = [f"state_{s}" for s in sorted(topology.absorbing)] + [CENSORED_OUTCOME]
    counts = {o: 0 for o in outcomes}
    for i in range(Z.shape[0]):
        traj = simulate_trajectory(
            topology, fn, Z[i], censoring, derived_rng(seed, 1, i), initial_state
        )
        key = CENSORED_OUTCOME if traj.censored else f"state_{traj.final_state}"
        counts[key] += 1
    return outcomes, counts


def absorption_distance(
    topology: ChainTopology,
    true_fn: RateFunction,
    est_fn: RateFunction,
    covariate_source,
    censoring: CensoringModel,
    n_sims: int = 1000,
    seed=0,
    initial_state: int = 1,
) -> AbsorptionReport:
    """Per-outcome |p_true - p_est| from paired Monte Carlo runs.

    Covariates come from substream (seed, 0) and are shared by both legs;
    simulation i uses substream (seed, 1, i) in each leg, so identical
    rate functions produce identical paths and a distance of exactly 0.
    ``covariate_source`` is an array of rows to resample, an object with
    ``sample(rng, n)``, or a callable(rng, n).
    """
    if n_sims < 1:
        raise ValueError("n_sims must be positive")
    Z = _draw_covariates(covariate_source, derived_rng(seed, 0), n_sims)
    outcomes, true_counts = _tally(topology, true_fn, Z, censoring, seed, initial_state)
    _, est_counts = _tally(topology, est_fn, Z, censoring, seed, initial_state)
    p_true = {o: true_counts[o] / n_sims for o in outcomes}
    p_est = {o: est_counts[o] / n_sims for o in outcomes}
    abs_diff = {o: abs(p_true[o] - p_est[o]) for o in outcomes}
    return AbsorptionReport(outcomes, p_true, p_est, abs_diff, n_sims, seed)


def export_curve(
    fn: RateFunction,
    arm: Arm,
    grid: tuple[float, float, int],
    slice_spec: tuple[int, np.ndarray] | None = None,
) -> pd.DataFrame:
    """Tabulate (z, log_rate, rate) on an evenly spaced covariate grid.

    For multi-dimensional covariates a slice (vary_dim, base_point) must
    pin the remaining coordinates.
    """
    lo, hi, count = grid
    if count < 1 or not lo < hi:
        raise ValueError("grid must be (lo, hi, count) with lo < hi and count >= 1")
    ticks = np.linspace(lo, hi, int(count))
    dim = _covariate_dim(fn)
    if dim == 1:
        points = ticks[:, None]
    else:
        if slice_spec is None:
            raise NeedsSliceSpecError(
                f"covariate dimension is {dim}; pass slice_spec=(vary_dim, base_point)"
            )
        vary_dim, base = slice_spec
        base = np.asarray(base, dtype=float)
        if base.shape != (dim,) or not 0 <= vary_dim < dim:
            raise NeedsSliceSpecError("slice_spec must be (vary_dim, base_point of dim d)")
        points = np.tile(base, (ticks.size, 1))
        points[:, vary_dim] = ticks
    log_rates = np.asarray(fn.log_rate_curve(tuple(arm), points), dtype=float)
    return pd.DataFrame(
        {"z": ticks, "log_rate": log_rates, "rate": np.exp(log_rates)}
    )


def _covariate_dim(fn: RateFunction) -> int:
    if isinstance(fn, KernelRateFunction):
        return fn.train_covariates.shape[1]
    return 1
