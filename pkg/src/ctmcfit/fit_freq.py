"""Frequentist point estimation of the expansion weights.

Minimizes the ridge-penalized loss with limited-memory quasi-Newton
(L-BFGS).  The parameter dimension is n_trajectories * n_nonparametric
arms, which reaches thousands; a full-matrix or simplex method would not
scale.  All reductions inside the loss run in a fixed order, so fits are
reproducible and independent of any thread setting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.random import default_rng
from scipy.optimize import minimize

from .chain import Dataset, seed_list
from .errors import NonFiniteLossError
from .kernel import GramSet, KernelRateFunction, KernelSpec, Standardizer, gram_matrices
from .likelihood import quad_penalized_loss


@dataclass
class FreqConfig:
    """Quasi-Newton settings.

    ridge=None resolves to 0.1 / n_trajectories, which keeps the total
    penalty O(1) as the expansion grows with the data.  ``init`` is
    "zero", an explicit weight vector, or ("normal", scale, seed).
    Convergence: inf-norm of the gradient <= grad_tol * max(1, |loss|).
    """

    ridge: float | None = None
    max_iters: int = 500
    grad_tol: float = 1e-5
    memory: int = 10
    init: object = "zero"

    def __post_init__(self):
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")


@dataclass
class FitDiagnostics:
    n_clamped: int = 0
    line_search_failures: int = 0
    n_evaluations: int = 0
    message: str = ""


@dataclass
class FitResult:
    weights: np.ndarray
    final_loss: float
    iterations: int
    converged: bool
    grad_norm: float
    diagnostics: FitDiagnostics
    rate_function: KernelRateFunction | None = None


def initial_weights(init, size: int) -> np.ndarray:
    if isinstance(init, str):
        if init == "zero":
            return np.zeros(size)
        raise ValueError(f"unknown init {init!r}")
    if isinstance(init, tuple) and len(init) == 3 and init[0] == "normal":
        _, scale, seed = init
        return default_rng(seed_list(seed)).normal(0.0, float(scale), size)
    arr = np.asarray(init, dtype=float)
    if arr.shape != (size,):
        raise ValueError(f"init vector must have length {size}")
    return arr.copy()


def resolve_ridge(cfg: FreqConfig, n_trajectories: int) -> float:
    return 0.1 / n_trajectories if cfg.ridge is None else float(cfg.ridge)


def minimize_penalized(
    data: Dataset,
    grams: GramSet,
    penalty_weights,
    start: np.ndarray,
    cfg: FreqConfig,
    trace_path=None,
) -> tuple[np.ndarray, dict]:
    """L-BFGS on loss + 0.5 * sum(penalty_weights * w^2).

    Returns the best evaluated iterate, which is never worse than the
    start point, plus run diagnostics.  A trace CSV of accepted iterates
    (iteration, loss, grad_norm) is written when trace_path is given.
    """
    state = {
        "best_f": np.inf,
        "best_x": np.array(start, dtype=float),
        "best_g": None,
        "last_f": np.inf,
        "last_gnorm": np.inf,
        "clamps": 0,
        "evals": 0,
    }

    def objective(x):
        lv = quad_penalized_loss(x, data, grams, penalty_weights)
        state["clamps"] += lv.n_clamped
        state["evals"] += 1
        gnorm = float(np.max(np.abs(lv.gradient))) if lv.gradient.size else 0.0
        state["last_f"], state["last_gnorm"] = lv.value, gnorm
        if lv.value < state["best_f"]:
            state["best_f"] = lv.value
            state["best_x"] = x.copy()
            state["best_g"] = lv.gradient.copy()
        return lv.value, lv.gradient

    start = np.asarray(start, dtype=float)
    f0, g0 = objective(start)
    if not np.isfinite(f0):
        raise NonFiniteLossError(f"loss at the initial point is {f0!r}")
    trace = [(0, f0, float(np.max(np.abs(g0))) if g0.size else 0.0)]

    def record(_xk):
        trace.append((len(trace), state["last_f"], state["last_gnorm"]))

    result = minimize(
        objective,
        start,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={
            "maxcor": cfg.memory,
            "maxiter": cfg.max_iters,
            "gtol": cfg.grad_tol,
            "ftol": 1e-12,
            "maxls": 50,
        },
    )
    message = result.message if isinstance(result.message, str) else result.message.decode()
    info = {
        "final_loss": state["best_f"],
        "gradient": state["best_g"],
        "grad_norm": float(np.max(np.abs(state["best_g"]))) if state["best_g"].size else 0.0,
        "iterations": int(result.nit),
        "message": message,
        "n_clamped": state["clamps"],
        "n_evaluations": state["evals"],
        "line_search_failures": int("ABNORMAL" in message.upper()),
    }
    if trace_path is not None:
        path = Path(trace_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iteration", "loss", "grad_norm"])
            writer.writerows([(k, repr(f), repr(g)) for k, f, g in trace])
    return state["best_x"], info


def fit_frequentist(
    data: Dataset,
    kernel_spec: KernelSpec | None = None,
    cfg: FreqConfig | None = None,
    *,
    standardize: bool = True,
    trace_path=None,
) -> FitResult:
    """Fit the expansion weights by ridge-penalized maximum likelihood.

    Returns the fitted weights together with a ready-to-evaluate
    KernelRateFunction on the raw covariate scale.
    """
    cfg = cfg if cfg is not None else FreqConfig()
    spec = kernel_spec if kernel_spec is not None else KernelSpec.uniform(data.topology)
    spec.validate_for(data.topology)
    arms = data.topology.nonparametric_arms
    if not arms:
        raise ValueError("the topology has no nonparametric arms to fit")

    scaler = (
        Standardizer.fit(data.covariates)
        if standardize
        else Standardizer.identity(data.covariate_dim)
    )
    grams = gram_matrices(spec, scaler.transform(data.covariates))
    size = data.n * len(arms)
    ridge = resolve_ridge(cfg, data.n)
    start = initial_weights(cfg.init, size)
    weights, info = minimize_penalized(
        data, grams, np.full(size, 2.0 * ridge), start, cfg, trace_path
    )
    converged = info["grad_norm"] <= cfg.grad_tol * max(1.0, abs(info["final_loss"]))
    diagnostics = FitDiagnostics(
        n_clamped=info["n_clamped"],
        line_search_failures=info["line_search_failures"],
        n_evaluations=info["n_evaluations"],
        message=info["message"],
    )
    rate_function = KernelRateFunction(data.topology, spec, data.covariates, weights, scaler)
    return FitResult(
        weights=weights,
        final_loss=info["final_loss"],
        iterations=info["iterations"],
        converged=converged,
        grad_norm=info["grad_norm"],
        diagnostics=diagnostics,
        rate_function=rate_function,
    )
