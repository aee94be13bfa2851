"""Posterior-mode search under a spike-and-slab prior via EMVS.

Every expansion weight carries a two-component Gaussian prior: a narrow
spike at zero and a diffuse slab, with a Beta-distributed prior inclusion
probability.  Treating the per-weight inclusion indicators as missing
data turns posterior-mode search into an EM loop:

  E-step  posterior inclusion probability of every weight, and the
          implied expected prior precision (the diagonal quadratic
          penalty of the next M-step);
  M-step  re-optimize the weights under that penalty (quasi-Newton,
          warm-started from the previous iterate), then update the
          prior inclusion probability in closed form.

Full posterior sampling is out of scope: the likelihood's shape defeats
off-the-shelf Metropolis-Hastings (vanishing acceptance rates), while the
EM loop reaches a mode in seconds.  Hyperparameters can be fixed or
initialized from a two-component Gaussian mixture fitted to a frequentist
estimate of the weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .chain import Dataset, seed_list
from .errors import NonFiniteLossError
from .fit_freq import FitResult, FreqConfig, fit_frequentist, minimize_penalized
from .kernel import GramSet, KernelRateFunction, KernelSpec, Standardizer, gram_matrices
from .likelihood import negative_log_likelihood

THETA_CLAMP = 1e-6

FALLBACK_SPIKE_VAR = 0.4
FALLBACK_SLAB_VAR = 5.0
FALLBACK_INCLUSION = 0.2


@dataclass
class EmvsConfig:
    """Spike/slab variances, Beta hyperparameters, and EM controls."""

    spike_var: float = FALLBACK_SPIKE_VAR
    slab_var: float = FALLBACK_SLAB_VAR
    shape_a: float = 3.0
    shape_b: float = 0.5
    inclusion_init: float = FALLBACK_INCLUSION
    max_em_iters: int = 100
    tol_param: float = 1e-4
    inner: FreqConfig = field(default_factory=lambda: FreqConfig(max_iters=200))

    def __post_init__(self):
        if not 0 < self.spike_var < self.slab_var:
            raise ValueError("need 0 < spike_var < slab_var")
        if not (self.shape_a > 0 and self.shape_b > 0):
            raise ValueError("Beta hyperparameters must be positive")
        if not 0 < self.inclusion_init < 1:
            raise ValueError("inclusion_init must be in (0, 1)")
        if self.max_em_iters < 1 or not self.tol_param > 0:
            raise ValueError("invalid EM controls")


@dataclass
class EmvsState:
    """EM iterate: weights, prior inclusion probability, posterior
    inclusion probabilities, expected prior precisions."""

    weights: np.ndarray
    prior_inclusion: float
    inclusion_probs: np.ndarray
    penalty_weights: np.ndarray
    iteration: int
    surrogate: float


@dataclass
class EmIteration:
    iteration: int
    prior_inclusion: float
    total_inclusion: float
    surrogate: float
    max_weight_change: float
    surrogate_before: float


@dataclass
class MixtureInit:
    """Two-component Gaussian mixture over a weight estimate, mapped to
    (spike_var, slab_var, inclusion)."""

    means: np.ndarray
    variances: np.ndarray
    slab_weight: float
    spike_var: float
    slab_var: float
    inclusion: float
    fallback: bool = False


@dataclass
class EmvsResult:
    state: EmvsState
    selected: np.ndarray
    converged: bool
    history: list[EmIteration]
    rate_function: KernelRateFunction | None = None
    sparsified_weights: np.ndarray | None = None
    mixture: MixtureInit | None = None
    prefit: FitResult | None = None


# ---------------------------------------------------------------------------
# EM pieces


def _log_normal_pdf(x: np.ndarray, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * math.pi * var) + x * x / var)


def e_step(weights, prior_inclusion: float, spike_var: float, slab_var: float):
    """Posterior inclusion probabilities and expected prior precisions.

    Computed in log-space, so the result is finite for any finite weights.
    """
    w = np.asarray(weights, dtype=float)
    if not 0 < prior_inclusion < 1:
        raise ValueError("prior_inclusion must be in (0, 1)")
    log_odds = math.log(prior_inclusion) - math.log1p(-prior_inclusion)
    probs = expit(log_odds + _log_normal_pdf(w, slab_var) - _log_normal_pdf(w, spike_var))
    penalties = (1.0 - probs) / spike_var + probs / slab_var
    return probs, penalties


def _inclusion_objective(theta: float, total: float, size: int, a: float, b: float) -> float:
    return (total + a - 1.0) * math.log(theta) + (size + b - 1.0 - total) * math.log1p(-theta)


def m_step_inclusion(inclusion_probs, shape_a: float, shape_b: float) -> float:
    """Exact maximizer of the prior-inclusion terms over the clamped
    interval [1e-6, 1 - 1e-6]."""
    probs = np.asarray(inclusion_probs, dtype=float)
    total = float(probs.sum())
    size = probs.size
    lo, hi = THETA_CLAMP, 1.0 - THETA_CLAMP
    candidates = [lo, hi]
    denom = size + shape_a + shape_b - 2.0
    if denom > 0:
        candidates.append(min(max((total + shape_a - 1.0) / denom, lo), hi))
    values = [_inclusion_objective(t, total, size, shape_a, shape_b) for t in candidates]
    return candidates[int(np.argmax(values))]


def m_step_weights(
    inclusion_probs,
    penalty_weights,
    data: Dataset,
    grams: GramSet,
    inner_cfg: FreqConfig,
    init=None,
) -> np.ndarray:
    """Maximize log-likelihood - 0.5 * sum(penalty_weights * w^2)."""
    del inclusion_probs  # enters only through the precomputed penalties
    pen = np.asarray(penalty_weights, dtype=float)
    start = np.zeros(pen.size) if init is None else np.asarray(init, dtype=float)
    weights, _ = minimize_penalized(data, grams, pen, start, inner_cfg)
    return weights


def surrogate_value(
    weights,
    prior_inclusion: float,
    inclusion_probs,
    penalty_weights,
    data: Dataset,
    grams: GramSet,
    shape_a: float,
    shape_b: float,
) -> float:
    """EM surrogate: log-likelihood minus the expected quadratic penalty
    plus the prior-inclusion terms (additive constants dropped)."""
    w = np.asarray(weights, dtype=float)
    probs = np.asarray(inclusion_probs, dtype=float)
    pen = np.asarray(penalty_weights, dtype=float)
    loglik = -negative_log_likelihood(w, data, grams, with_gradient=False).value
    return (
        loglik
        - 0.5 * float(np.sum(pen * w * w))
        + _inclusion_objective(prior_inclusion, float(probs.sum()), probs.size, shape_a, shape_b)
    )


def log_posterior(
    weights, prior_inclusion: float, data: Dataset, grams: GramSet, cfg: EmvsConfig
) -> float:
    """Marginal log-posterior (indicators summed out), up to a constant."""
    w = np.asarray(weights, dtype=float)
    log_mix = logsumexp(
        np.stack(
            [
                math.log1p(-prior_inclusion) + _log_normal_pdf(w, cfg.spike_var),
                math.log(prior_inclusion) + _log_normal_pdf(w, cfg.slab_var),
            ]
        ),
        axis=0,
    )
    loglik = -negative_log_likelihood(w, data, grams, with_gradient=False).value
    return (
        loglik
        + float(np.sum(log_mix))
        + (cfg.shape_a - 1.0) * math.log(prior_inclusion)
        + (cfg.shape_b - 1.0) * math.log1p(-prior_inclusion)
    )


# ---------------------------------------------------------------------------
# Mixture-based hyperparameter initialization


def _fit_two_gaussians(x: np.ndarray, tol: float, max_iters: int):
    """EM for a univariate two-component Gaussian mixture.

    Initialized by splitting the sample at the median absolute value, so
    the components start as "small magnitude" and "large magnitude"
    clusters.  Returns (means, variances, weights) or None on collapse.
    """
    split = np.abs(x) <= np.median(np.abs(x))
    if split.all() or not split.any():
        return None
    means = np.array([x[split].mean(), x[~split].mean()])
    variances = np.array([x[split].var(), x[~split].var()])
    weights = np.array([split.mean(), 1.0 - split.mean()])
    if np.any(variances < 1e-12):
        return None

    prev = -np.inf
    for _ in range(max_iters):
        log_parts = np.log(weights)[:, None] + np.stack(
            [_log_normal_pdf(x - means[k], variances[k]) for k in range(2)]
        )
        log_total = logsumexp(log_parts, axis=0)
        loglik = float(log_total.sum())
        resp = np.exp(log_parts - log_total)
        counts = resp.sum(axis=1)
        if np.any(counts < 1e-10):
            return None
        means = (resp @ x) / counts
        variances = (resp * (x - means[:, None]) ** 2).sum(axis=1) / counts
        weights = counts / x.size
        if np.any(variances < 1e-12):
            return None
        if abs(loglik - prev) < tol:
            break
        prev = loglik
    return means, variances, weights


def init_from_mixture(weight_estimate, tol: float = 1e-8, max_iters: int = 1000) -> MixtureInit:
    """Map a two-component mixture over a fitted weight vector to
    (spike_var, slab_var, inclusion).

    The lower-variance component becomes the spike, the other the slab,
    and the slab's mixing weight the initial inclusion probability.  Any
    degeneracy (too few values, zero spread, collapsed component) falls
    back to (0.4, 5, 0.2).
    """
    x = np.asarray(weight_estimate, dtype=float).ravel()
    fallback = MixtureInit(
        means=np.zeros(2),
        variances=np.array([FALLBACK_SPIKE_VAR, FALLBACK_SLAB_VAR]),
        slab_weight=FALLBACK_INCLUSION,
        spike_var=FALLBACK_SPIKE_VAR,
        slab_var=FALLBACK_SLAB_VAR,
        inclusion=FALLBACK_INCLUSION,
        fallback=True,
    )
    if x.size < 4 or float(np.var(x)) < 1e-12:
        return fallback
    fitted = _fit_two_gaussians(x, tol, max_iters)
    if fitted is None:
        return fallback
    means, variances, weights = fitted
    order = np.argsort(variances)
    spike_var = float(variances[order[0]])
    slab_var = float(variances[order[1]])
    slab_weight = float(weights[order[1]])
    if not spike_var < slab_var or not 0 < slab_weight < 1:
        return fallback
    return MixtureInit(
        means=means[order],
        variances=variances[order],
        slab_weight=slab_weight,
        spike_var=spike_var,
        slab_var=slab_var,
        inclusion=min(max(slab_weight, THETA_CLAMP), 1.0 - THETA_CLAMP),
        fallback=False,
    )


# ---------------------------------------------------------------------------
# EM driver


def _em_run(
    start: np.ndarray,
    cfg: EmvsConfig,
    data: Dataset,
    grams: GramSet,
) -> tuple[EmvsState, bool, list[EmIteration]]:
    weights = np.asarray(start, dtype=float)
    theta = cfg.inclusion_init
    history: list[EmIteration] = []
    converged = False
    probs = penalties = None
    for iteration in range(1, cfg.max_em_iters + 1):
        probs, penalties = e_step(weights, theta, cfg.spike_var, cfg.slab_var)
        before = surrogate_value(
            weights, theta, probs, penalties, data, grams, cfg.shape_a, cfg.shape_b
        )
        new_weights = m_step_weights(probs, penalties, data, grams, cfg.inner, init=weights)
        new_theta = m_step_inclusion(probs, cfg.shape_a, cfg.shape_b)
        after = surrogate_value(
            new_weights, new_theta, probs, penalties, data, grams, cfg.shape_a, cfg.shape_b
        )
        delta = float(np.max(np.abs(new_weights - weights))) if weights.size else 0.0
        history.append(
            EmIteration(iteration, new_theta, float(probs.sum()), after, delta, before)
        )
        moved_theta = abs(new_theta - theta)
        weights, theta = new_weights, new_theta
        if delta < cfg.tol_param and moved_theta < cfg.tol_param:
            converged = True
            break
    probs, penalties = e_step(weights, theta, cfg.spike_var, cfg.slab_var)
    surrogate = surrogate_value(
        weights, theta, probs, penalties, data, grams, cfg.shape_a, cfg.shape_b
    )
    state = EmvsState(
        weights=weights,
        prior_inclusion=theta,
        inclusion_probs=probs,
        penalty_weights=penalties,
        iteration=len(history),
        surrogate=surrogate,
    )
    return state, converged, history


def fit_emvs(
    data: Dataset,
    kernel_spec: KernelSpec | None = None,
    cfg: EmvsConfig | None = None,
    *,
    init: str = "config",
    standardize: bool = True,
    trace_path=None,
    restarts: int = 0,
    restart_scale: float = 0.5,
    restart_seed=0,
) -> EmvsResult:
    """EMVS posterior-mode search; returns the mode and the selection.

    init="config" starts the weights at zero with the configured
    hyperparameters; init="mixture" first runs the frequentist fit, maps
    a two-component mixture over its weights to (spike_var, slab_var,
    inclusion), and warm-starts from that estimate.  Weights with a
    posterior inclusion probability >= 0.5 are selected; the raw mode is
    reported unchanged and a separately sparsified copy zeroes the rest.
    Optional restarts rerun EM from random starts and keep the run with
    the highest marginal log-posterior.
    """
    if init not in ("config", "mixture"):
        raise ValueError(f"unknown init {init!r}")
    cfg = cfg if cfg is not None else EmvsConfig()
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

    mixture = None
    prefit = None
    start = np.zeros(size)
    if init == "mixture":
        prefit = fit_frequentist(data, spec, FreqConfig(), standardize=standardize)
        mixture = init_from_mixture(prefit.weights)
        cfg = replace(
            cfg,
            spike_var=mixture.spike_var,
            slab_var=mixture.slab_var,
            inclusion_init=mixture.inclusion,
        )
        start = prefit.weights.copy()

    state, converged, history = _em_run(start, cfg, data, grams)
    best = (log_posterior(state.weights, state.prior_inclusion, data, grams, cfg),
            state, converged, history)
    for r in range(restarts):
        rng_start = np.random.default_rng(seed_list(restart_seed) + [r]).normal(
            0.0, restart_scale, size
        )
        alt_state, alt_conv, alt_hist = _em_run(rng_start, cfg, data, grams)
        score = log_posterior(alt_state.weights, alt_state.prior_inclusion, data, grams, cfg)
        if score > best[0]:
            best = (score, alt_state, alt_conv, alt_hist)
    _, state, converged, history = best

    if trace_path is not None:
        path = Path(trace_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["iteration", "prior_inclusion", "total_inclusion", "surrogate",
                 "max_weight_change"]
            )
            writer.writerows(
                [
                    (h.iteration, repr(h.prior_inclusion), repr(h.total_inclusion),
                     repr(h.surrogate), repr(h.max_weight_change))
                    for h in history
                ]
            )

    selected = state.inclusion_probs >= 0.5
    sparsified = np.where(selected, state.weights, 0.0)
    rate_function = KernelRateFunction(data.topology, spec, data.covariates, state.weights, scaler)
    return EmvsResult(
        state=state,
        selected=selected,
        converged=converged,
        history=history,
        rate_function=rate_function,
        sparsified_weights=sparsified,
        mixture=mixture,
        prefit=prefit,
    )
