"""Censored-CTMC negative log-likelihood over expansion weights.

Each inter-record interval of a trajectory contributes (total outgoing
rate of the occupied state) * (interval length), and each realized jump
subtracts the log-rate of its arm.  Censoring-time factors do not depend
on the weights; they are excluded unless a censoring model is supplied.
Log-rates are clamped to +-LOG_RATE_BOUND before exponentiation so the
loss stays finite for any finite weights; the clamp count is reported as
a divergence diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import CensoringModel, Dataset
from .errors import DimensionMismatchError
from .kernel import GramSet, weights_matrix

LOG_RATE_BOUND = 30.0

__all__ = [
    "LOG_RATE_BOUND",
    "Dataset",
    "LossValue",
    "negative_log_likelihood",
    "negative_log_likelihood_grad",
    "penalized_loss",
    "quad_penalized_loss",
]


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray | None = None
    n_clamped: int = 0


def _log_rate_table(weight_mat: np.ndarray, data: Dataset, grams: GramSet) -> np.ndarray:
    """Log-rates (n_traj, n_arms) at every trajectory's covariate."""
    topo = data.topology
    table = np.empty((data.n, len(topo.arms)))
    fixed = data.fixed_arm_log_rates()
    for col, arm in enumerate(topo.nonparametric_arms):
        table[:, topo.arm_index(arm)] = grams.matrices[arm] @ weight_mat[:, col]
    for arm, values in fixed.items():
        table[:, topo.arm_index(arm)] = values
    return table


def _censoring_terms(data: Dataset, censoring: CensoringModel) -> float:
    total = 0.0
    for traj in data.trajectories:
        if traj.censored:
            total -= censoring.log_density(traj.duration)
        else:
            total -= censoring.log_survival(traj.duration)
    return total


def negative_log_likelihood(
    weights,
    data: Dataset,
    grams: GramSet,
    censoring: CensoringModel | None = None,
    with_gradient: bool = True,
) -> LossValue:
    """Negative log-likelihood of the expansion weights on a dataset.

    ``grams`` must be built from the dataset's covariates in trajectory
    order.  Passing a censoring model adds the weight-free censoring
    terms, giving the full data log-likelihood for reporting.
    """
    topo = data.topology
    np_arms = topo.nonparametric_arms
    weight_mat = weights_matrix(weights, data.n, np_arms)
    if grams.n != data.n:
        raise DimensionMismatchError(
            f"gram matrices cover {grams.n} covariates, dataset has {data.n}"
        )
    exposure, jump_counts = data.sufficient_stats()
    from_states = np.array([arm[0] - 1 for arm in topo.arms])
    holding = exposure[:, from_states]  # (n, n_arms): time exposed to each arm

    table = _log_rate_table(weight_mat, data, grams)
    clamped = np.clip(table, -LOG_RATE_BOUND, LOG_RATE_BOUND)
    n_clamped = int(np.count_nonzero(np.abs(table) > LOG_RATE_BOUND))
    rates = np.exp(clamped)

    value = float(np.sum(rates * holding) - np.sum(jump_counts * clamped))
    if censoring is not None:
        value += _censoring_terms(data, censoring)

    gradient = None
    if with_gradient:
        active = np.abs(table) < LOG_RATE_BOUND
        residual = (rates * holding - jump_counts) * active
        grad_mat = np.empty_like(weight_mat)
        for col, arm in enumerate(np_arms):
            grad_mat[:, col] = grams.matrices[arm] @ residual[:, topo.arm_index(arm)]
        gradient = grad_mat.ravel()
    return LossValue(value, gradient, n_clamped)


def negative_log_likelihood_grad(weights, data: Dataset, grams: GramSet) -> np.ndarray:
    return negative_log_likelihood(weights, data, grams).gradient


def quad_penalized_loss(
    weights,
    data: Dataset,
    grams: GramSet,
    penalty_weights,
    censoring: CensoringModel | None = None,
    with_gradient: bool = True,
) -> LossValue:
    """Loss plus 0.5 * sum(penalty_weights * weights^2) per coordinate."""
    w = np.asarray(weights, dtype=float)
    pen = np.asarray(penalty_weights, dtype=float)
    if pen.ndim == 0:
        pen = np.full(w.size, float(pen))
    if pen.shape != w.shape or np.any(pen < 0):
        raise ValueError("penalty weights must be nonnegative and match the weights")
    base = negative_log_likelihood(w, data, grams, censoring, with_gradient)
    value = base.value + 0.5 * float(np.sum(pen * w * w))
    gradient = None if base.gradient is None else base.gradient + pen * w
    return LossValue(value, gradient, base.n_clamped)


def penalized_loss(
    weights,
    data: Dataset,
    grams: GramSet,
    ridge: float,
    censoring: CensoringModel | None = None,
    with_gradient: bool = True,
) -> LossValue:
    """Loss plus ridge * ||weights||^2 (gradient adds 2 * ridge * weights)."""
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    return quad_penalized_loss(weights, data, grams, 2.0 * ridge, censoring, with_gradient)
