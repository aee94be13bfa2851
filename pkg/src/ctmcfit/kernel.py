"""Per-arm scalar kernels, Gram matrices, and covariate-to-rate functions.

A rate function exposes log_rate(arm, z) and rate(arm, z) = exp(log_rate).
Kernelized rate functions evaluate a finite kernel expansion over the
training covariates; expansion weights are stacked trajectory-major,
arm-minor (all nonparametric arms for covariate 1, then covariate 2, ...).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.spatial.distance import cdist

from .chain import Arm, ChainTopology, topology_from_dict
from .errors import DimensionMismatchError, OverflowingRateError, UnknownArmError
from .ioutil import dump_json, load_json

RATE_FUNCTION_SCHEMA = "ctmcfit/rate-function-v1"


def as_covariate_matrix(covariates) -> np.ndarray:
    """Coerce a list of d-vectors (or n scalars) into an (n, d) array."""
    try:
        X = np.asarray(covariates, dtype=float)
    except ValueError as exc:
        raise DimensionMismatchError(f"ragged covariate list: {exc}") from None
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.size == 0:
        raise DimensionMismatchError("covariates must form a nonempty (n, d) array")
    if not np.all(np.isfinite(X)):
        raise DimensionMismatchError("covariates must be finite")
    return X


# ---------------------------------------------------------------------------
# Scalar kernel families


@dataclass(frozen=True)
class RbfKernel:
    """Gaussian kernel exp(-||z - z'||^2 / (2 bandwidth^2))."""

    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def pairwise(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        sq = cdist(X, Y, "sqeuclidean")
        return np.exp(-0.5 * sq / (self.bandwidth**2))

    def to_dict(self):
        return {"family": "rbf", "bandwidth": self.bandwidth}


@dataclass(frozen=True)
class LinearKernel:
    """Dot-product kernel z . z'."""

    def pairwise(self, X, Y):
        return X @ Y.T

    def to_dict(self):
        return {"family": "linear"}


@dataclass(frozen=True)
class PolynomialKernel:
    """(z . z' + offset)^degree."""

    degree: int
    offset: float = 1.0

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")

    def pairwise(self, X, Y):
        return (X @ Y.T + self.offset) ** self.degree

    def to_dict(self):
        return {"family": "polynomial", "degree": self.degree, "offset": self.offset}


def kernel_from_dict(spec: Mapping):
    family = spec["family"]
    if family == "rbf":
        return RbfKernel(float(spec["bandwidth"]))
    if family == "linear":
        return LinearKernel()
    if family == "polynomial":
        return PolynomialKernel(int(spec["degree"]), float(spec.get("offset", 1.0)))
    raise ValueError(f"unknown kernel family {family!r}")


@dataclass
class KernelSpec:
    """One scalar kernel per nonparametric arm (block-diagonal structure)."""

    arm_kernels: dict[Arm, object]

    @classmethod
    def uniform(cls, topology: ChainTopology, kernel=None) -> "KernelSpec":
        kernel = kernel if kernel is not None else RbfKernel()
        return cls({arm: kernel for arm in topology.nonparametric_arms})

    def kernel_for(self, arm: Arm):
        try:
            return self.arm_kernels[tuple(arm)]
        except KeyError:
            raise UnknownArmError(f"no kernel for arm {arm}") from None

    def validate_for(self, topology: ChainTopology) -> None:
        want = set(topology.nonparametric_arms)
        have = set(self.arm_kernels)
        if want != have:
            raise ValueError(
                f"kernel spec arms {sorted(have)} do not match "
                f"nonparametric arms {sorted(want)}"
            )

    def to_dict(self):
        return {
            "arms": [
                {"from": a[0], "to": a[1], "kernel": k.to_dict()}
                for a, k in sorted(self.arm_kernels.items())
            ]
        }

    @classmethod
    def from_dict(cls, spec: Mapping) -> "KernelSpec":
        return cls(
            {
                (int(e["from"]), int(e["to"])): kernel_from_dict(e["kernel"])
                for e in spec["arms"]
            }
        )


# ---------------------------------------------------------------------------
# Covariate standardization


@dataclass(eq=False)
class Standardizer:
    """Per-column affine map z -> (z - mean) / scale.

    Fitted covariates on very different scales would otherwise collapse
    RBF distances; the map is recorded so fitted functions keep taking
    raw-scale inputs.
    """

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if self.mean.shape != self.scale.shape or np.any(self.scale <= 0):
            raise ValueError("mean/scale must match and scale must be positive")

    @classmethod
    def fit(cls, covariates) -> "Standardizer":
        X = as_covariate_matrix(covariates)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
        return cls(X.mean(axis=0), scale)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, spec: Mapping) -> "Standardizer":
        return cls(np.asarray(spec["mean"]), np.asarray(spec["scale"]))


# ---------------------------------------------------------------------------
# Gram matrices


@dataclass(eq=False)
class GramSet:
    """Symmetrized per-arm Gram matrices over one covariate list."""

    matrices: dict[Arm, np.ndarray]
    covariates: np.ndarray

    @property
    def n(self) -> int:
        return self.covariates.shape[0]


def gram_matrices(spec: KernelSpec, covariates) -> GramSet:
    """Build the per-arm Gram matrices K[l, m] = k_arm(z_l, z_m)."""
    X = as_covariate_matrix(covariates)
    matrices = {}
    for arm, kernel in spec.arm_kernels.items():
        K = kernel.pairwise(X, X)
        matrices[arm] = 0.5 * (K + K.T)
    return GramSet(matrices, X)


# ---------------------------------------------------------------------------
# Expansion weight layout


def weights_matrix(weights, n_train: int, arms: Sequence[Arm]) -> np.ndarray:
    """View the stacked weight vector as an (n_train, n_arms) matrix.

    Row l holds the weights of training covariate l, one column per
    nonparametric arm, matching the trajectory-major stacking.
    """
    w = np.asarray(weights, dtype=float)
    expected = n_train * len(arms)
    if w.ndim != 1 or w.size != expected:
        raise DimensionMismatchError(
            f"weight vector must have length {expected}, got {w.size}"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w.reshape(n_train, len(arms))


def flatten_weights(weight_mat: np.ndarray) -> np.ndarray:
    return np.asarray(weight_mat, dtype=float).ravel()


# ---------------------------------------------------------------------------
# Rate functions


class RateFunction:
    """Covariate-to-rate map for every arm of a chain topology."""

    topology: ChainTopology

    def log_rate_curve(self, arm: Arm, Z) -> np.ndarray:
        """Log-rates of one arm at each row of Z (vectorized)."""
        raise NotImplementedError

    def log_rate(self, arm: Arm, z) -> float:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return float(self.log_rate_curve(arm, z[None, :])[0])

    def rate(self, arm: Arm, z) -> float:
        with np.errstate(over="ignore"):
            value = np.exp(self.log_rate(arm, z))
        if not np.isfinite(value):
            raise OverflowingRateError(f"rate for arm {arm} overflows at z={z!r}")
        return float(value)

    def arm_rates(self, z) -> dict[Arm, float]:
        return {arm: self.rate(arm, z) for arm in self.topology.arms}

    def generator(self, z) -> np.ndarray:
        """Generator matrix at z; diagonal set so each row sums to zero."""
        n = self.topology.n_states
        Q = np.zeros((n, n))
        for (i, j), q in self.arm_rates(z).items():
            Q[i - 1, j - 1] = q
        Q[np.diag_indices(n)] = -Q.sum(axis=1)
        return Q

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)


class PolynomialRateFunction(RateFunction):
    """Per-arm univariate polynomial log-rates (scalar covariate only)."""

    def __init__(self, topology: ChainTopology, coefficients: Mapping[Arm, Sequence[float]]):
        self.topology = topology
        coeffs = {tuple(a): np.asarray(c, dtype=float) for a, c in coefficients.items()}
        if set(coeffs) != set(topology.arms):
            raise ValueError("polynomial coefficients must cover every arm exactly")
        self.coefficients = coeffs

    def log_rate_curve(self, arm, Z):
        arm = tuple(arm)
        if arm not in self.coefficients:
            raise UnknownArmError(f"arm {arm} is not in the topology")
        Z = as_covariate_matrix(Z)
        if Z.shape[1] != 1:
            raise DimensionMismatchError("polynomial rates take a scalar covariate")
        return npoly.polyval(Z[:, 0], self.coefficients[arm])

    def to_dict(self):
        return {
            "schema": RATE_FUNCTION_SCHEMA,
            "kind": "polynomial",
            "topology": self.topology.to_dict(),
            "coefficients": [
                {"from": a[0], "to": a[1], "values": c.tolist()}
                for a, c in sorted(self.coefficients.items())
            ],
        }


class KernelRateFunction(RateFunction):
    """Kernel-expansion log-rates over training covariates.

    Nonparametric arms evaluate sum_l k_arm(z, z_l) * w_l; arms with fixed
    polynomial log-rates in the topology evaluate those instead.  The
    standardizer is applied to kernel inputs only, so the function keeps
    taking raw-scale covariates.
    """

    def __init__(
        self,
        topology: ChainTopology,
        kernel_spec: KernelSpec,
        train_covariates,
        weights,
        standardizer: Standardizer | None = None,
    ):
        kernel_spec.validate_for(topology)
        self.topology = topology
        self.kernel_spec = kernel_spec
        self.train_covariates = as_covariate_matrix(train_covariates)
        d = self.train_covariates.shape[1]
        self.standardizer = standardizer if standardizer is not None else Standardizer.identity(d)
        if self.standardizer.mean.size != d:
            raise DimensionMismatchError("standardizer dimension mismatch")
        arms = topology.nonparametric_arms
        self._columns = {arm: k for k, arm in enumerate(arms)}
        self.weight_mat = weights_matrix(weights, self.train_covariates.shape[0], arms)
        self._train_std = self.standardizer.transform(self.train_covariates)

    @property
    def weights(self) -> np.ndarray:
        return self.weight_mat.ravel().copy()

    def log_rate_curve(self, arm, Z):
        arm = tuple(arm)
        Z = as_covariate_matrix(Z)
        fixed = self.topology.fixed_coefficients(arm)
        if fixed is not None:
            if Z.shape[1] != 1:
                raise DimensionMismatchError("fixed polynomial arms take a scalar covariate")
            return npoly.polyval(Z[:, 0], fixed)
        if arm not in self._columns:
            raise UnknownArmError(f"arm {arm} is not in the topology")
        if Z.shape[1] != self.train_covariates.shape[1]:
            raise DimensionMismatchError(
                f"expected covariate dimension {self.train_covariates.shape[1]}"
            )
        cross = self.kernel_spec.kernel_for(arm).pairwise(
            self.standardizer.transform(Z), self._train_std
        )
        return cross @ self.weight_mat[:, self._columns[arm]]

    def to_dict(self):
        return {
            "schema": RATE_FUNCTION_SCHEMA,
            "kind": "kernel",
            "topology": self.topology.to_dict(),
            "kernel_spec": self.kernel_spec.to_dict(),
            "standardizer": self.standardizer.to_dict(),
            "train_covariates": self.train_covariates.tolist(),
            "weights": self.weight_mat.ravel().tolist(),
        }


def rate_function_from_dict(spec: Mapping) -> RateFunction:
    if spec.get("schema") != RATE_FUNCTION_SCHEMA:
        raise ValueError(f"unsupported rate-function schema {spec.get('schema')!r}")
    topology = topology_from_dict(spec["topology"])
    if spec["kind"] == "polynomial":
        coeffs = {
            (int(e["from"]), int(e["to"])): e["values"] for e in spec["coefficients"]
        }
        return PolynomialRateFunction(topology, coeffs)
    if spec["kind"] == "kernel":
        return KernelRateFunction(
            topology,
            KernelSpec.from_dict(spec["kernel_spec"]),
            np.asarray(spec["train_covariates"], dtype=float),
            np.asarray(spec["weights"], dtype=float),
            Standardizer.from_dict(spec["standardizer"]),
        )
    raise ValueError(f"unknown rate-function kind {spec['kind']!r}")


def load_rate_function(path) -> RateFunction:
    return rate_function_from_dict(load_json(path))


def save_rate_function(fn: RateFunction, path) -> None:
    fn.save(path)
