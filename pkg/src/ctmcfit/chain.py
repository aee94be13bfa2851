"""Finite-state CTMC core: topology, trajectories, censoring, simulation.

States are numbered 1..n_states.  A transition arm is an ordered pair of
distinct states; the order of the arm tuple fixes the layout of every
stacked vector downstream (expansion weights, gradients, reports).  Arms
may carry a known polynomial log-rate, in which case they are excluded
from nonparametric estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial import polynomial as npoly
from numpy.random import Generator, default_rng

from .errors import (
    DimensionMismatchError,
    NonFiniteRateError,
    OverflowingRateError,
    TopologyViolationError,
    UnknownArmError,
    ZeroTotalRateError,
)

Arm = tuple[int, int]


def seed_list(seed) -> list[int]:
    """Normalize an int or a sequence of ints into a seed list."""
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def derived_rng(seed, *tags: int) -> Generator:
    """Independent substream for (seed, *tags); stable across runs."""
    return default_rng(seed_list(seed) + [int(t) for t in tags])


# ---------------------------------------------------------------------------
# Topology


@dataclass(frozen=True)
class ChainTopology:
    """State count plus the ordered tuple of permitted transition arms.

    ``fixed_log_rates`` maps an arm to ascending polynomial coefficients
    of a known log-rate (scalar covariate); every other arm is treated
    as nonparametric.  A state is absorbing iff it has no outgoing arm.
    """

    n_states: int
    arms: tuple[Arm, ...]
    fixed_log_rates: tuple[tuple[Arm, tuple[float, ...]], ...] = ()

    def __post_init__(self):
        arms = tuple((int(i), int(j)) for i, j in self.arms)
        fixed = tuple(
            ((int(i), int(j)), tuple(float(c) for c in coeffs))
            for (i, j), coeffs in self.fixed_log_rates
        )
        object.__setattr__(self, "arms", arms)
        object.__setattr__(self, "fixed_log_rates", fixed)
        if self.n_states < 1:
            raise ValueError("n_states must be positive")
        seen: set[Arm] = set()
        for i, j in arms:
            if not (1 <= i <= self.n_states and 1 <= j <= self.n_states):
                raise ValueError(f"arm ({i},{j}) out of range for {self.n_states} states")
            if i == j:
                raise ValueError(f"arm ({i},{j}) is a self-loop")
            if (i, j) in seen:
                raise ValueError(f"duplicate arm ({i},{j})")
            seen.add((i, j))
        fixed_map = dict(fixed)
        if len(fixed_map) != len(fixed):
            raise ValueError("duplicate fixed-arm entry")
        for arm in fixed_map:
            if arm not in seen:
                raise ValueError(f"fixed arm {arm} is not in arms")
        outgoing: dict[int, list[Arm]] = {s: [] for s in range(1, self.n_states + 1)}
        for arm in arms:
            outgoing[arm[0]].append(arm)
        object.__setattr__(self, "_fixed", fixed_map)
        object.__setattr__(self, "_index", {a: k for k, a in enumerate(arms)})
        object.__setattr__(self, "_outgoing", {s: tuple(v) for s, v in outgoing.items()})

    @property
    def fixed(self) -> dict[Arm, tuple[float, ...]]:
        return dict(self._fixed)

    @property
    def nonparametric_arms(self) -> tuple[Arm, ...]:
        return tuple(a for a in self.arms if a not in self._fixed)

    @property
    def n_nonparametric(self) -> int:
        return len(self.nonparametric_arms)

    @property
    def absorbing(self) -> frozenset[int]:
        return frozenset(s for s in range(1, self.n_states + 1) if not self._outgoing[s])

    def outgoing_arms(self, state: int) -> tuple[Arm, ...]:
        return self._outgoing[state]

    def is_absorbing(self, state: int) -> bool:
        return not self._outgoing[state]

    def arm_index(self, arm: Arm) -> int:
        try:
            return self._index[tuple(arm)]
        except KeyError:
            raise UnknownArmError(f"arm {arm} is not in the topology") from None

    def fixed_coefficients(self, arm: Arm) -> np.ndarray | None:
        coeffs = self._fixed.get(tuple(arm))
        return None if coeffs is None else np.asarray(coeffs, dtype=float)

    def to_dict(self) -> dict:
        entries = []
        for arm in self.arms:
            entry: dict = {"from": arm[0], "to": arm[1]}
            if arm in self._fixed:
                entry["kind"] = "fixed"
                entry["log_rate_coefficients"] = list(self._fixed[arm])
            else:
                entry["kind"] = "nonparametric"
            entries.append(entry)
        return {"n_states": self.n_states, "arms": entries}


def topology_from_dict(spec: Mapping) -> ChainTopology:
    arms = []
    fixed = []
    for entry in spec["arms"]:
        arm = (int(entry["from"]), int(entry["to"]))
        arms.append(arm)
        if entry.get("kind", "nonparametric") == "fixed":
            fixed.append((arm, tuple(entry["log_rate_coefficients"])))
    return ChainTopology(int(spec["n_states"]), tuple(arms), tuple(fixed))


# ---------------------------------------------------------------------------
# Trajectories and datasets


@dataclass(eq=False)
class Trajectory:
    """One observed path: covariate, jump records, terminal censoring flag.

    ``times``/``states`` include the initial record (0, start state).  A
    censored path repeats the occupied state at the censoring time as its
    final record; every other pair of consecutive states must differ.
    """

    covariate: np.ndarray
    times: np.ndarray
    states: np.ndarray
    censored: bool

    def __post_init__(self):
        self.covariate = np.atleast_1d(np.asarray(self.covariate, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=int)
        if self.covariate.ndim != 1 or not np.all(np.isfinite(self.covariate)):
            raise DimensionMismatchError("covariate must be a finite vector")
        if self.times.ndim != 1 or self.times.shape != self.states.shape:
            raise ValueError("times and states must be equal-length vectors")
        if self.times.size < 2:
            raise ValueError("a trajectory needs an initial and a terminal record")
        if self.times[0] != 0.0:
            raise ValueError("the first record must be at time 0")
        if not np.all(np.diff(self.times) > 0) or not np.all(np.isfinite(self.times)):
            raise ValueError("record times must be finite and strictly increasing")
        repeated = self.states[1:] == self.states[:-1]
        if self.censored:
            if not repeated[-1]:
                raise ValueError("a censored trajectory must repeat its final state")
            if np.any(repeated[:-1]):
                raise ValueError("only the final record may repeat a state")
        elif np.any(repeated):
            raise ValueError("consecutive states must differ on an uncensored path")

    @property
    def covariate_dim(self) -> int:
        return self.covariate.size

    @property
    def n_records(self) -> int:
        return int(self.times.size)

    @property
    def final_state(self) -> int:
        return int(self.states[-1])

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def intervals(self) -> Iterator[tuple[float, int, int, bool]]:
        """Yield (dt, occupied state, next state, is_jump) per interval."""
        for k in range(1, self.n_records):
            dt = float(self.times[k] - self.times[k - 1])
            prev, cur = int(self.states[k - 1]), int(self.states[k])
            yield dt, prev, cur, prev != cur


@dataclass(eq=False)
class Dataset:
    """Trajectories sharing one topology and covariate dimension."""

    trajectories: list[Trajectory]
    topology: ChainTopology

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        dims = {t.covariate_dim for t in self.trajectories}
        if len(dims) != 1:
            raise DimensionMismatchError(f"mixed covariate dimensions {sorted(dims)}")
        for traj in self.trajectories:
            if np.any(traj.states < 1) or np.any(traj.states > self.topology.n_states):
                raise TopologyViolationError("state id outside the topology")
            for _, prev, cur, is_jump in traj.intervals():
                if is_jump and (prev, cur) not in self.topology._index:
                    raise TopologyViolationError(f"transition ({prev},{cur}) is not an arm")
        self._covariates: np.ndarray | None = None
        self._stats: tuple[np.ndarray, np.ndarray] | None = None
        self._fixed_table: dict[Arm, np.ndarray] | None = None

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def covariate_dim(self) -> int:
        return self.trajectories[0].covariate_dim

    @property
    def covariates(self) -> np.ndarray:
        if self._covariates is None:
            self._covariates = np.stack([t.covariate for t in self.trajectories])
        return self._covariates

    def sufficient_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-trajectory state occupation times (n, n_states) and
        per-arm jump counts (n, n_arms)."""
        if self._stats is None:
            topo = self.topology
            exposure = np.zeros((self.n, topo.n_states))
            jumps = np.zeros((self.n, len(topo.arms)))
            for l, traj in enumerate(self.trajectories):
                for dt, prev, cur, is_jump in traj.intervals():
                    exposure[l, prev - 1] += dt
                    if is_jump:
                        jumps[l, topo.arm_index((prev, cur))] += 1.0
            self._stats = (exposure, jumps)
        return self._stats

    def fixed_arm_log_rates(self) -> dict[Arm, np.ndarray]:
        """Known log-rates of fixed arms at each trajectory's covariate."""
        if self._fixed_table is None:
            fixed = self.topology.fixed
            if fixed and self.covariate_dim != 1:
                raise DimensionMismatchError(
                    "fixed polynomial arms require a scalar covariate"
                )
            table = {}
            for arm, coeffs in fixed.items():
                table[arm] = npoly.polyval(self.covariates[:, 0], np.asarray(coeffs))
            self._fixed_table = table
        return self._fixed_table


# ---------------------------------------------------------------------------
# Censoring models


class CensoringModel:
    """Right-censoring time law: density, CDF, and sampling."""

    def sample(self, rng: Generator) -> float:
        raise NotImplementedError

    def density(self, t: float) -> float:
        raise NotImplementedError

    def cdf(self, t: float) -> float:
        raise NotImplementedError

    def log_density(self, t: float) -> float:
        raise NotImplementedError

    def log_survival(self, t: float) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialCensoring(CensoringModel):
    rate: float = 0.05

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError("censoring rate must be positive and finite")

    def sample(self, rng):
        return float(rng.exponential(1.0 / self.rate))

    def density(self, t):
        return self.rate * math.exp(-self.rate * t) if t >= 0 else 0.0

    def cdf(self, t):
        return 1.0 - math.exp(-self.rate * t) if t >= 0 else 0.0

    def log_density(self, t):
        return math.log(self.rate) - self.rate * t if t >= 0 else -math.inf

    def log_survival(self, t):
        return -self.rate * t if t >= 0 else 0.0

    def to_dict(self):
        return {"family": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class UniformCensoring(CensoringModel):
    lo: float
    hi: float

    def __post_init__(self):
        if not (0 <= self.lo < self.hi < math.inf):
            raise ValueError("uniform censoring needs 0 <= lo < hi < inf")

    def sample(self, rng):
        return float(rng.uniform(self.lo, self.hi))

    def density(self, t):
        return 1.0 / (self.hi - self.lo) if self.lo <= t <= self.hi else 0.0

    def cdf(self, t):
        if t < self.lo:
            return 0.0
        if t >= self.hi:
            return 1.0
        return (t - self.lo) / (self.hi - self.lo)

    def log_density(self, t):
        d = self.density(t)
        return math.log(d) if d > 0 else -math.inf

    def log_survival(self, t):
        s = 1.0 - self.cdf(t)
        return math.log(s) if s > 0 else -math.inf

    def to_dict(self):
        return {"family": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class FixedHorizonCensoring(CensoringModel):
    """Deterministic censoring at t_max (point mass; t_max may be inf).

    The "density" is the unit point mass at t_max, so log_density is 0 at
    the sampled time and the survival function is a step at t_max.
    """

    t_max: float = math.inf

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    def sample(self, rng):
        return float(self.t_max)

    def density(self, t):
        return 0.0

    def cdf(self, t):
        return 1.0 if t >= self.t_max else 0.0

    def log_density(self, t):
        return 0.0

    def log_survival(self, t):
        return -math.inf if t >= self.t_max else 0.0

    def to_dict(self):
        return {"family": "fixed-horizon", "t_max": self.t_max}


def censoring_from_dict(spec: Mapping) -> CensoringModel:
    family = spec["family"]
    if family == "exponential":
        return ExponentialCensoring(float(spec["rate"]))
    if family == "uniform":
        return UniformCensoring(float(spec["lo"]), float(spec["hi"]))
    if family == "fixed-horizon":
        return FixedHorizonCensoring(float(spec["t_max"]))
    raise ValueError(f"unknown censoring family {family!r}")


@dataclass(frozen=True)
class UniformCovariates:
    """IID uniform covariate law on [lo, hi]^dim."""

    lo: float = -1.0
    hi: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not (self.lo < self.hi and self.dim >= 1):
            raise ValueError("need lo < hi and dim >= 1")

    def sample(self, rng: Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def to_dict(self):
        return {"family": "uniform", "lo": self.lo, "hi": self.hi, "dim": self.dim}


def covariates_from_dict(spec: Mapping) -> UniformCovariates:
    if spec["family"] != "uniform":
        raise ValueError(f"unknown covariate law {spec['family']!r}")
    return UniformCovariates(float(spec["lo"]), float(spec["hi"]), int(spec["dim"]))


# ---------------------------------------------------------------------------
# Gillespie simulation


def sample_next_jump(rates_out: Mapping[Arm, float], rng: Generator) -> tuple[float, int]:
    """Draw (holding time, next state) for competing exponential arms.

    The holding time is Exponential(sum of rates); the destination is
    chosen with probability proportional to its rate.  Raises
    ZeroTotalRateError when there is no rate mass at all.
    """
    arms = list(rates_out)
    rates = np.array([float(rates_out[a]) for a in arms], dtype=float)
    if rates.size and not np.all(np.isfinite(rates)):
        raise NonFiniteRateError("non-finite outgoing rate")
    if np.any(rates < 0):
        raise NonFiniteRateError("negative outgoing rate")
    total = float(rates.sum())
    if not arms or total <= 0.0:
        raise ZeroTotalRateError("no outgoing rate mass")
    dt = float(rng.exponential(1.0 / total))
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(rates) / total, u, side="right"))
    return dt, arms[min(k, len(arms) - 1)][1]


def simulate_trajectory(
    topology: ChainTopology,
    rate_fn,
    covariate,
    censoring: CensoringModel,
    rng,
    initial_state: int = 1,
) -> Trajectory:
    """Gillespie simulation of one right-censored path at a fixed covariate.

    Stops at the first of (a) entering an absorbing state, (b) the sampled
    censoring time, at which point the current state is repeated with
    censored=True.  A state with zero total outgoing rate waits for
    censoring.  ``rng`` may be a Generator, an int seed, or a seed list.
    """
    if not isinstance(rng, Generator):
        rng = default_rng(seed_list(rng))
    if not 1 <= initial_state <= topology.n_states:
        raise ValueError(f"initial state {initial_state} out of range")
    z = np.atleast_1d(np.asarray(covariate, dtype=float))
    horizon = float(censoring.sample(rng))

    rates: dict[Arm, float] = {}
    for arm in topology.arms:
        try:
            q = float(rate_fn.rate(arm, z))
        except OverflowingRateError as exc:
            raise NonFiniteRateError(str(exc)) from exc
        if not math.isfinite(q) or q < 0:
            raise NonFiniteRateError(f"rate for arm {arm} is {q!r}")
        rates[arm] = q

    t = 0.0
    state = initial_state
    times = [0.0]
    states = [state]
    censored = False
    while True:
        outgoing = topology.outgoing_arms(state)
        out_rates = {a: rates[a] for a in outgoing}
        if not outgoing or sum(out_rates.values()) <= 0.0:
            if not math.isfinite(horizon):
                raise ZeroTotalRateError(
                    "chain is stuck and the censoring horizon is infinite"
                )
            times.append(horizon)
            states.append(state)
            censored = True
            break
        dt, nxt = sample_next_jump(out_rates, rng)
        if t + dt >= horizon:
            times.append(horizon)
            states.append(state)
            censored = True
            break
        t += dt
        times.append(t)
        states.append(nxt)
        state = nxt
        if topology.is_absorbing(state):
            break
    return Trajectory(z, np.array(times), np.array(states), censored)


def simulate_dataset(
    topology: ChainTopology,
    rate_fn,
    n: int,
    censoring: CensoringModel,
    covariates,
    master_seed,
    initial_state: int = 1,
) -> Dataset:
    """Simulate n independent trajectories.

    ``covariates`` is either an (n, d) array used as-is or an object with
    a ``sample(rng, n)`` method.  Covariates draw from substream
    (master_seed, 0); trajectory i draws from (master_seed, 1, i), so the
    result is independent of evaluation order.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if hasattr(covariates, "sample"):
        Z = np.asarray(covariates.sample(derived_rng(master_seed, 0), n), dtype=float)
    else:
        Z = np.asarray(covariates, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
    if Z.shape[0] != n:
        raise DimensionMismatchError(f"expected {n} covariate rows, got {Z.shape[0]}")
    trajectories = [
        simulate_trajectory(
            topology, rate_fn, Z[i], censoring, derived_rng(master_seed, 1, i), initial_state
        )
        for i in range(n)
    ]
    return Dataset(trajectories, topology)


# ---------------------------------------------------------------------------
# CSV interchange


def write_dataset_csv(data: Dataset, path) -> None:
    """One row per jump record: traj_id, z_1..z_d, time, state, censored.

    ``censored`` is 1 only on the final record of a censored trajectory.
    """
    d = data.covariate_dim
    z_cols = [f"z_{k + 1}" for k in range(d)]
    rows = []
    for l, traj in enumerate(data.trajectories, start=1):
        last = traj.n_records - 1
        for k in range(traj.n_records):
            rows.append(
                [l, *traj.covariate.tolist(), float(traj.times[k]), int(traj.states[k]),
                 int(traj.censored and k == last)]
            )
    frame = pd.DataFrame(rows, columns=["traj_id", *z_cols, "time", "state", "censored"])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def read_dataset_csv(path, topology: ChainTopology) -> Dataset:
    # round_trip parsing keeps simulate -> write -> read -> fit bit-exact
    frame = pd.read_csv(path, float_precision="round_trip")
    z_cols = sorted(
        (c for c in frame.columns if c.startswith("z_")), key=lambda c: int(c[2:])
    )
    for col in ("traj_id", "time", "state", "censored"):
        if col not in frame.columns:
            raise ValueError(f"missing column {col!r} in {path}")
    if not z_cols:
        raise ValueError(f"no covariate columns z_1.. in {path}")
    trajectories = []
    for _, group in frame.groupby("traj_id", sort=True):
        covariate = group.iloc[0][z_cols].to_numpy(dtype=float)
        trajectories.append(
            Trajectory(
                covariate,
                group["time"].to_numpy(dtype=float),
                group["state"].to_numpy(dtype=int),
                bool(int(group["censored"].iloc[-1])),
            )
        )
    return Dataset(trajectories, topology)
