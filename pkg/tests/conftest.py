"""Shared generators for randomized tests.

Random datasets are built by a direct record-level walk (not via the
production simulator), so likelihood/gradient tests do not depend on the
code they check.
"""

import numpy as np
import pytest

from ctmcfit.chain import ChainTopology, Dataset, Trajectory
from ctmcfit.kernel import KernelSpec, RbfKernel, gram_matrices


def random_topology(rng, n_states=None, allow_fixed=True):
    """Random chain with 2..4 states; state 1 always has an outgoing arm.

    With allow_fixed, one arm may carry a known linear log-rate (scalar
    covariate only).
    """
    n = int(n_states) if n_states is not None else int(rng.integers(2, 5))
    arms = [
        (i, j)
        for i in range(1, n + 1)
        for j in range(1, n + 1)
        if i != j and rng.random() < 0.5
    ]
    if not any(a[0] == 1 for a in arms):
        arms.append((1, 2))
    arms = sorted(set(arms))
    fixed = ()
    if allow_fixed and len(arms) >= 2 and rng.random() < 0.5:
        arm = arms[int(rng.integers(len(arms)))]
        fixed = ((arm, (float(rng.normal(0, 0.3)), float(rng.normal(0, 0.3)))),)
    return ChainTopology(n, tuple(arms), fixed)


def random_trajectory(rng, topology, d=1, max_jumps=4):
    z = rng.uniform(-1, 1, d)
    state = 1
    t = 0.0
    times, states = [0.0], [1]
    for _ in range(int(rng.integers(0, max_jumps + 1))):
        outgoing = topology.outgoing_arms(state)
        if not outgoing:
            break
        arm = outgoing[int(rng.integers(len(outgoing)))]
        t += float(rng.exponential(0.5)) + 1e-3
        times.append(t)
        states.append(arm[1])
        state = arm[1]
    if topology.is_absorbing(state):
        censored = False
    elif len(times) > 1 and rng.random() < 0.5:
        censored = False  # observation ends exactly at the last jump
    else:
        t += float(rng.exponential(0.5)) + 1e-3
        times.append(t)
        states.append(state)
        censored = True
    return Trajectory(z, np.array(times), np.array(states), censored)


def random_dataset(rng, n_traj=6, d=1, n_states=None, max_jumps=4, allow_fixed=True):
    topology = random_topology(rng, n_states, allow_fixed=allow_fixed and d == 1)
    while not topology.nonparametric_arms:
        topology = random_topology(rng, n_states, allow_fixed=allow_fixed and d == 1)
    trajectories = [random_trajectory(rng, topology, d, max_jumps) for _ in range(n_traj)]
    return Dataset(trajectories, topology)


def dataset_with_grams(rng, n_traj=6, d=1, n_states=None, max_jumps=4, allow_fixed=True):
    data = random_dataset(rng, n_traj, d, n_states, max_jumps, allow_fixed)
    spec = KernelSpec.uniform(data.topology, RbfKernel(1.0))
    grams = gram_matrices(spec, data.covariates)
    return data, spec, grams


def random_weights(rng, data, scale=0.3):
    size = data.n * data.topology.n_nonparametric
    return rng.normal(0.0, scale, size)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
