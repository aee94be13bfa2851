import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import kstest

from ctmcfit.chain import (
    ChainTopology,
    Dataset,
    ExponentialCensoring,
    FixedHorizonCensoring,
    Trajectory,
    UniformCensoring,
    UniformCovariates,
    censoring_from_dict,
    derived_rng,
    read_dataset_csv,
    sample_next_jump,
    simulate_dataset,
    simulate_trajectory,
    topology_from_dict,
    write_dataset_csv,
)
from ctmcfit.errors import (
    NonFiniteRateError,
    TopologyViolationError,
    ZeroTotalRateError,
)
from ctmcfit.kernel import PolynomialRateFunction
from ctmcfit.study import preset_topology, truth_rate_function

from conftest import random_dataset


def constant_rates(topology, rates):
    return PolynomialRateFunction(
        topology, {arm: (math.log(rates[arm]),) for arm in topology.arms}
    )


TWO_ARM = preset_topology("three-state-two-arm")
TREE = preset_topology("four-state-tree")


class TestTopology:
    def test_absorbing_states_have_no_outgoing_arm(self):
        assert TWO_ARM.absorbing == {2, 3}
        assert TREE.absorbing == {3, 4}
        assert TWO_ARM.outgoing_arms(1) == ((1, 2), (1, 3))
        assert TREE.outgoing_arms(2) == ((2, 4),)

    def test_rejects_self_loops_duplicates_and_range(self):
        with pytest.raises(ValueError):
            ChainTopology(3, ((1, 1),))
        with pytest.raises(ValueError):
            ChainTopology(3, ((1, 2), (1, 2)))
        with pytest.raises(ValueError):
            ChainTopology(2, ((1, 3),))
        with pytest.raises(ValueError):
            ChainTopology(3, ((1, 2),), (((1, 3), (0.0,)),))

    def test_round_trips_through_dict(self):
        topo = preset_topology("three-state-one-arm")
        again = topology_from_dict(topo.to_dict())
        assert again == topo
        assert again.fixed == {(1, 3): (0.07, 0.6)}


class TestTrajectory:
    def test_requires_increasing_times_and_censor_consistency(self):
        with pytest.raises(ValueError):
            Trajectory([0.0], [0.0, 0.5], [1, 1], censored=False)
        with pytest.raises(ValueError):
            Trajectory([0.0], [0.0, 0.5, 0.4], [1, 2, 3], censored=False)
        with pytest.raises(ValueError):
            Trajectory([0.0], [0.0, 0.5], [1, 2], censored=True)
        traj = Trajectory([0.0], [0.0, 0.5, 0.9], [1, 2, 2], censored=True)
        assert traj.final_state == 2 and traj.duration == 0.9

    def test_dataset_rejects_off_topology_transitions(self):
        bad = Trajectory([0.0], [0.0, 0.4], [2, 1], censored=False)
        with pytest.raises(TopologyViolationError):
            Dataset([bad], TWO_ARM)


class TestCensoringModels:
    @pytest.mark.parametrize(
        "model",
        [ExponentialCensoring(0.3), UniformCensoring(0.5, 4.0)],
        ids=["exponential", "uniform"],
    )
    def test_density_integrates_to_one(self, model):
        mass, _ = quad(model.density, 0, 200, limit=200)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_cdf_nondecreasing_to_one(self):
        for model in (ExponentialCensoring(0.3), UniformCensoring(0.5, 4.0),
                      FixedHorizonCensoring(2.0)):
            grid = np.linspace(0, 50, 400)
            values = np.array([model.cdf(t) for t in grid])
            assert np.all(np.diff(values) >= 0)
            assert values[-1] == pytest.approx(1.0, abs=1e-6)

    def test_round_trip_and_sampling(self, rng):
        for model in (ExponentialCensoring(0.2), UniformCensoring(1.0, 2.0),
                      FixedHorizonCensoring(3.0)):
            assert censoring_from_dict(model.to_dict()) == model
        draws = [UniformCensoring(1.0, 2.0).sample(rng) for _ in range(100)]
        assert all(1.0 <= t <= 2.0 for t in draws)
        assert FixedHorizonCensoring(3.0).sample(rng) == 3.0


class TestSampleNextJump:
    def test_single_arm_mean_holding_time(self, rng):
        draws = [sample_next_jump({(1, 2): 2.0}, rng) for _ in range(100_000)]
        assert all(state == 2 for _, state in draws)
        mean_dt = np.mean([dt for dt, _ in draws])
        assert mean_dt == pytest.approx(0.5, rel=0.05)

    def test_destination_probability_follows_rate_ratio(self, rng):
        draws = [sample_next_jump({(1, 2): 1.0, (1, 3): 3.0}, rng) for _ in range(100_000)]
        p3 = np.mean([state == 3 for _, state in draws])
        assert p3 == pytest.approx(0.75, abs=0.01)

    def test_no_rate_mass_raises(self, rng):
        with pytest.raises(ZeroTotalRateError):
            sample_next_jump({}, rng)
        with pytest.raises(ZeroTotalRateError):
            sample_next_jump({(1, 2): 0.0}, rng)
        with pytest.raises(NonFiniteRateError):
            sample_next_jump({(1, 2): float("nan")}, rng)


class TestSimulateTrajectory:
    def test_symmetric_rates_no_censoring_single_jump(self):
        fn = constant_rates(TWO_ARM, {(1, 2): 1.0, (1, 3): 1.0})
        horizon = FixedHorizonCensoring(math.inf)
        hits = 0
        waits = []
        for i in range(4000):
            traj = simulate_trajectory(TWO_ARM, fn, [0.0], horizon, [11, i])
            assert traj.n_records == 2 and not traj.censored
            hits += traj.final_state == 2
            waits.append(traj.duration)
        assert hits / 4000 == pytest.approx(0.5, abs=0.025)
        assert np.mean(waits) == pytest.approx(0.5, rel=0.05)

    def test_same_seed_is_bit_identical(self):
        fn = constant_rates(TREE, {(1, 2): 1.0, (1, 3): 0.5, (2, 4): 2.0})
        censoring = ExponentialCensoring(0.2)
        a = simulate_trajectory(TREE, fn, [0.3], censoring, 99)
        b = simulate_trajectory(TREE, fn, [0.3], censoring, 99)
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.states, b.states)
        assert a.censored == b.censored

    def test_censoring_repeats_current_state(self):
        fn = constant_rates(TWO_ARM, {(1, 2): 0.01, (1, 3): 0.01})
        traj = simulate_trajectory(TWO_ARM, fn, [0.0], FixedHorizonCensoring(0.5), 4)
        assert traj.censored
        assert traj.states[-1] == traj.states[-2] == 1
        assert traj.times[-1] == 0.5

    def test_nonfinite_rate_raises(self):
        fn = PolynomialRateFunction(TWO_ARM, {(1, 2): (1000.0,), (1, 3): (0.0,)})
        with pytest.raises(NonFiniteRateError):
            simulate_trajectory(TWO_ARM, fn, [0.0], FixedHorizonCensoring(1.0), 0)

    def test_zero_total_rate_waits_for_censoring(self):
        # start in an absorbing state: no outgoing mass, so the path just
        # sits there until the censoring time
        fn = constant_rates(TWO_ARM, {(1, 2): 1.0, (1, 3): 1.0})
        traj = simulate_trajectory(
            TWO_ARM, fn, [0.0], FixedHorizonCensoring(2.0), 0, initial_state=2
        )
        assert traj.censored and traj.final_state == 2 and traj.duration == 2.0
        with pytest.raises(ZeroTotalRateError):
            simulate_trajectory(
                TWO_ARM, fn, [0.0], FixedHorizonCensoring(math.inf), 0, initial_state=2
            )

    def test_absorption_mass_matches_independent_simulator(self):
        """Competing-exponential oracle for the one-free-arm quadratic preset."""
        preset = "three-state-one-arm"
        topo = preset_topology(preset)
        truth = truth_rate_function(preset, "quadratic")
        censoring = ExponentialCensoring(0.05)

        def oracle_mass(n, seed):
            # independent route: one exponential clock per arm, earliest wins
            gen = np.random.default_rng(seed)
            absorbed_2 = 0
            for _ in range(n):
                z = gen.uniform(-1, 1)
                q12 = math.exp(0.5 + 0.01 * z - 2 * z * z)
                q13 = math.exp(0.07 + 0.6 * z)
                t12 = gen.exponential(1 / q12)
                t13 = gen.exponential(1 / q13)
                tc = gen.exponential(1 / 0.05)
                if t12 < t13 and t12 < tc:
                    absorbed_2 += 1
            return absorbed_2 / n

        data = simulate_dataset(topo, truth, 1000, censoring, UniformCovariates(), 2024)
        ours = np.mean([t.final_state == 2 and not t.censored for t in data.trajectories])
        assert ours == pytest.approx(oracle_mass(20000, 77), abs=0.03)

    def test_holding_times_pass_ks_against_exponential(self):
        q12, q13 = 1.0, 3.0
        fn = constant_rates(TWO_ARM, {(1, 2): q12, (1, 3): q13})
        horizon = FixedHorizonCensoring(math.inf)
        waits = [
            simulate_trajectory(TWO_ARM, fn, [0.0], horizon, [5, i]).duration
            for i in range(10_000)
        ]
        stat = kstest(waits, "expon", args=(0, 1 / (q12 + q13)))
        assert stat.pvalue > 0.01

    def test_absorption_matches_embedded_chain_within_3_se(self):
        q12, q13 = 1.0, 3.0
        fn = constant_rates(TWO_ARM, {(1, 2): q12, (1, 3): q13})
        n = 10_000
        hits = sum(
            simulate_trajectory(TWO_ARM, fn, [0.0], FixedHorizonCensoring(math.inf),
                                [6, i]).final_state == 3
            for i in range(n)
        )
        p = q13 / (q12 + q13)
        se = math.sqrt(p * (1 - p) / n)
        assert abs(hits / n - p) <= 3 * se


class TestDatasetPlumbing:
    def test_simulate_dataset_is_deterministic_and_tagged_streams(self):
        topo = preset_topology("three-state-two-arm")
        truth = truth_rate_function("three-state-two-arm", "quadratic")
        a = simulate_dataset(topo, truth, 10, ExponentialCensoring(0.05), UniformCovariates(), 42)
        b = simulate_dataset(topo, truth, 10, ExponentialCensoring(0.05), UniformCovariates(), 42)
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert np.array_equal(ta.times, tb.times)
        # trajectory streams are indexed, not sequential: prefixes agree
        c = simulate_dataset(topo, truth, 5, ExponentialCensoring(0.05), UniformCovariates(), 42)
        for ta, tc in zip(a.trajectories[:5], c.trajectories):
            assert np.array_equal(ta.times, tc.times)

    def test_csv_round_trip_preserves_records(self, rng, tmp_path):
        data = random_dataset(rng, n_traj=8, d=2, allow_fixed=False)
        path = tmp_path / "data.csv"
        write_dataset_csv(data, path)
        again = read_dataset_csv(path, data.topology)
        assert again.n == data.n
        for ta, tb in zip(data.trajectories, again.trajectories):
            assert np.array_equal(ta.times, tb.times)
            assert np.array_equal(ta.states, tb.states)
            assert np.array_equal(ta.covariate, tb.covariate)
            assert ta.censored == tb.censored

    def test_sufficient_stats_count_exposure_and_jumps(self):
        traj = Trajectory([0.0], [0.0, 0.7, 1.2], [1, 2, 4], censored=False)
        data = Dataset([traj], TREE)
        exposure, jumps = data.sufficient_stats()
        assert exposure[0].tolist() == [0.7, 0.5, 0.0, 0.0]
        assert jumps[0, TREE.arm_index((1, 2))] == 1
        assert jumps[0, TREE.arm_index((2, 4))] == 1
        assert jumps[0, TREE.arm_index((1, 3))] == 0
