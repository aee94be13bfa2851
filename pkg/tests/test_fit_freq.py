import math

import numpy as np
import pandas as pd
import pytest

from ctmcfit.chain import ExponentialCensoring, UniformCovariates, simulate_dataset
from ctmcfit.errors import NonFiniteLossError
from ctmcfit.fit_freq import FreqConfig, fit_frequentist, initial_weights, resolve_ridge
from ctmcfit.kernel import KernelSpec, PolynomialRateFunction, RbfKernel, gram_matrices
from ctmcfit.likelihood import penalized_loss
from ctmcfit.study import preset_topology

from conftest import dataset_with_grams, random_dataset

TWO_ARM = preset_topology("three-state-two-arm")


def flat_rate_dataset(n, seed):
    truth = PolynomialRateFunction(TWO_ARM, {(1, 2): (0.0,), (1, 3): (0.0,)})
    return simulate_dataset(
        TWO_ARM, truth, n, ExponentialCensoring(0.05), UniformCovariates(), seed
    )


class TestConfig:
    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            FreqConfig(ridge=-1.0)
        with pytest.raises(ValueError):
            FreqConfig(max_iters=0)
        with pytest.raises(ValueError):
            FreqConfig(grad_tol=0.0)

    def test_default_ridge_scales_with_data(self):
        assert resolve_ridge(FreqConfig(), 200) == pytest.approx(0.1 / 200)
        assert resolve_ridge(FreqConfig(ridge=0.5), 200) == 0.5

    def test_initial_weights_variants(self):
        assert np.array_equal(initial_weights("zero", 4), np.zeros(4))
        drawn = initial_weights(("normal", 0.2, 7), 4)
        assert drawn.shape == (4,) and np.std(drawn) > 0
        again = initial_weights(("normal", 0.2, 7), 4)
        assert np.array_equal(drawn, again)
        given = initial_weights(np.arange(4.0), 4)
        assert np.array_equal(given, np.arange(4.0))
        with pytest.raises(ValueError):
            initial_weights(np.arange(3.0), 4)

    def test_nonfinite_start_raises(self, rng):
        data, spec, _ = dataset_with_grams(rng)
        size = data.n * data.topology.n_nonparametric
        bad = np.full(size, np.nan)
        with pytest.raises((NonFiniteLossError, ValueError)):
            fit_frequentist(data, spec, FreqConfig(init=bad))


class TestFitBehavior:
    def test_flat_truth_recovered_near_zero(self):
        data = flat_rate_dataset(200, seed=314)
        result = fit_frequentist(data)
        assert result.converged
        grid = np.linspace(-1, 1, 41)[:, None]
        for arm in TWO_ARM.arms:
            curve = result.rate_function.log_rate_curve(arm, grid)
            assert np.mean(np.abs(curve)) <= 0.15

    def test_huge_ridge_shrinks_weights_to_zero(self):
        data = flat_rate_dataset(40, seed=9)
        result = fit_frequentist(data, cfg=FreqConfig(ridge=1e6))
        assert np.linalg.norm(result.weights) <= 1e-2

    def test_final_loss_not_above_start(self, rng):
        for trial in range(5):
            gen = np.random.default_rng(100 + trial)
            data, spec, grams = dataset_with_grams(gen, n_traj=10)
            cfg = FreqConfig()
            result = fit_frequentist(data, spec, cfg)
            size = data.n * data.topology.n_nonparametric
            ridge = resolve_ridge(cfg, data.n)
            start_loss = penalized_loss(np.zeros(size), data, grams, ridge).value
            assert result.final_loss <= start_loss + 1e-12

    def test_trace_is_nonincreasing(self, tmp_path):
        data = flat_rate_dataset(60, seed=5)
        trace_path = tmp_path / "trace.csv"
        fit_frequentist(data, trace_path=trace_path)
        trace = pd.read_csv(trace_path)
        assert list(trace.columns) == ["iteration", "loss", "grad_norm"]
        losses = trace["loss"].to_numpy()
        assert np.all(np.diff(losses) <= 1e-9)

    def test_converged_flag_implies_small_gradient(self):
        data = flat_rate_dataset(50, seed=21)
        cfg = FreqConfig()
        result = fit_frequentist(data, cfg=cfg)
        if result.converged:
            assert result.grad_norm <= cfg.grad_tol * max(1.0, abs(result.final_loss))

    def test_permuting_trajectories_permutes_the_fit(self):
        data = flat_rate_dataset(30, seed=77)
        spec = KernelSpec.uniform(TWO_ARM, RbfKernel(1.0))
        result = fit_frequentist(data, spec, standardize=False)
        gen = np.random.default_rng(3)
        perm = gen.permutation(data.n)
        from ctmcfit.chain import Dataset

        permuted = Dataset([data.trajectories[i] for i in perm], data.topology)
        result_perm = fit_frequentist(permuted, spec, standardize=False)
        expected = result.weights.reshape(data.n, 2)[perm].ravel()
        assert np.allclose(result_perm.weights, expected, atol=5e-3)
        grid = np.linspace(-1, 1, 21)[:, None]
        for arm in TWO_ARM.arms:
            a = result.rate_function.log_rate_curve(arm, grid)
            b = result_perm.rate_function.log_rate_curve(arm, grid)
            assert np.allclose(a, b, atol=2e-3)

    def test_weights_always_finite_with_positive_ridge(self, rng):
        for trial in range(5):
            gen = np.random.default_rng(200 + trial)
            data, spec, _ = dataset_with_grams(gen, n_traj=8)
            result = fit_frequentist(data, spec, FreqConfig(ridge=0.01))
            assert np.all(np.isfinite(result.weights))
