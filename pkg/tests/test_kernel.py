import math

import numpy as np
import pytest

from ctmcfit.chain import ChainTopology
from ctmcfit.errors import (
    DimensionMismatchError,
    NeedsSliceSpecError,
    OverflowingRateError,
    UnknownArmError,
)
from ctmcfit.kernel import (
    KernelRateFunction,
    KernelSpec,
    LinearKernel,
    PolynomialKernel,
    PolynomialRateFunction,
    RbfKernel,
    Standardizer,
    gram_matrices,
    load_rate_function,
    rate_function_from_dict,
)
from ctmcfit.study import preset_topology, truth_rate_function

from conftest import random_dataset

TWO_ARM = preset_topology("three-state-two-arm")
SPEC = KernelSpec.uniform(TWO_ARM, RbfKernel(1.0))


class TestGram:
    def test_identical_covariates_give_all_ones_rbf(self):
        grams = gram_matrices(SPEC, [0.0, 0.0])
        assert np.array_equal(grams.matrices[(1, 2)], np.ones((2, 2)))

    def test_rbf_off_diagonal_value(self):
        grams = gram_matrices(SPEC, [0.0, 2.0])
        K = grams.matrices[(1, 2)]
        assert K[0, 1] == pytest.approx(math.exp(-2.0), rel=1e-12)
        assert K[0, 0] == K[1, 1] == 1.0

    def test_linear_kernel_is_outer_product(self):
        spec = KernelSpec.uniform(TWO_ARM, LinearKernel())
        K = gram_matrices(spec, [1.0, 2.0, 3.0]).matrices[(1, 2)]
        assert np.array_equal(K, np.outer([1, 2, 3], [1, 2, 3]))
        assert np.linalg.matrix_rank(K) == 1
        assert np.linalg.eigvalsh(K).min() >= -1e-8

    def test_gram_rejects_ragged_or_empty_covariates(self):
        with pytest.raises(DimensionMismatchError):
            gram_matrices(SPEC, [[0.0], [0.0, 1.0]])
        with pytest.raises(DimensionMismatchError):
            gram_matrices(SPEC, np.empty((0, 1)))

    @pytest.mark.parametrize("kernel", [RbfKernel(0.7), LinearKernel(), PolynomialKernel(2)])
    def test_gram_psd_on_random_covariate_sets(self, kernel, rng):
        spec = KernelSpec.uniform(TWO_ARM, kernel)
        for _ in range(100):
            n = int(rng.integers(2, 51))
            d = int(rng.integers(1, 6))
            X = rng.normal(0, 2, size=(n, d))
            K = gram_matrices(spec, X).matrices[(1, 2)]
            assert np.allclose(K, K.T, atol=1e-12)
            assert np.linalg.eigvalsh(K).min() >= -1e-8

    def test_rbf_bounded_by_one_with_equality_iff_equal(self, rng):
        kernel = RbfKernel(1.3)
        for _ in range(100):
            a, b = rng.normal(0, 2, (2, 3))
            value = kernel.pairwise(a[None, :], b[None, :])[0, 0]
            assert value <= 1.0
            assert (value == 1.0) == bool(np.array_equal(a, b))


class TestRateFunctions:
    def test_zero_weights_give_unit_rates_everywhere(self):
        fn = KernelRateFunction(TWO_ARM, SPEC, [[0.0], [0.5]], np.zeros(4))
        for arm in TWO_ARM.arms:
            for z in (-1.0, 0.0, 2.0):
                assert fn.log_rate(arm, z) == 0.0
                assert fn.rate(arm, z) == 1.0
        Q = fn.generator(0.0)
        assert Q[0].tolist() == [-2.0, 1.0, 1.0]

    def test_single_training_point_expansion(self):
        topo = ChainTopology(2, ((1, 2),))
        spec = KernelSpec.uniform(topo, RbfKernel(1.0))
        fn = KernelRateFunction(topo, spec, [[0.0]], [2.0])
        assert fn.log_rate((1, 2), 0.0) == pytest.approx(2.0, rel=1e-15)
        assert fn.log_rate((1, 2), 2.0) == pytest.approx(2.0 * math.exp(-2.0), rel=1e-12)

    def test_fixed_arm_polynomial_from_table(self):
        truth = truth_rate_function("three-state-one-arm", "quadratic")
        assert truth.log_rate((1, 3), 1.0) == pytest.approx(0.67, abs=1e-12)
        assert truth.log_rate((1, 2), 0.0) == pytest.approx(0.5, abs=1e-15)
        quartic = truth_rate_function("three-state-one-arm", "quartic")
        assert quartic.log_rate((1, 2), 0.0) == pytest.approx(2.0, abs=1e-15)

    def test_log_of_rate_round_trip(self):
        fn = PolynomialRateFunction(TWO_ARM, {(1, 2): (math.log(3.0),), (1, 3): (0.0,)})
        assert fn.rate((1, 2), 0.3) == pytest.approx(3.0, rel=1e-15)

    def test_generator_rows_sum_to_zero_for_random_weights(self, rng):
        for _ in range(20):
            data = random_dataset(rng, n_traj=5)
            spec = KernelSpec.uniform(data.topology)
            weights = rng.normal(0, 1, data.n * data.topology.n_nonparametric)
            fn = KernelRateFunction(data.topology, spec, data.covariates, weights)
            Q = fn.generator(rng.uniform(-1, 1, data.covariate_dim))
            assert np.all(np.abs(Q.sum(axis=1)) <= 1e-12)
            off = Q[~np.eye(Q.shape[0], dtype=bool)]
            assert np.all(off >= 0)

    def test_unknown_arm_and_overflow_raise(self):
        fn = PolynomialRateFunction(TWO_ARM, {(1, 2): (800.0,), (1, 3): (0.0,)})
        with pytest.raises(UnknownArmError):
            fn.log_rate((2, 3), 0.0)
        with pytest.raises(OverflowingRateError):
            fn.rate((1, 2), 0.0)

    def test_permuting_training_points_and_weights_is_invariant(self, rng):
        X = rng.uniform(-1, 1, (9, 2))
        weights = rng.normal(0, 1, 18)
        topo = TWO_ARM
        fn = KernelRateFunction(topo, SPEC, X, weights)
        perm = rng.permutation(9)
        w_mat = weights.reshape(9, 2)[perm]
        fn_perm = KernelRateFunction(topo, SPEC, X[perm], w_mat.ravel())
        for z in rng.uniform(-1, 1, (10, 2)):
            for arm in topo.arms:
                assert fn.log_rate(arm, z) == pytest.approx(
                    fn_perm.log_rate(arm, z), rel=1e-12, abs=1e-12
                )


class TestStandardizer:
    def test_fit_transform_centers_and_scales(self, rng):
        X = rng.normal(5.0, 3.0, (200, 2))
        scaler = Standardizer.fit(X)
        Z = scaler.transform(X)
        assert np.allclose(Z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(Z.std(axis=0), 1.0, atol=1e-12)

    def test_constant_column_gets_unit_scale(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        scaler = Standardizer.fit(X)
        assert scaler.scale[0] == 1.0

    def test_standardized_fit_evaluates_on_raw_scale(self, rng):
        X = rng.uniform(50, 70, (12, 1))
        scaler = Standardizer.fit(X)
        weights = rng.normal(0, 1, 24)
        fn = KernelRateFunction(TWO_ARM, SPEC, X, weights, scaler)
        k = SPEC.kernel_for((1, 2)).pairwise(
            scaler.transform(X[:1]), scaler.transform(X)
        )
        expected = (k @ weights.reshape(12, 2)[:, 0]).item()
        assert fn.log_rate((1, 2), X[0]) == pytest.approx(expected, rel=1e-12)


class TestSerialization:
    def test_kernel_round_trip_is_exact(self, rng, tmp_path):
        X = rng.uniform(-1, 1, (15, 2))
        weights = rng.normal(0, 1, 30)
        scaler = Standardizer.fit(X)
        fn = KernelRateFunction(TWO_ARM, SPEC, X, weights, scaler)
        path = tmp_path / "fn.json"
        fn.save(path)
        again = load_rate_function(path)
        queries = rng.uniform(-2, 2, (1000, 2))
        for arm in TWO_ARM.arms:
            a = fn.log_rate_curve(arm, queries)
            b = again.log_rate_curve(arm, queries)
            assert np.array_equal(a, b)

    def test_polynomial_round_trip(self, tmp_path):
        fn = truth_rate_function("four-state-tree", "cubic")
        fn.save(tmp_path / "truth.json")
        again = load_rate_function(tmp_path / "truth.json")
        grid = np.linspace(-1, 1, 50)[:, None]
        for arm in fn.topology.arms:
            assert np.array_equal(fn.log_rate_curve(arm, grid), again.log_rate_curve(arm, grid))

    def test_bad_schema_rejected(self):
        with pytest.raises(ValueError):
            rate_function_from_dict({"schema": "bogus", "kind": "kernel"})


class TestKernelSpecValidation:
    def test_spec_must_cover_exactly_the_nonparametric_arms(self):
        topo = preset_topology("three-state-one-arm")
        with pytest.raises(ValueError):
            KernelSpec({(1, 2): RbfKernel(), (1, 3): RbfKernel()}).validate_for(topo)
        KernelSpec.uniform(topo).validate_for(topo)

    def test_curve_export_needs_slice_in_higher_dims(self, rng):
        from ctmcfit.metrics import export_curve

        X = rng.uniform(-1, 1, (5, 2))
        fn = KernelRateFunction(TWO_ARM, SPEC, X, np.zeros(10))
        with pytest.raises(NeedsSliceSpecError):
            export_curve(fn, (1, 2), (-1, 1, 5))
        table = export_curve(fn, (1, 2), (-1, 1, 5), slice_spec=(0, np.array([0.0, 0.3])))
        assert len(table) == 5
