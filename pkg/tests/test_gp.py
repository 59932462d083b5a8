import math

import numpy as np
import pytest

from gp3.gp import (FactorizationError, TrainingSet, fit, log_marginal_likelihood, mean,
                    optimize_hyperparameters)
from gp3.kernels import Family, KernelSpec, kernel_matrix
from gp3.recipes import DEFAULT_HYPERPARAMETERS, builtin_training_set


def gauss_solve(A, y):
    """Plain Gaussian elimination with partial pivoting (independent of LAPACK)."""
    A = np.array(A, dtype=float)
    y = np.array(y, dtype=float)
    n = len(y)
    for k in range(n):
        p = k + int(np.argmax(np.abs(A[k:, k])))
        A[[k, p]] = A[[p, k]]
        y[[k, p]] = y[[p, k]]
        for i in range(k + 1, n):
            f = A[i, k] / A[k, k]
            A[i, k:] -= f * A[k, k:]
            y[i] -= f * y[k]
    x = np.zeros(n)
    for i in reversed(range(n)):
        x[i] = (y[i] - A[i, i + 1:] @ x[i + 1:]) / A[i, i]
    return x


def random_instance(rng, n, d, family=Family.SE):
    X = rng.uniform(-3, 3, (n, d))
    y = rng.normal(size=n)
    spec = KernelSpec(family, rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0, d))
    return TrainingSet(X, y), spec


class TestFit:
    @pytest.mark.parametrize("family", list(Family))
    def test_single_point_noise_free(self, family):
        model = fit(TrainingSet([[0.3, 0.1]], [2.0]), KernelSpec(family, 1.0, [1.0, 1.0]), 0.0)
        assert model.weights == pytest.approx([2.0])

    def test_single_point_with_noise(self):
        model = fit(TrainingSet([[0.0]], [1.0]), KernelSpec("se", 1.0, [1.0]), 0.1)
        assert model.weights[0] == pytest.approx(1 / 1.1, rel=1e-14)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        train, spec = random_instance(rng, 5, 2)
        model = fit(train, spec, 0.01)
        A = kernel_matrix(spec, train.X, train.X) + 0.01 * np.eye(5)
        np.testing.assert_allclose(model.weights, gauss_solve(A, train.y), rtol=1e-10)

    @pytest.mark.parametrize("n", [1, 10, 50, 200])
    def test_residual(self, n):
        rng = np.random.default_rng(n)
        for family in Family:
            train, spec = random_instance(rng, n, 3, family)
            model = fit(train, spec, 1e-3)
            A = kernel_matrix(spec, train.X, train.X) + 1e-3 * np.eye(n)
            assert np.linalg.norm(A @ model.weights - train.y) <= 1e-8 * np.linalg.norm(train.y)

    def test_kernel_matrix_symmetric(self):
        rng = np.random.default_rng(0)
        train, spec = random_instance(rng, 20, 2, Family.MATERN52)
        K = kernel_matrix(spec, train.X, train.X)
        np.testing.assert_array_equal(K, K.T)

    def test_duplicate_points_need_noise(self):
        train = TrainingSet([[0.0], [0.0]], [1.0, 2.0])
        model = fit(train, KernelSpec("se", 1.0, [1.0]), 0.0)
        # jittered retry is reported on the model
        assert model.jitter > 0

    def test_non_pd_reports_pivot(self):
        from gp3 import gp as gpmod

        with pytest.raises(FactorizationError) as info:
            gpmod._cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert info.value.pivot == 2

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainingSet([[0.0], [1.0]], [1.0])
        with pytest.raises(ValueError):
            TrainingSet(np.empty((0, 2)), [])
        with pytest.raises(ValueError):
            TrainingSet([[np.nan]], [1.0])
        with pytest.raises(ValueError):
            fit(TrainingSet([[0.0, 1.0]], [1.0]), KernelSpec("se", 1.0, [1.0]), 0.1)
        with pytest.raises(ValueError):
            fit(TrainingSet([[0.0]], [1.0]), KernelSpec("se", 1.0, [1.0]), -0.1)


class TestMean:
    def test_zero_weights(self):
        train = TrainingSet([[0.0], [1.0]], [0.0, 0.0])
        model = fit(train, KernelSpec("se", 1.0, [1.0]), 0.1)
        assert mean(model, [0.4]) == 0.0

    @pytest.mark.parametrize("family", list(Family))
    def test_interpolates_without_noise(self, family):
        rng = np.random.default_rng(3)
        train, spec = random_instance(rng, 12, 2, family)
        model = fit(train, spec, 0.0)
        np.testing.assert_allclose(mean(model, train.X), train.y, atol=1e-8)

    def test_far_field_decay(self):
        rng = np.random.default_rng(4)
        train, spec = random_instance(rng, 10, 2)
        model = fit(train, spec, 0.1)
        x = np.array([3.0, 3.0]) + 20.0 * min(spec.length_scales) * np.sqrt(2) * 3
        bound = 1e-10 * spec.signal_variance * np.sum(np.abs(model.weights))
        assert abs(mean(model, x)) <= bound

    def test_linear_in_targets(self):
        rng = np.random.default_rng(6)
        train, spec = random_instance(rng, 30, 2, Family.MATERN32)
        y2 = rng.normal(size=30)
        m1 = fit(train, spec, 0.1)
        m2 = fit(TrainingSet(train.X, y2), spec, 0.1)
        m12 = fit(TrainingSet(train.X, train.y + y2), spec, 0.1)
        xs = rng.uniform(-4, 4, (100, 2))
        np.testing.assert_allclose(mean(m12, xs), mean(m1, xs) + mean(m2, xs), atol=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        train, spec = random_instance(rng, 25, 3)
        perm = rng.permutation(25)
        a = fit(train, spec, 0.05)
        b = fit(TrainingSet(train.X[perm], train.y[perm]), spec, 0.05)
        xs = rng.uniform(-4, 4, (50, 3))
        np.testing.assert_allclose(mean(a, xs), mean(b, xs), atol=1e-10)

    def test_scalar_and_batch_agree(self):
        rng = np.random.default_rng(8)
        train, spec = random_instance(rng, 15, 2)
        model = fit(train, spec, 0.1)
        xs = rng.uniform(-3, 3, (5, 2))
        batch = mean(model, xs)
        for x, v in zip(xs, batch):
            assert mean(model, x) == v

    def test_dimension_mismatch(self):
        model = fit(TrainingSet([[0.0, 0.0]], [1.0]), KernelSpec("se", 1.0, [1.0, 1.0]), 0.1)
        with pytest.raises(ValueError):
            mean(model, [0.0])


class TestLikelihood:
    def test_standard_normal_at_zero(self):
        model = fit(TrainingSet([[0.0]], [0.0]), KernelSpec("se", 0.9, [1.0]), 0.1)
        assert log_marginal_likelihood(model) == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert log_marginal_likelihood(model) == pytest.approx(-0.9189385332, rel=1e-9)

    def test_univariate_density(self):
        a, v = 1.7, 2.3
        model = fit(TrainingSet([[0.0]], [a]), KernelSpec("se", v - 0.2, [1.0]), 0.2)
        expected = -a * a / (2 * v) - 0.5 * math.log(v) - 0.5 * math.log(2 * math.pi)
        assert log_marginal_likelihood(model) == pytest.approx(expected, rel=1e-12)

    def test_matches_dense_density(self):
        rng = np.random.default_rng(9)
        train, spec = random_instance(rng, 4, 2, Family.MATERN52)
        model = fit(train, spec, 0.2)
        S = kernel_matrix(spec, train.X, train.X) + 0.2 * np.eye(4)
        _, logdet = np.linalg.slogdet(S)
        y = train.y
        expected = -0.5 * y @ gauss_solve(S, y) - 0.5 * logdet - 2 * math.log(2 * math.pi)
        assert log_marginal_likelihood(model) == pytest.approx(expected, abs=1e-9)


class TestOptimizer:
    def test_never_worse_than_start(self):
        train = TrainingSet([[0.5]], [1.2])
        init = KernelSpec("se", 1.44, [1.0])
        before = log_marginal_likelihood(fit(train, init, 0.1))
        spec, noise = optimize_hyperparameters(train, "se", init=init, noise_variance=0.1)
        assert noise == 0.1
        assert log_marginal_likelihood(fit(train, spec, noise)) >= before

    def test_self_consistency(self):
        # sample a function from an SE prior with unit length scales, then recover them
        rng = np.random.default_rng(12)
        X = rng.uniform(0, 8, (150, 2))
        truth = KernelSpec("se", 1.0, [1.0, 1.0])
        noise = 1e-2
        cov = kernel_matrix(truth, X, X) + noise * np.eye(len(X))
        y = np.linalg.cholesky(cov) @ rng.normal(size=len(X))
        spec, _ = optimize_hyperparameters(TrainingSet(X, y), "se",
                                           init=KernelSpec("se", 0.5, [2.0, 0.5]),
                                           noise_variance=noise)
        ratios = np.array(spec.length_scales)
        assert np.all(ratios <= 1.5) and np.all(ratios >= 1 / 1.5)

    def test_free_noise(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-2, 2, (40, 1))
        y = np.sin(2 * X[:, 0]) + rng.normal(scale=0.1, size=40)
        spec, noise = optimize_hyperparameters(TrainingSet(X, y), "matern52", fix_noise=False,
                                               restarts=1)
        assert 1e-4 < noise < 0.1

    def test_bad_start(self):
        train = TrainingSet([[0.0], [1.0]], [1.0, -1.0])
        with pytest.raises(ValueError):
            optimize_hyperparameters(train, "se", init=KernelSpec("se", 1e300, [1.0]),
                                     noise_variance=0.1, restarts=0)

    @pytest.mark.xfail(strict=True, reason="likelihood optimum on this data has a much longer "
                                           "second length scale than the published table")
    def test_published_se_length_scales(self):
        train = builtin_training_set()
        sf2, ls = DEFAULT_HYPERPARAMETERS[Family.SE]
        spec, _ = optimize_hyperparameters(train, "se", init=KernelSpec("se", 1.0, [1.0, 1.0]),
                                           noise_variance=0.1)
        ratio = np.array(spec.length_scales) / np.array(ls)
        assert np.all((ratio >= 0.5) & (ratio <= 2.0)), spec
