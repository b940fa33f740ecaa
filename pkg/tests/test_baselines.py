import numpy as np
import pytest

from tristounet.baselines import (
    GaussianStats,
    bic_distance,
    bic_from_moments,
    bic_penalty,
    gaussian_divergence,
    gaussian_stats,
)


class TestStats:
    def test_constant_sequence_floored(self):
        stats = gaussian_stats(np.full((10, 3), 2.0))
        np.testing.assert_array_equal(stats.diag_var, 1e-6)

    def test_two_frames(self):
        stats = gaussian_stats(np.array([[0.0], [2.0]]))
        assert stats.mean[0] == 1.0 and stats.diag_var[0] == 1.0

    def test_two_pass_oracle(self):
        x = np.random.default_rng(0).standard_normal((100, 12))
        stats = gaussian_stats(x, "full")
        mean = [sum(x[t, j] for t in range(100)) / 100 for j in range(12)]
        var = [sum((x[t, j] - mean[j]) ** 2 for t in range(100)) / 100 for j in range(12)]
        np.testing.assert_allclose(stats.mean, mean, atol=1e-12)
        np.testing.assert_allclose(stats.diag_var, var, atol=1e-12)
        np.testing.assert_allclose(stats.full_cov, np.cov(x.T, bias=True), atol=1e-12)
        np.testing.assert_array_equal(stats.full_cov, stats.full_cov.T)

    def test_too_short(self):
        with pytest.raises(ValueError):
            gaussian_stats(np.zeros((1, 3)))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            gaussian_stats(np.zeros((4, 3)), "spherical")


class TestDivergence:
    def test_identical(self):
        stats = gaussian_stats(np.random.default_rng(0).standard_normal((50, 4)))
        assert gaussian_divergence(stats, stats) == 0.0

    def test_one_dimensional(self):
        a = GaussianStats(10, np.array([0.0]), np.array([1.0]))
        b = GaussianStats(10, np.array([1.0]), np.array([1.0]))
        assert gaussian_divergence(a, b) == 1.0

    def test_uses_standard_deviations(self):
        a = GaussianStats(10, np.array([0.0]), np.array([4.0]))
        b = GaussianStats(10, np.array([3.0]), np.array([1.0]))
        assert gaussian_divergence(a, b) == pytest.approx(9.0 / 2.0)

    def test_symmetry_and_zero_iff_equal_means(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = GaussianStats(10, rng.standard_normal(5), rng.uniform(0.1, 2.0, 5))
            b = GaussianStats(10, rng.standard_normal(5), rng.uniform(0.1, 2.0, 5))
            assert gaussian_divergence(a, b) == gaussian_divergence(b, a) > 0
            same_mean = GaussianStats(10, a.mean.copy(), rng.uniform(0.1, 2.0, 5))
            assert gaussian_divergence(a, same_mean) == 0.0


class TestBic:
    def test_same_gaussian_negative(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x, y = rng.standard_normal((500, 3)), rng.standard_normal((500, 3))
            assert bic_distance(x, y) < 0

    def test_separated_gaussians_positive(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((500, 3))
            y = rng.standard_normal((500, 3)) + 10.0
            assert bic_distance(x, y) > 0

    def test_identical_sequence(self):
        x = np.random.default_rng(0).standard_normal((200, 4))
        assert bic_distance(x, x, 1.0) == pytest.approx(-bic_penalty(4, 400), rel=1e-9)
        assert bic_distance(x, x, 0.0) == pytest.approx(0.0, abs=1e-9)

    def test_penalty(self):
        # F=3: 3 means + 6 covariance entries = 9 parameters
        assert bic_penalty(3, 1000) == pytest.approx(0.5 * 9 * np.log(1000))

    def test_symmetry_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.standard_normal((int(rng.integers(20, 80)), 5))
            y = rng.standard_normal((int(rng.integers(20, 80)), 5)) * 2 + 1
            assert bic_distance(x, y, 0.7) == bic_distance(y, x, 0.7)

    def test_data_term_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.standard_normal((30, 4)) * rng.uniform(0.5, 2)
            y = rng.standard_normal((40, 4)) * rng.uniform(0.5, 2) + rng.standard_normal(4)
            assert bic_distance(x, y, 0.0) >= -1e-9

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(4)
        xs = rng.standard_normal((3, 30, 4))
        ys = rng.standard_normal((3, 30, 4)) + 1
        stats_x = [gaussian_stats(x, "full") for x in xs]
        stats_y = [gaussian_stats(y, "full") for y in ys]
        batch = bic_from_moments(
            np.full(3, 30.0), np.stack([s.mean for s in stats_x]), np.stack([s.full_cov for s in stats_x]),
            np.full(3, 30.0), np.stack([s.mean for s in stats_y]), np.stack([s.full_cov for s in stats_y]),
        )
        np.testing.assert_allclose(batch, [bic_distance(x, y) for x, y in zip(xs, ys)], rtol=1e-12)

    def test_too_few_frames(self):
        with pytest.raises(ValueError, match="F \\+ 1"):
            bic_distance(np.zeros((3, 4)), np.zeros((10, 4)))

    def test_not_positive_definite(self):
        with pytest.raises(np.linalg.LinAlgError):
            bic_from_moments(10.0, np.zeros(3), -np.eye(3), 10.0, np.zeros(3), np.eye(3))
