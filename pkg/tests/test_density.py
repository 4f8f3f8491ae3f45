import numpy as np
import pytest

from tpbs.density import (
    DensityModel,
    cross_gram,
    density_eval,
    density_eval_batch,
    fit_density,
)
from tpbs.serialize import load_density, save_density
from tpbs.splines import basis_masses, build_space


def two_cluster_points(seed, count=200, ndim=2):
    rng = np.random.default_rng(seed)
    half = count // 2
    a = rng.normal(0.27, 0.07, (half, ndim))
    b = rng.normal(0.73, 0.07, (count - half, ndim))
    return np.clip(np.vstack([a, b]), 0.0, 1.0)


class TestDensityModel:
    def test_uniform_everywhere_one(self):
        uni = DensityModel(weights=np.array([1.0]), bins=[np.ones((1, 1))] * 3)
        rng = np.random.default_rng(0)
        for x in rng.uniform(size=(10, 3)):
            assert density_eval(uni, x) == 1.0

    def test_single_product_of_histograms(self):
        bins_x = np.array([[1.5, 0.5]])
        bins_y = np.array([[0.25, 1.0, 1.75]])
        d = DensityModel(weights=np.array([1.0]), bins=[bins_x, bins_y])
        assert density_eval(d, [0.1, 0.9]) == 1.5 * 1.75
        assert density_eval(d, [0.9, 0.4]) == 0.5 * 1.0

    def test_unit_mass_on_grid(self):
        rng = np.random.default_rng(1)
        vals = rng.uniform(0.1, 2.0, (2, 5))
        vals = vals / vals.mean(axis=1, keepdims=True)
        d = DensityModel(weights=np.array([0.3, 0.7]), bins=[vals, vals[:, :3] * 0 + 1.0])
        grid = np.linspace(0, 1, 2001)[:-1] + 1.0 / 4002
        xs, ys = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        mass = density_eval_batch(d, pts).mean()
        assert abs(mass - 1.0) < 1e-6

    def test_component_permutation_invariance(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(0.1, 2.0, (3, 4))
        vals = vals / vals.mean(axis=1, keepdims=True)
        w = np.array([0.2, 0.5, 0.3])
        d1 = DensityModel(weights=w, bins=[vals.copy(), vals.copy()])
        perm = [2, 0, 1]
        d2 = DensityModel(weights=w[perm], bins=[vals[perm], vals[perm]])
        for x in rng.uniform(size=(20, 2)):
            np.testing.assert_allclose(density_eval(d1, x), density_eval(d2, x), rtol=1e-12)

    def test_rejects_bad_weights_and_bins(self):
        with pytest.raises(ValueError, match="probability"):
            DensityModel(weights=np.array([0.5, 0.4]), bins=[np.ones((2, 2))])
        with pytest.raises(ValueError, match="unit mass"):
            DensityModel(weights=np.array([1.0]), bins=[np.array([[2.0, 2.0]])])


class TestFit:
    def test_single_component_single_bin(self):
        pts = np.random.default_rng(0).uniform(size=(50, 2))
        d = fit_density(pts, 1, bins_per_dim=1, em_iters=5, seed=0)
        np.testing.assert_array_equal(d.log_likelihoods, 0.0)
        np.testing.assert_allclose(d.weights, [1.0])

    def test_histogram_ml_before_smoothing(self):
        # all mass in the lower half -> ML bins (2, 0); smoothing keeps order
        pts = np.random.default_rng(1).uniform(0, 0.499, size=(40, 1))
        d = fit_density(pts, 1, bins_per_dim=2, em_iters=3, seed=0, pseudo_count=0.0)
        np.testing.assert_allclose(d.bins[0], [[2.0, 0.0]], atol=1e-12)
        smoothed = fit_density(pts, 1, bins_per_dim=2, em_iters=3, seed=0)
        assert smoothed.bins[0][0, 0] > smoothed.bins[0][0, 1] > 0.0

    def test_loglik_nondecreasing(self):
        for seed in range(5):
            d = fit_density(two_cluster_points(seed), 2, bins_per_dim=8, em_iters=60, seed=seed)
            assert np.all(np.diff(d.log_likelihoods) >= -1e-10)

    def test_weights_on_simplex(self):
        d = fit_density(two_cluster_points(3), 3, bins_per_dim=6, em_iters=30, seed=1)
        assert np.all(d.weights >= 0)
        assert abs(d.weights.sum() - 1.0) < 1e-9

    def test_two_components_beat_one_on_held_out(self):
        train = two_cluster_points(10, count=300)
        held = two_cluster_points(11, count=300)
        fits = [
            fit_density(train, s, bins_per_dim=8, em_iters=60, seed=0) for s in (1, 2)
        ]

        def held_ll(d):
            vals = density_eval_batch(d, held)
            return float(np.sum(np.log(vals)))

        assert held_ll(fits[1]) > held_ll(fits[0])

    def test_deterministic_under_seed(self):
        pts = two_cluster_points(5)
        a = fit_density(pts, 2, bins_per_dim=6, em_iters=20, seed=9)
        b = fit_density(pts, 2, bins_per_dim=6, em_iters=20, seed=9)
        np.testing.assert_array_equal(a.weights, b.weights)
        for ba, bb in zip(a.bins, b.bins):
            np.testing.assert_array_equal(ba, bb)

    def test_rejects_more_components_than_points(self):
        with pytest.raises(ValueError, match="exceed"):
            fit_density(np.zeros((3, 2)), 4, bins_per_dim=2)

    def test_smoothed_bins_strictly_positive(self):
        d = fit_density(two_cluster_points(6), 2, bins_per_dim=10, em_iters=30, seed=2)
        for b in d.bins:
            assert b.min() > 0.0


class TestCrossGram:
    def test_uniform_density_gives_masses(self):
        space = build_space(7, 3)
        np.testing.assert_allclose(
            cross_gram(space, np.ones(5)), basis_masses(space), atol=1e-14
        )

    def test_degree_zero_identical_grids(self):
        space = build_space(4, 0)
        heights = np.array([1.2, 0.8, 0.4, 1.6])
        np.testing.assert_allclose(cross_gram(space, heights), heights / 4.0, atol=1e-14)

    def test_cubic_vs_dense_quadrature(self):
        space = build_space(6, 3)
        heights = np.array([0.5, 1.5])
        got = cross_gram(space, heights)
        # dense composite quadrature over span-and-bin pieces
        from tpbs.splines import eval_basis_dense

        edges = sorted(set(space.span_breaks().tolist()) | {0.5})
        nodes, weights = np.polynomial.legendre.leggauss(64)
        want = np.zeros(6)
        for a, b in zip(edges[:-1], edges[1:]):
            half = 0.5 * (b - a)
            for t, w in zip(nodes, weights):
                x = 0.5 * (a + b) + half * t
                want += (w * half) * eval_basis_dense(space, x) * heights[int(x >= 0.5)]
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestDensityFiles:
    def test_round_trip(self, tmp_path):
        d = fit_density(two_cluster_points(7), 2, bins_per_dim=5, em_iters=10, seed=3)
        for text in (False, True):
            path = tmp_path / ("d.txt" if text else "d.tpdf")
            save_density(d, path, text=text)
            loaded = load_density(path)
            np.testing.assert_array_equal(loaded.weights, d.weights)
            for ba, bb in zip(loaded.bins, d.bins):
                np.testing.assert_array_equal(ba, bb)
