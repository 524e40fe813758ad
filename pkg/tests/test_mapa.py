"""Proximity tables: kernels, normalization, top-k, truncation, sampling."""

import numpy as np
import pytest
from scipy.stats import spearmanr

from mapa_lab import rng
from mapa_lab.datasets import generate
from mapa_lab.errors import ConfigurationError, DegenerateRowError, DomainError
from mapa_lab.mapa import (
    MapaTable,
    bernoulli_kernel,
    compute_table,
    compute_table_cached,
    ground_truth_table,
    load_table,
    naive_table,
    rbf_kernel,
    sample,
    save_table,
    softened_bernoulli_kappa,
    top_k,
    truncate_renormalize,
)
from mapa_lab.special import gaussian_logpdf


class TestComputeTable:
    def test_two_identical_points(self):
        X = np.array([[1.0, 2.0], [1.0, 2.0]])
        table = compute_table(X, rbf_kernel(0.5))
        np.testing.assert_allclose(table.q, 0.5, atol=1e-15)

    def test_three_point_line_matches_formula(self):
        # x = {0, 1, 10}, bandwidth 1: row 0 proportional to [1, e^-0.5, e^-50]
        X = np.array([[0.0], [1.0], [10.0]])
        table = compute_table(X, rbf_kernel(1.0))
        raw = np.array([1.0, np.exp(-0.5), np.exp(-50.0)])
        np.testing.assert_allclose(table.q[0], raw / raw.sum(), rtol=1e-12)

    def test_rows_sum_to_one(self):
        X = rng.make_rng(0).normal(size=(40, 2))
        table = compute_table(X, rbf_kernel(0.05))
        np.testing.assert_allclose(table.q.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(table.q >= 0)

    def test_scale_invariance_vs_full_density(self):
        # normalizing constants cancel: unnormalized RBF == full Gaussian pdf rows
        X = rng.make_rng(1).normal(size=(25, 2))
        var = 0.07
        table = compute_table(X, rbf_kernel(var))
        ll = gaussian_logpdf(X[:, None, :], X[None, :, :], var).sum(axis=2)
        m = ll.max(axis=1, keepdims=True)
        dens = np.exp(ll - m)
        dens /= dens.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(table.q, dens, atol=1e-12)

    def test_permutation_equivariance(self):
        X = rng.make_rng(2).normal(size=(15, 2))
        p = rng.make_rng(3).permutation(15)
        t1 = compute_table(X, rbf_kernel(0.1))
        t2 = compute_table(X[p], rbf_kernel(0.1))
        np.testing.assert_allclose(t2.q, t1.q[np.ix_(p, p)], atol=1e-14)

    def test_underflowing_tails_are_exact_zeros_but_rows_valid(self):
        X = np.array([[0.0, 0.0], [1e-3, 0.0], [200.0, 0.0]])
        table = compute_table(X, rbf_kernel(0.01))
        assert table.q[0, 2] == 0.0
        np.testing.assert_allclose(table.q.sum(axis=1), 1.0, atol=1e-12)

    def test_needs_two_points(self):
        with pytest.raises(ConfigurationError):
            compute_table(np.zeros((1, 2)), rbf_kernel(1.0))


class TestBernoulliKernel:
    def test_all_ones_matching(self):
        x = np.ones(3)
        assert softened_bernoulli_kappa(x, x, 0.9) == pytest.approx(0.9 ** 3, rel=1e-12)

    def test_all_zeros_matching(self):
        x = np.zeros(4)
        assert softened_bernoulli_kappa(x, x, 0.9) == 1.0

    def test_hard_limit_zeroes_mismatch(self):
        x_n = np.array([1.0, 0.0])
        x_i = np.array([1.0, 1.0])
        assert softened_bernoulli_kappa(x_n, x_i, 1.0) == 0.0

    def test_non_binary_rejected(self):
        with pytest.raises(DomainError):
            softened_bernoulli_kappa(np.array([0.5]), np.array([1.0]), 0.9)

    def test_table_rows_match_pairwise_kappa(self):
        X = (rng.make_rng(4).uniform(size=(8, 5)) > 0.5).astype(np.float64)
        kern = bernoulli_kernel(0.9)
        table = compute_table(X, kern)
        for n in range(8):
            raw = np.array([softened_bernoulli_kappa(X[n], X[i], 0.9) for i in range(8)])
            np.testing.assert_allclose(table.q[n], raw / raw.sum(), rtol=1e-10)


class TestGroundTruthTable:
    def test_identical_latents_give_uniform(self):
        ds, gt = generate("abs_value", 2000, seed=3)
        two = type(ds)(name=ds.name, X=ds.X[:2].copy(), z_gt=np.array([0.4, 0.4]),
                       eps_gt=ds.eps_gt[:2], noise_var=ds.noise_var, seed=0)
        table = ground_truth_table(two, gt)
        np.testing.assert_allclose(table.q, 0.5, atol=1e-12)

    def test_toy_linear_decoder_row(self):
        # f(z) = z, noise 1, x_n = 0, latents {0, 1, 3}: row ~ [1, e^-.5, e^-4.5]
        from mapa_lab.datasets import Dataset, GroundTruthModel
        from mapa_lab.mlp import MlpParams
        lin = MlpParams(weights=[np.eye(1)], biases=[np.zeros(1)])
        ds = Dataset(name="toy", X=np.array([[0.0], [1.0], [3.0]]),
                     z_gt=np.array([0.0, 1.0, 3.0]), eps_gt=np.zeros((3, 1)),
                     noise_var=1.0, seed=0)
        table = ground_truth_table(ds, GroundTruthModel(decoder=lin, noise_var=1.0))
        raw = np.array([1.0, np.exp(-0.5), np.exp(-4.5)])
        np.testing.assert_allclose(table.q[0], raw / raw.sum(), rtol=1e-12)
        np.testing.assert_allclose(table.q.sum(axis=1), 1.0, atol=1e-12)


class TestNaiveTable:
    def test_uniform_entries(self):
        table = naive_table(4)
        np.testing.assert_array_equal(table.q, np.full((4, 4), 0.25))
        np.testing.assert_allclose(table.q.sum(axis=1), 1.0)

    def test_top_k_ties_break_by_index(self):
        table = naive_table(6)
        np.testing.assert_array_equal(top_k(table, 3, 2), [0, 1])


class TestTopKAndTruncation:
    def _tiny(self):
        q = np.array([[0.5, 0.3, 0.2], [0.7, 0.2, 0.1], [0.2, 0.2, 0.6]])
        perm = np.argsort(-q, axis=1, kind="stable").astype(np.uint32)
        return MapaTable(q=q, perm=perm, kernel_descriptor="toy", fingerprint="x")

    def test_top_1(self):
        np.testing.assert_array_equal(top_k(self._tiny(), 1, 1), [0])

    def test_k_equals_n(self):
        assert sorted(top_k(self._tiny(), 0, 3)) == [0, 1, 2]

    def test_k_out_of_range(self):
        with pytest.raises(ConfigurationError):
            top_k(self._tiny(), 0, 4)

    def test_truncation_arithmetic(self):
        prop = truncate_renormalize(self._tiny(), 0, 1)
        np.testing.assert_allclose(prop.probs, [0.0, 0.6, 0.4], atol=1e-12)

    def test_k_zero_identity(self):
        prop = truncate_renormalize(self._tiny(), 1, 0)
        np.testing.assert_allclose(prop.probs, [0.7, 0.2, 0.1], atol=1e-15)

    def test_full_truncation_degenerate(self):
        with pytest.raises(DegenerateRowError):
            truncate_renormalize(self._tiny(), 0, 3)

    def test_sampled_frequencies_within_multinomial_bands(self):
        prop = truncate_renormalize(self._tiny(), 0, 1)
        draws = sample(prop, 100_000, rng.make_rng(77))
        freq = np.bincount(draws, minlength=3) / 100_000
        assert freq[0] == 0.0
        for i, p in enumerate([0.0, 0.6, 0.4]):
            if p > 0:
                sigma = np.sqrt(p * (1 - p) / 100_000)
                assert abs(freq[i] - p) <= 3 * sigma


class TestTrendAgainstGroundTruth:
    def test_median_spearman_above_gate(self):
        # quick single-dataset version; the full five-dataset sweep is in acceptance
        ds, gt = generate("abs_value", 500, seed=21)
        mapa = compute_table(ds.X, rbf_kernel(ds.noise_var))
        truth = ground_truth_table(ds, gt)
        rows = rng.make_rng(22).choice(500, size=50, replace=False)
        corrs = [spearmanr(mapa.q[n], truth.q[n]).statistic for n in rows]
        assert np.median(corrs) >= 0.7


class TestCache:
    def test_roundtrip(self, tmp_path):
        X = rng.make_rng(5).normal(size=(12, 2))
        table = compute_table(X, rbf_kernel(0.2))
        save_table(tmp_path / "t", table)
        back = load_table(tmp_path / "t.json")
        np.testing.assert_array_equal(back.q, table.q)
        np.testing.assert_array_equal(back.perm, table.perm)
        assert back.kernel_descriptor == table.kernel_descriptor
        assert back.fingerprint == table.fingerprint

    def test_cached_compute_hits_disk(self, tmp_path):
        X = rng.make_rng(6).normal(size=(10, 2))
        t1 = compute_table_cached(X, rbf_kernel(0.1), cache=tmp_path)
        files = list(tmp_path.iterdir())
        t2 = compute_table_cached(X, rbf_kernel(0.1), cache=tmp_path)
        assert list(tmp_path.iterdir()) == files
        np.testing.assert_array_equal(t1.q, t2.q)
