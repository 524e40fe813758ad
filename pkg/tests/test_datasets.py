"""Generators, surrogate fitting, splits, and the dataset file format."""

import numpy as np
import pytest
from scipy.stats import ks_2samp

from mapa_lab.datasets import (
    GENERATORS,
    closed_form,
    generate,
    load_dataset,
    save_dataset,
    split,
)
from mapa_lab.errors import ConfigurationError
from mapa_lab.mlp import mlp_forward


class TestClosedForms:
    def test_abs_value_at_zero(self):
        # Phi(0) = 0.5, both coordinates
        np.testing.assert_allclose(closed_form("abs_value", 0.0), [[0.5, 0.5]], atol=1e-15)

    def test_circle_at_zero(self):
        # Phi(0) = 0.5 -> angle pi -> (cos pi, sin pi)
        np.testing.assert_allclose(closed_form("circle", 0.0), [[-1.0, 0.0]], atol=1e-15)

    def test_figure8_at_angle_pi(self):
        # Phi(z) = 2/9 makes the angle exactly pi; frozen inverse-CDF value
        z = -0.764709673786387
        np.testing.assert_allclose(closed_form("figure8", z),
                                   [[-np.sqrt(2) / 2, 0.0]], atol=1e-12)

    def test_noise_levels_match_reference(self):
        expected = {"figure8": 0.02, "circle": 0.01, "abs_value": 0.01,
                    "clusters": 0.2, "spiral_dots": 0.01}
        for name, var in expected.items():
            assert GENERATORS[name].noise_var == var


@pytest.fixture(scope="module")
def abs_value_small():
    return generate("abs_value", 2000, seed=3)


class TestGenerate:
    def test_requires_known_name(self):
        with pytest.raises(ConfigurationError):
            generate("nope", 100, seed=0)

    def test_requires_min_points(self):
        with pytest.raises(ConfigurationError):
            generate("abs_value", 5, seed=0)

    def test_deterministic_per_seed(self, abs_value_small):
        ds1, _ = abs_value_small
        ds2, _ = generate("abs_value", 2000, seed=3)
        np.testing.assert_array_equal(ds1.X, ds2.X)
        np.testing.assert_array_equal(ds1.split_tags, ds2.split_tags)

    def test_noise_free_part_is_surrogate_output(self, abs_value_small):
        ds, gt = abs_value_small
        recon = mlp_forward(gt.decoder, ds.z_gt.reshape(-1, 1))
        np.testing.assert_allclose(ds.X - ds.eps_gt, recon, atol=1e-12)

    def test_surrogate_passes_mse_gate(self, abs_value_small):
        _, gt = abs_value_small
        assert gt.fit_mse < 1e-4
        # gate is also checked against the closed form on an independent grid
        zg = np.linspace(-3, 3, 2001)
        pred = mlp_forward(gt.decoder, zg.reshape(-1, 1))
        assert np.mean((pred - closed_form("abs_value", zg)) ** 2) < 5e-4

    def test_noise_variance_within_15_percent(self, abs_value_small):
        ds, _ = abs_value_small
        for d in range(ds.obs_dim):
            v = np.var(ds.eps_gt[:, d])
            assert abs(v - ds.noise_var) <= 0.15 * ds.noise_var

    def test_budget_exhaustion_reports_achieved_mse(self):
        from mapa_lab.datasets import fit_surrogate
        from mapa_lab.errors import FitFailureError
        with pytest.raises(FitFailureError, match="achieved"):
            fit_surrogate("spiral_dots", seed=99, max_steps=250)

    def test_intuition_variants_share_marginal(self):
        ds1, gt1 = generate("intuition1d_v1", 5000, seed=11)
        ds2, gt2 = generate("intuition1d_v2", 5000, seed=12)
        assert gt1 is None and gt2 is None
        pre1 = (ds1.X - ds1.eps_gt)[:, 0]
        pre2 = (ds2.X - ds2.eps_gt)[:, 0]
        assert ks_2samp(pre1, pre2).statistic <= 0.05


class TestSplit:
    def test_all_train(self, abs_value_small):
        ds, _ = abs_value_small
        tagged = split(ds, (1.0, 0.0, 0.0), seed=0)
        assert tagged.split_sizes() == [2000, 0, 0]

    def test_exact_multiples(self, abs_value_small):
        ds, _ = abs_value_small
        tagged = split(ds, (0.8, 0.1, 0.1), seed=5)
        assert tagged.split_sizes() == [1600, 200, 200]

    def test_disjoint_cover(self, abs_value_small):
        ds, _ = abs_value_small
        tagged = split(ds, (0.6, 0.2, 0.2), seed=5)
        all_idx = np.concatenate([tagged.indices(w) for w in ("train", "val", "test")])
        assert sorted(all_idx) == list(range(ds.n))

    def test_resplit_replays(self, abs_value_small):
        ds, _ = abs_value_small
        a = split(ds, (0.5, 0.25, 0.25), seed=9)
        b = split(ds, (0.5, 0.25, 0.25), seed=9)
        np.testing.assert_array_equal(a.split_tags, b.split_tags)

    def test_negative_fraction_rejected(self, abs_value_small):
        ds, _ = abs_value_small
        with pytest.raises(ConfigurationError):
            split(ds, (1.1, -0.1, 0.0), seed=0)


class TestDiskFormat:
    def test_roundtrip(self, abs_value_small, tmp_path):
        ds, gt = abs_value_small
        save_dataset(tmp_path / "d", ds, gt)
        ds2, gt2 = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(ds.X, ds2.X)
        np.testing.assert_array_equal(ds.z_gt, ds2.z_gt)
        np.testing.assert_array_equal(ds.eps_gt, ds2.eps_gt)
        np.testing.assert_array_equal(ds.split_tags, ds2.split_tags)
        assert gt2.noise_var == gt.noise_var
        for w1, w2 in zip(gt.decoder.weights, gt2.decoder.weights):
            np.testing.assert_array_equal(w1, w2)

    def test_arrays_are_little_endian_f64(self, abs_value_small, tmp_path):
        ds, gt = abs_value_small
        save_dataset(tmp_path / "d", ds, gt)
        raw = np.fromfile(tmp_path / "d" / "X.bin", dtype="<f8")
        np.testing.assert_array_equal(raw.reshape(ds.n, ds.obs_dim), ds.X)
