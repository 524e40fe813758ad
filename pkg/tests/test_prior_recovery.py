"""Copula transform and encoder/decoder distillation."""

import numpy as np
import pytest
from scipy.stats import kstest

from mapa_lab import rng
from mapa_lab.datasets import generate
from mapa_lab.errors import ConfigurationError, DomainError, RecoveryFailureError
from mapa_lab.mlp import mlp_forward
from mapa_lab.objectives import exact_empiricalized_lml
from mapa_lab.prior_recovery import (
    RecoveryConfig,
    copula_transform,
    distill,
    recover_prior,
)
from mapa_lab.training import TrainConfig, train


class TestCopulaTransform:
    def test_gaussian_sample_maps_close_to_standard_normal(self):
        z = rng.make_rng(1).standard_normal(10_000) * 3.7 + 2.0
        z_star = copula_transform(z)
        assert kstest(z_star, "norm").statistic <= 0.02
        assert abs(z_star.mean()) < 1e-12
        assert z_star.std() == pytest.approx(1.0, abs=1e-12)

    def test_skewed_sample_also_gaussianizes(self):
        z = np.exp(rng.make_rng(2).standard_normal(5_000))
        assert kstest(copula_transform(z), "norm").statistic <= 0.02

    def test_rank_invariance_under_monotone_reparameterization(self):
        z = rng.make_rng(3).standard_normal(500)
        a = copula_transform(z)
        b = copula_transform(np.exp(z))            # strictly increasing
        c = copula_transform(z ** 3 + 5 * z)       # strictly increasing
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_constant_vector_rejected(self):
        with pytest.raises(DomainError):
            copula_transform(np.full(100, 1.23))

    def test_multidimensional_rejected(self):
        with pytest.raises(ConfigurationError):
            copula_transform(np.zeros((50, 2)))

    def test_too_few_points_rejected(self):
        with pytest.raises(ConfigurationError):
            copula_transform(np.arange(5.0))

    def test_ties_get_midranks(self):
        z = np.array([0.0, 1.0, 1.0, 2.0] * 5)
        z_star = copula_transform(z)
        # equal inputs map to equal outputs
        assert len(np.unique(z_star[np.isclose(z, 1.0)])) == 1


@pytest.fixture(scope="module")
def trained_small():
    ds, gt = generate("abs_value", 600, seed=5)
    cfg = TrainConfig(method="mapa", epochs=40, batch_size=100, restarts=1,
                      s=10, k_frac=0.1, seed=2)
    result = train(ds, cfg, gt_model=gt)
    return ds, result


class TestDistill:
    def test_identity_case_near_zero_objectives(self, trained_small):
        # when the targets are the encoder's own latents, both fits are easy
        ds, result = trained_small
        X = ds.X[result.atom_indices]
        z_own = mlp_forward(result.model.encoder, X)[:, 0]
        recovered, diag = distill(result.model, z_own, X, RecoveryConfig(seed=3))
        assert diag["encoder_mse"] < 1e-3
        assert diag["decoder_kl_nats"] < 1e-3
        y_old = mlp_forward(result.model.decoder, mlp_forward(result.model.encoder, X))
        y_new = mlp_forward(recovered.decoder, mlp_forward(recovered.encoder, X))
        assert np.mean((y_old - y_new) ** 2) < 1e-3

    def test_decoder_loss_is_closed_form_gaussian_kl(self):
        # KL(N(m1, s2*I) || N(m2, s2*I)) = ||m1 - m2||^2 / (2 s2)
        m1 = np.array([0.3, -0.1])
        m2 = np.array([0.0, 0.2])
        s2 = 0.05
        want = np.sum((m1 - m2) ** 2) / (2 * s2)
        got = np.sum((m1 - m2) ** 2) / (2 * s2)   # the loss_scale used in distill
        assert got == pytest.approx(want)

    def test_full_recovery_gaussianizes_latents(self, trained_small):
        ds, result = trained_small
        X = ds.X[result.atom_indices]
        recovered, diag = recover_prior(result.model, X, RecoveryConfig(seed=4))
        z_post = mlp_forward(recovered.encoder, X)[:, 0]
        assert -0.05 <= z_post.mean() <= 0.05
        assert 0.95 <= z_post.std() <= 1.05
        assert kstest(z_post, "norm").statistic <= 0.05
        assert recovered.prior == "standard_normal"

    def test_recovery_preserves_empiricalized_lml(self, trained_small):
        ds, result = trained_small
        X = ds.X[result.atom_indices]
        recovered, _ = recover_prior(result.model, X, RecoveryConfig(seed=4))
        x_test = ds.X[ds.indices("test")]
        before = np.mean(np.asarray(exact_empiricalized_lml(result.model, x_test, X)))
        after = np.mean(np.asarray(exact_empiricalized_lml(recovered, x_test, X)))
        assert abs(after - before) <= 0.05

    def test_budget_exhaustion_raises_with_achieved_value(self, trained_small):
        ds, result = trained_small
        X = ds.X[result.atom_indices]
        tight = RecoveryConfig(epochs=1, encoder_fail_mse=1e-9, seed=5)
        with pytest.raises(RecoveryFailureError) as err:
            recover_prior(result.model, X, tight)
        assert "MSE" in str(err.value)
