"""Training loop behaviour: determinism, selection, divergence, histories."""

import numpy as np
import pytest

from mapa_lab.datasets import generate
from mapa_lab.errors import ConfigurationError, TrainingError
from mapa_lab.mlp import param_list
from mapa_lab.training import HISTORY_FIELDS, TrainConfig, mapa_k, train


@pytest.fixture(scope="module")
def small_data():
    return generate("abs_value", 300, seed=3)


def tiny_config(method, **kw):
    base = dict(method=method, epochs=6, batch_size=50, restarts=2, s=5,
                hidden=(16, 16), seed=11)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(method="gan")

    def test_k_rule(self):
        assert mapa_k(10, 0.1) == 1
        assert mapa_k(10, 0.9) == 9
        assert mapa_k(50, 0.1) == 5
        assert mapa_k(1, 0.1) == 1

    def test_ae_training_bound_improves_monotonically(self, small_data):
        ds, _ = small_data
        result = train(ds, tiny_config("ae", epochs=15))
        tb = [row["train_bound"] for row in result.history]
        assert tb[-1] > tb[0]
        # plateaus allowed; genuine regressions are not
        assert np.all(np.diff(tb) >= -0.1)

    def test_same_seed_bitwise_identical(self, small_data):
        ds, gt = small_data
        cfg = tiny_config("mapa", epochs=3)
        r1 = train(ds, cfg, gt_model=gt)
        r2 = train(ds, cfg, gt_model=gt)
        for a, b in zip(param_list(r1.model.decoder) + param_list(r1.model.encoder),
                        param_list(r2.model.decoder) + param_list(r2.model.encoder)):
            np.testing.assert_array_equal(a, b)
        assert r1.best_restart == r2.best_restart

    def test_parallel_restarts_match_sequential(self, small_data):
        ds, gt = small_data
        seq = train(ds, tiny_config("mapa", epochs=3, jobs=1), gt_model=gt)
        par = train(ds, tiny_config("mapa", epochs=3, jobs=2), gt_model=gt)
        for a, b in zip(param_list(seq.model.decoder), param_list(par.model.decoder)):
            np.testing.assert_array_equal(a, b)

    def test_history_schema_and_val_metric(self, small_data):
        ds, _ = small_data
        result = train(ds, tiny_config("iwae", epochs=4))
        assert len(result.history) == 4
        for row in result.history:
            assert tuple(row.keys()) == HISTORY_FIELDS
        assert np.isfinite(result.val_metric)
        assert result.proposal is not None
        assert result.model.encoder is None

    def test_vae_runs_and_counts_passes(self, small_data):
        ds, _ = small_data
        result = train(ds, tiny_config("vae", epochs=3, restarts=1))
        for row in result.history:
            # one encoder and one decoder pass per training point per epoch
            assert row["decoder_passes"] == 240
            assert row["encoder_passes"] == 240

    def test_iwae_decoder_passes_are_batch_times_s(self, small_data):
        ds, _ = small_data
        result = train(ds, tiny_config("iwae", epochs=2, restarts=1, s=7))
        for row in result.history:
            assert row["decoder_passes"] == 240 * 7
            assert row["encoder_passes"] == 240

    def test_mapa_decoder_passes_capped_by_atoms(self, small_data):
        ds, gt = small_data
        result = train(ds, tiny_config("mapa", epochs=2, restarts=1, s=64), gt_model=gt)
        n_atoms = len(result.atom_indices)
        steps_per_epoch = int(np.ceil(n_atoms / 50))
        for row in result.history:
            assert row["decoder_passes"] <= n_atoms * steps_per_epoch

    def test_mapa_gt_requires_ground_truth(self, small_data):
        ds, _ = small_data
        with pytest.raises(ConfigurationError):
            train(ds, tiny_config("mapa_gt"))

    def test_mapa_variants_run(self, small_data):
        ds, gt = small_data
        for method in ("mapa_gt", "mapa_naive"):
            result = train(ds, tiny_config(method, epochs=2, restarts=1), gt_model=gt)
            assert np.isfinite(result.val_metric)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_restarts_raise_training_error(self, small_data):
        # Adam steps are bounded by lr, so overflow needs lr near sqrt(float max)
        ds, gt = small_data
        with pytest.raises(TrainingError):
            train(ds, tiny_config("mapa", lr=1e160, epochs=3), gt_model=gt)

    def test_failed_restart_excluded_from_selection(self, small_data):
        # lr is fine; simulate by mixing: use huge lr only through one restart's
        # init being unstable is not controllable, so check the summary fields instead
        ds, gt = small_data
        result = train(ds, tiny_config("mapa", epochs=2), gt_model=gt)
        assert all(not s["failed"] for s in result.restart_summaries)
        assert result.best_restart in {0, 1}
