"""Metrics, sweep harness, and results tables."""
import numpy as np
import pytest

from speedcast.errors import InvalidConfigError
from speedcast.evaluation import (
    RESULTS_HEADER,
    SweepSpec,
    evaluate,
    measure_inference,
    metrics_from_predictions,
    predict,
    run_ablation,
    write_results_table,
)
from speedcast.model import init_params
from speedcast.train import TrainConfig
from speedcast.types import CategoryQuota

from conftest import TINY_QUOTA


class TestMetrics:
    def test_hand_worked_confusion(self):
        labels = np.array([0, 0, 1, 2, 3, 3])
        preds = np.array([0, 1, 1, 2, 3, 0])
        m = metrics_from_predictions(preds, labels)
        assert m.confusion[0, 0] == 1 and m.confusion[0, 1] == 1
        assert m.recalls[0] == pytest.approx(50.0)
        assert m.recalls[1] == pytest.approx(100.0)
        assert m.recalls[3] == pytest.approx(50.0)
        assert m.accuracy == pytest.approx(100.0 * 4 / 6)
        assert m.total == 6

    def test_absent_class_gives_none_recall_with_warning(self):
        labels = np.array([0, 1, 1])
        preds = np.array([0, 1, 1])
        with pytest.warns(UserWarning):
            m = metrics_from_predictions(preds, labels)
        assert m.recalls[2] is None and m.recalls[3] is None
        assert m.accuracy == pytest.approx(100.0)

    def test_empty_set_rejected(self):
        with pytest.raises(InvalidConfigError):
            metrics_from_predictions(np.empty(0, dtype=int), np.empty(0, dtype=int))

    def test_evaluate_matches_predict(self, small_dataset, tiny_model_config):
        import dataclasses

        cfg = dataclasses.replace(
            tiny_model_config, T=small_dataset.T, FT=small_dataset.FT, K=1
        )
        params = init_params(cfg, seed=0)
        feats, mask, labels = small_dataset.subset(small_dataset.test_idx[:20])
        m = evaluate(params, feats, mask, labels)
        preds = predict(params, feats, mask)
        assert m.accuracy == pytest.approx(100.0 * (preds == labels).mean())

    def test_batched_predict_matches_single_batch(self, small_dataset, tiny_model_config):
        import dataclasses

        cfg = dataclasses.replace(
            tiny_model_config, T=small_dataset.T, FT=small_dataset.FT, K=1
        )
        params = init_params(cfg, seed=0)
        feats, mask, _ = small_dataset.subset(small_dataset.test_idx[:10])
        np.testing.assert_array_equal(
            predict(params, feats, mask, batch_size=3),
            predict(params, feats, mask, batch_size=100),
        )


class TestInferenceTiming:
    def test_reports_positive_time(self, small_dataset, tiny_model_config):
        import dataclasses

        cfg = dataclasses.replace(
            tiny_model_config, T=small_dataset.T, FT=small_dataset.FT, K=1
        )
        params = init_params(cfg, seed=0)
        feats, mask, _ = small_dataset.subset(small_dataset.test_idx[:8])
        out = measure_inference(params, feats, mask, repeats=1)
        assert out["per_clip_us"] > 0.0

    def test_empty_set_is_zero(self, tiny_model_config):
        params = init_params(tiny_model_config, seed=0)
        out = measure_inference(params, np.zeros((0, 3, 6, 4)), np.zeros((0, 3, 6), dtype=bool))
        assert out["per_clip_us"] == 0.0


class TestSweep:
    def test_cells_cover_cartesian_product(self):
        spec = SweepSpec(T_set=(2, 3), FT_set=(1,), K_set=(1, 2), variants=("base",))
        cells = list(spec.cells())
        assert len(cells) == 4
        assert {(t, k) for _, t, _, k, _, _ in cells} == {(2, 1), (2, 2), (3, 1), (3, 2)}

    def test_empty_set_rejected(self):
        with pytest.raises(InvalidConfigError):
            SweepSpec(T_set=())

    def test_run_ablation_records_failures_and_continues(self, small_synth):
        # T larger than any session forces a cell failure; the base cell still runs.
        spec = SweepSpec(
            T_set=(4,), FT_set=(1,), K_set=(1,), variants=("base",),
            quotas=(TINY_QUOTA,), seeds=(0,),
        )
        bad = SweepSpec(
            T_set=(500,), FT_set=(1,), K_set=(1,), variants=("base",),
            quotas=(TINY_QUOTA,), seeds=(0,),
        )
        config = TrainConfig(batch_size=128, max_epochs=1, seed=0)
        ok = run_ablation(small_synth.sessions, spec, config)
        failed = run_ablation(small_synth.sessions, bad, config)
        assert ok[0].error is None and ok[0].metrics is not None
        assert failed[0].error is not None and failed[0].metrics is None

    def test_results_table_well_formed(self, small_synth, tmp_path):
        spec = SweepSpec(
            T_set=(4,), FT_set=(1,), K_set=(1,), variants=("base", "base_single"),
            quotas=(TINY_QUOTA,), seeds=(0,),
        )
        config = TrainConfig(batch_size=128, max_epochs=1, seed=0)
        results = run_ablation(small_synth.sessions, spec, config)
        path = tmp_path / "results.csv"
        write_results_table(results, path)
        lines = path.read_text().splitlines()
        assert lines[0] == RESULTS_HEADER
        assert len(lines) == 3
        for line in lines[1:]:
            assert len(line.split(",")) == len(RESULTS_HEADER.split(","))

    def test_cells_are_bitwise_reproducible(self, small_synth):
        spec = SweepSpec(
            T_set=(4,), FT_set=(1,), K_set=(1,), variants=("base",),
            quotas=(TINY_QUOTA,), seeds=(0,),
        )
        config = TrainConfig(batch_size=128, max_epochs=2, seed=7)
        a = run_ablation(small_synth.sessions, spec, config)
        b = run_ablation(small_synth.sessions, spec, config)
        assert a[0].metrics is not None and b[0].metrics is not None
        np.testing.assert_array_equal(a[0].metrics.confusion, b[0].metrics.confusion)
        assert a[0].report.val_losses == b[0].report.val_losses
