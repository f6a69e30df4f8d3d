import math

import numpy as np
import pytest

from atmosconv.data import synthetic_shapes
from atmosconv.experiments import (
    SET_NAMES,
    EvalReport,
    PairedSetup,
    corrupted_sets,
    evaluate_sets,
    manifest_summary,
    robustness_experiment,
    soft_reg_comparison,
)
from atmosconv.nn import ModelConfig, build_model

TINY = dict(n_train=60, n_test=30, image_size=8, width=2, depth=1, epochs=1, batch_size=20)


class TestEvalReport:
    def test_json_round_trip(self):
        rep = EvalReport({"D": 0.5, "D_S": 0.25}, [0.1] * 9, 0.3, {"seed": 1})
        back = EvalReport.from_json(rep.to_json())
        assert back == rep

    def test_row_fills_missing(self):
        row = EvalReport({"D": 0.5}).row()
        assert list(row) == list(SET_NAMES)
        assert row["D"] == 0.5 and math.isnan(row["D_C"])


class TestSets:
    def test_corrupted_sets(self):
        ds = synthetic_shapes(10, size=8)
        sets, manifests = corrupted_sets(ds, seed=3)
        assert set(sets) == set(SET_NAMES)
        assert sets["D"] is ds
        for name in SET_NAMES[1:]:
            np.testing.assert_array_equal(sets[name].labels, ds.labels)
            assert manifests[name].seed == 3
        assert manifest_summary(manifests["D_C"])["ranges"]["alpha"] == (0.7, 1.3)

    def test_severity_zero_sets_equal_clean(self):
        ds = synthetic_shapes(10, size=8)
        sets, _ = corrupted_sets(ds, seed=3, severity=0.0)
        for name in SET_NAMES:
            np.testing.assert_array_equal(sets[name].images, ds.images)

    def test_evaluate_sets(self):
        ds = synthetic_shapes(27, size=8)
        sets, man = corrupted_sets(ds, seed=0)
        m = build_model(ModelConfig(width=2, depth=1))
        rep = evaluate_sets(m, sets, contrast_set="D", flip_pair=("D", "D_C"), manifests=man)
        assert set(rep.accuracy) == set(SET_NAMES)
        assert all(0 <= a <= 1 for a in rep.accuracy.values())
        assert len(rep.contrast_bins) == 9
        assert 0 <= rep.flip_rate <= 1
        assert rep.meta["manifests"]["D_S"]["variant"] == "S"
        assert EvalReport.from_json(rep.to_json()).accuracy == rep.accuracy


class TestPaired:
    def test_setup_pairs_share_seed(self):
        s = PairedSetup(**TINY)
        a, b = s.model_config("vanilla", 4), s.model_config("normalized", 4)
        assert a.seed == b.seed == 4
        assert a.replace(conv_mode="normalized") == b
        assert s.hyper(4).seed == 4

    def test_robustness_experiment_shape(self):
        summary = robustness_experiment(PairedSetup(**TINY), seeds=(0, 1))
        assert len(summary.per_seed) == 2
        assert len(summary.rows()) == 4
        for mode in ("vanilla", "normalized"):
            assert 0 <= summary.mean_accuracy(mode, "D_S") <= 1
        assert summary.gap("D") == pytest.approx(
            summary.mean_accuracy("normalized", "D") - summary.mean_accuracy("vanilla", "D"))

    def test_extra_sets(self):
        extra = {"other": synthetic_shapes(10, seed=5, size=8)}
        summary = robustness_experiment(PairedSetup(**TINY), seeds=(0,), extra_sets=extra)
        assert "other" in summary.per_seed[0]["vanilla"].accuracy

    def test_soft_reg_comparison(self):
        out = soft_reg_comparison(PairedSetup(**dict(TINY, epochs=2)), strength=0.05)
        assert out["strength"] == 0.05
        assert out["regularized"] < out["unregularized"]
