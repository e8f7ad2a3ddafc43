import numpy as np
import pytest

from silentwear.config import FineTuneConfig, RunConfig, SynthSpec, TrainConfig
from silentwear.emgio import CommandLabel, Condition
from silentwear.errors import IncompleteManifest
from silentwear.evalharness import (
    Setting,
    WindowSource,
    make_folds_global,
    make_folds_intersession,
    run_incremental_a,
    run_incremental_b,
    run_setting,
    summarize_subjects,
    window_ablation,
)
from silentwear.synth import synth_dataset

V = Condition.VOCALIZED


@pytest.fixture(scope="module")
def quick_cfg():
    return RunConfig(
        train=TrainConfig(max_epochs=1),
        fine_tune=FineTuneConfig(max_epochs=1, train_per_class=1, val_per_class=1),
    )


class TestFolds:
    def test_global_folds(self, make_manifest):
        folds = make_folds_global(make_manifest(), "S01", V)
        assert len(folds) == 5
        for i, fold in enumerate(folds):
            assert len(fold.test_refs) == 3 and len(fold.train_refs) == 12
            assert {r.batch for r in fold.test_refs} == {i + 1}
            assert sorted(r.session for r in fold.test_refs) == [1, 2, 3]
            assert not set(fold.test_refs) & set(fold.train_refs)

    def test_intersession_folds(self, make_manifest):
        folds = make_folds_intersession(make_manifest(), "S01", V)
        assert len(folds) == 3
        for i, fold in enumerate(folds):
            assert len(fold.train_refs) == 10 and len(fold.test_refs) == 5
            assert {r.session for r in fold.test_refs} == {i + 1}

    def test_two_sessions_warn(self, make_manifest, caplog_loguru):
        folds = make_folds_intersession(make_manifest(n_sessions=2), "S01", V)
        assert len(folds) == 2
        assert "only 2 sessions" in caplog_loguru.text

    def test_single_session_rejected(self, make_manifest):
        with pytest.raises(IncompleteManifest):
            make_folds_intersession(make_manifest(n_sessions=1), "S01", V)

    def test_missing_batch_named(self, make_manifest):
        with pytest.raises(IncompleteManifest, match="batch=5"):
            make_folds_global(make_manifest(n_batches=4), "S01", V)

    def test_unknown_subject(self, make_manifest):
        with pytest.raises(IncompleteManifest):
            make_folds_global(make_manifest(), "S02", V)


class TestWindowSource:
    def test_cached_and_natural_composition(self, tiny_dataset):
        source = WindowSource(tiny_dataset)
        ref = tiny_dataset.refs("S01", V)[0]
        first = source.windows(ref, 800)
        assert source.windows(ref, 800) is first
        x, y = source.arrays([ref], 800)
        assert x.shape == (32, 14, 400)
        assert np.bincount(y, minlength=9)[CommandLabel.REST] == 16


class TestRunSetting:
    def test_global_report(self, tiny_dataset, quick_cfg):
        report = run_setting(Setting.GLOBAL, tiny_dataset, "S01", V, 800, quick_cfg)
        assert len(report.folds) == 5
        for fold in report.folds:
            assert 0.0 <= fold.balanced_accuracy <= 1.0
            assert np.array(fold.confusion).shape == (9, 9)
            assert np.sum(fold.confusion) == fold.n_test == 3 * 32
            assert fold.itr is None
        data = report.to_dict()
        assert data["mean"] == pytest.approx(np.mean(report.accuracies))
        assert data["config"]["window_ms"] == 800
        assert data["version"]

    def test_reproducible(self, tiny_dataset, quick_cfg):
        source = WindowSource(tiny_dataset)
        a = run_setting(Setting.INTERSESSION, tiny_dataset, "S01", V, 800, quick_cfg, source)
        b = run_setting(Setting.INTERSESSION, tiny_dataset, "S01", V, 800, quick_cfg, source)
        assert a.to_dict() == b.to_dict()

    def test_parallel_folds(self, tiny_dataset, quick_cfg):
        report = run_setting(Setting.INTERSESSION, tiny_dataset, "S01", V, 800, quick_cfg,
                             jobs=2)
        assert [f.fold_id for f in report.folds] == [0, 1, 2]
        assert all(0.0 <= a <= 1.0 for a in report.accuracies)

    def test_rejects_incremental_setting(self, tiny_dataset, quick_cfg):
        with pytest.raises(ValueError):
            run_setting(Setting.INCR_A, tiny_dataset, "S01", V, 800, quick_cfg)


class TestIncremental:
    def test_scenario_a_points(self, tiny_dataset, quick_cfg):
        report = run_incremental_a(tiny_dataset, "S01", V, 2, 800, quick_cfg)
        (tuned,) = report.curves_of("finetuned")
        (baseline,) = report.curves_of("baseline")
        assert tuned.batches == [1, 2, 3, 4, 5] and len(tuned.accuracies) == 5
        assert tuned.session == 2
        # batch 1 is evaluated zero-shot by both curves
        assert tuned.accuracies[0] == baseline.accuracies[0]

    def test_scenario_b_appends_scratch(self, tiny_dataset, quick_cfg):
        report = run_incremental_a(tiny_dataset, "S01", V, 3, 800, quick_cfg)
        run_incremental_b(tiny_dataset, "S01", V, 3, 800, quick_cfg, report=report)
        (scratch,) = report.curves_of("scratch")
        assert scratch.batches == [2, 3, 4, 5]
        assert set(report.to_dict()["mean_curves"]) == {"finetuned", "baseline", "scratch"}

    def test_unknown_session(self, tiny_dataset, quick_cfg):
        with pytest.raises(IncompleteManifest):
            run_incremental_b(tiny_dataset, "S01", V, 9, 800, quick_cfg)


class TestAblation:
    def test_rows_per_size(self, tiny_dataset, quick_cfg):
        report = window_ablation(tiny_dataset, "S01", V, [400, 800], quick_cfg)
        assert [r.window_ms for r in report.rows] == [400, 800]
        for row in report.rows:
            assert len(row.fold_itr) == 3
            assert row.below_chance_folds == sum(v is None for v in row.fold_itr)
        assert "accuracy_non_decreasing" in report.to_dict()


def test_summarize_subjects():
    summary = summarize_subjects({"S01": 0.8, "S02": 0.6})
    assert summary["mean"] == pytest.approx(0.7)
    assert summary["std"] == pytest.approx(0.1)


@pytest.mark.slow
class TestEndToEndLearning:
    @pytest.fixture(scope="class")
    def clean(self, tmp_path_factory):
        spec = SynthSpec(n_subjects=2, conditions=[V])
        return synth_dataset(spec, seed=7, out_dir=tmp_path_factory.mktemp("clean"))

    @pytest.fixture(scope="class")
    def shifted(self, tmp_path_factory):
        spec = SynthSpec(n_subjects=2, session_shift_strength=1.0, conditions=[V])
        return synth_dataset(spec, seed=7, out_dir=tmp_path_factory.mktemp("e2e"))

    def test_global_accuracy(self, clean):
        source = WindowSource(clean)
        means = {
            subject: run_setting(Setting.GLOBAL, clean, subject, V, 1400, RunConfig(),
                                 source).mean
            for subject in clean.subject_ids()
        }
        assert sorted(means) == ["S01", "S02"]
        assert summarize_subjects(means)["mean"] >= 0.95

    @pytest.mark.parametrize("subject", ["S01", "S02"])
    def test_session_shift_and_recovery(self, shifted, subject):
        cfg = RunConfig()
        source = WindowSource(shifted)
        glob = run_setting(Setting.GLOBAL, shifted, subject, V, 1400, cfg, source)
        inter = run_setting(Setting.INTERSESSION, shifted, subject, V, 1400, cfg, source)
        assert glob.mean - inter.mean >= 0.03
        incr = run_incremental_a(shifted, subject, V, None, 1400, cfg, source)
        batches = range(2, 6)
        gain = incr.mean_accuracy("finetuned", batches) - incr.mean_accuracy("baseline", batches)
        assert gain >= 0.05

    def test_scratch_below_finetuned(self, shifted):
        cfg = RunConfig()
        source = WindowSource(shifted)
        report = run_incremental_a(shifted, "S01", V, 2, 1400, cfg, source)
        run_incremental_b(shifted, "S01", V, 2, 1400, cfg, source, report=report)
        tuned = report.mean_curve("finetuned")
        scratch = report.mean_curve("scratch")
        batches = sorted(scratch)
        assert batches == [2, 3, 4, 5]
        assert np.mean([scratch[b] for b in batches]) <= np.mean([tuned[b] for b in batches])
        assert scratch[5] <= tuned[5]
