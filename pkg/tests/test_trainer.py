import csv
import sys

import numpy as np
import pytest

from noisefault.data import (
    NOISE_LABEL_INDEX,
    SplitSpec,
    Splits,
    build_splits,
    machine_examples,
    noise_examples,
)
from noisefault.errors import DataError, NonFiniteLossError
from noisefault.net import LrSchedule
from noisefault.techniques import Technique, TechniqueConfig
from noisefault.train import (
    EvalReport,
    HistoryEntry,
    TrainResult,
    TrainRun,
    evaluate,
    train,
    write_history_csv,
)

WIDTHS = (2, 3, 4)


@pytest.fixture(scope="module")
def tiny_splits():
    # per-fault counts (1, 1, 1): 16 machine + 16 noise clips per split.
    spec = SplitSpec.for_machine("car", scale=0.02, duration_s=0.5)
    return build_splits(spec, "N1", "N1", snr_range=(0.0, 0.0), seed=0)


def tiny_run(tiny_splits, kind=Technique.NOISE_EXPOSURE, **kwargs):
    defaults = dict(
        technique=TechniqueConfig(kind),
        splits=tiny_splits,
        epochs=2,
        batch_machine=4,
        batch_noise=4,
        seed=0,
        widths=WIDTHS,
    )
    defaults.update(kwargs)
    return TrainRun(**defaults)


@pytest.fixture(scope="module")
def ne_result(tiny_splits):
    return train(tiny_run(tiny_splits, epochs=3))


class TestTrainBookkeeping:
    def test_history_covers_epochs(self, ne_result):
        assert len(ne_result.history) == 3
        assert [h.epoch for h in ne_result.history] == [1, 2, 3]
        for entry in ne_result.history:
            assert np.isfinite(entry.train_loss)
            assert 0.0 <= entry.val_macro_f1 <= 1.0

    def test_best_epoch_is_first_max(self, ne_result):
        scores = [h.val_macro_f1 for h in ne_result.history]
        assert ne_result.best_val_f1 == max(scores)
        assert ne_result.best_epoch == scores.index(max(scores)) + 1

    def test_threshold_travels_with_best_epoch(self, ne_result):
        best_entry = ne_result.history[ne_result.best_epoch - 1]
        assert ne_result.threshold == best_entry.threshold
        assert ne_result.technique.threshold == ne_result.threshold
        assert ne_result.threshold is not None

    def test_deterministic(self, tiny_splits, ne_result):
        again = train(tiny_run(tiny_splits, epochs=3))
        assert again.history == ne_result.history
        assert again.best_epoch == ne_result.best_epoch
        for key, value in ne_result.network.params().items():
            assert np.array_equal(again.network.params()[key], value), key

    def test_seed_changes_run(self, tiny_splits, ne_result):
        other = train(tiny_run(tiny_splits, epochs=3, seed=1))
        assert other.history[0].train_loss != ne_result.history[0].train_loss

    def test_returned_network_is_best_snapshot(self, tiny_splits):
        # With a fresh 1-epoch run, the returned parameters must reproduce
        # the recorded validation score exactly.
        result = train(tiny_run(tiny_splits, epochs=1))
        from noisefault.features import DESK_SCALE_CONFIG
        from noisefault.train import _validate, features_for_clips

        val = tiny_splits.validation
        feats = features_for_clips([e.clip for e in val], DESK_SCALE_CONFIG)
        labels = np.array([e.label_index for e in val])
        threshold, f1 = _validate(result.network, TechniqueConfig(Technique.NOISE_EXPOSURE),
                                  feats, labels)
        assert f1 == result.best_val_f1
        assert threshold == result.threshold


class TestBatchComposition:
    def test_score_techniques_fold_noise_budget_into_machine_batch(self, tiny_splits):
        # 16 machine clips: a 12+8 request only fits if the technique uses
        # exposure batches; sm folds both into one 20-clip machine batch.
        with pytest.raises(DataError):
            train(tiny_run(tiny_splits, kind=Technique.SOFTMAX_SCORE,
                           batch_machine=12, batch_noise=8, epochs=1))
        result = train(tiny_run(tiny_splits, kind=Technique.NOISE_EXPOSURE,
                                batch_machine=12, batch_noise=8, epochs=1))
        assert len(result.history) == 1

    def test_exposure_technique_requires_noise_clips(self, tiny_splits):
        machine_only = Splits(
            train=tuple(machine_examples(tiny_splits.train)),
            validation=tiny_splits.validation,
            test=tiny_splits.test,
        )
        with pytest.raises(DataError):
            train(tiny_run(machine_only))
        # sm ignores the missing noise family entirely.
        result = train(tiny_run(machine_only, kind=Technique.SOFTMAX_SCORE, epochs=1))
        assert len(result.history) == 1

    def test_empty_validation_rejected(self, tiny_splits):
        broken = Splits(train=tiny_splits.train, validation=(), test=tiny_splits.test)
        with pytest.raises(DataError):
            train(tiny_run(broken))


class TestTechniqueVariants:
    def test_additional_class_has_no_threshold(self, tiny_splits):
        result = train(tiny_run(tiny_splits, kind=Technique.ADDITIONAL_CLASS))
        assert result.threshold is None
        assert result.technique.threshold is None
        assert all(h.threshold is None for h in result.history)
        assert result.network.arch.n_classes == 14

    def test_score_techniques_emit_13_outputs(self, ne_result):
        assert ne_result.network.arch.n_classes == 13

    def test_eb_trains(self, tiny_splits):
        result = train(tiny_run(tiny_splits, kind=Technique.ENERGY_BOUNDED))
        assert result.threshold is not None
        assert np.isfinite(result.history[-1].train_loss)


class TestTrainingProgress:
    def test_loss_decreases(self):
        spec = SplitSpec.for_machine("car", scale=0.05, duration_s=1.0)
        splits = build_splits(spec, "N1", "N1", snr_range=(0.0, 0.0), seed=0)
        result = train(
            TrainRun(
                technique=TechniqueConfig(Technique.NOISE_EXPOSURE),
                splits=splits,
                epochs=12,
                batch_machine=8,
                batch_noise=8,
                seed=0,
                schedule=LrSchedule(base_lr=1e-3, final_lr=1e-4),
                widths=WIDTHS,
            )
        )
        assert result.history[-1].train_loss < result.history[0].train_loss

    def test_non_finite_loss_reported(self, tiny_splits, monkeypatch):
        def explode(cfg, m_logits, m_targets, n_logits=None):
            return float("nan"), np.zeros_like(m_logits), None

        train_module = sys.modules["noisefault.train"]
        monkeypatch.setattr(train_module, "technique_loss_and_grads", explode)
        with pytest.raises(NonFiniteLossError, match="epoch 1"):
            train(tiny_run(tiny_splits, epochs=1))


class TestEvaluate:
    def test_report_structure(self, tiny_splits, ne_result):
        report = evaluate(ne_result.network, ne_result.technique, tiny_splits.test)
        assert isinstance(report, EvalReport)
        assert report.confusion.shape == (14, 14)
        assert report.n_examples == len(tiny_splits.test)
        assert report.confusion.sum() == report.n_examples
        # Row sums count the true labels.
        noise_row = report.confusion[NOISE_LABEL_INDEX].sum()
        assert noise_row == len(noise_examples(tiny_splits.test))
        assert report.macro_f1 == pytest.approx(report.class_f1.mean())
        assert report.noise_f1 == report.class_f1[NOISE_LABEL_INDEX]
        assert report.threshold == ne_result.threshold

    def test_order_invariance(self, tiny_splits, ne_result):
        base = evaluate(ne_result.network, ne_result.technique, tiny_splits.test)
        rng = np.random.default_rng(1)
        shuffled = list(tiny_splits.test)
        rng.shuffle(shuffled)
        again = evaluate(ne_result.network, ne_result.technique, shuffled)
        assert again.macro_f1 == base.macro_f1
        assert np.array_equal(again.confusion, base.confusion)

    def test_macro_f1_recomputed_from_confusion(self, tiny_splits, ne_result):
        report = evaluate(ne_result.network, ne_result.technique, tiny_splits.test)
        confusion = report.confusion
        f1 = np.zeros(14)
        for c in range(14):
            denom = confusion[c].sum() + confusion[:, c].sum()
            if denom:
                f1[c] = 2.0 * confusion[c, c] / denom
        assert report.macro_f1 == pytest.approx(f1.mean(), abs=1e-12)

    def test_threshold_required_for_score_techniques(self, tiny_splits, ne_result):
        bare = TechniqueConfig(Technique.NOISE_EXPOSURE)
        with pytest.raises(DataError):
            evaluate(ne_result.network, bare, tiny_splits.test)

    def test_empty_split_rejected(self, ne_result):
        with pytest.raises(DataError):
            evaluate(ne_result.network, ne_result.technique, [])

    def test_additional_class_evaluates_without_threshold(self, tiny_splits):
        result = train(tiny_run(tiny_splits, kind=Technique.ADDITIONAL_CLASS))
        report = evaluate(result.network, result.technique, tiny_splits.test)
        assert report.threshold is None
        assert report.confusion.shape == (14, 14)


class TestHistoryCsv:
    def test_format_and_roundtrip(self, tmp_path, ne_result):
        path = tmp_path / "history.csv"
        write_history_csv(ne_result.history, path)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == ["epoch", "loss", "val_f1", "eta"]
        assert len(rows) == len(ne_result.history)
        for row, entry in zip(rows, ne_result.history):
            assert int(row["epoch"]) == entry.epoch
            assert float(row["loss"]) == entry.train_loss  # repr round-trips
            assert float(row["val_f1"]) == entry.val_macro_f1
            assert float(row["eta"]) == entry.threshold

    def test_blank_eta_for_additional_class(self, tmp_path):
        history = (HistoryEntry(1, 2.5, 0.5, None),)
        path = tmp_path / "history.csv"
        write_history_csv(history, path)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert rows[0]["eta"] == ""
