import csv
import json

import numpy as np
import pytest

from core.errors import ConfigError, CountMismatchError, MissingFieldError, ValidationError
from core.utils import write_jsonl
from services.evaluation import (cdf, confusion_matrix, doa_errors, evaluation_service, meem, normalize_text,
                                 wer, word_error_counts)
from services.synthesis import ClipRecord, SourceSpec


def _truth(clip_id, doas, transcripts=None):
    transcripts = transcripts or ["" for _ in doas]
    return ClipRecord(clip_id, f"clips/{clip_id}.wav", 8.0, len(doas), list(doas),
                      [SourceSpec(f"s{i}", t, d) for i, (d, t) in enumerate(zip(doas, transcripts))])


def test_circular_and_linear_errors():
    np.testing.assert_allclose(doa_errors([359], [1]), [2])
    np.testing.assert_allclose(doa_errors([359], [1], mode="linear"), [358])
    np.testing.assert_allclose(doa_errors([90, 10], [20, 100]), [10, 10])


def test_optimal_matching_beats_sorted_pairing():
    np.testing.assert_allclose(doa_errors([10, 100], [20, 350]), [10, 110])
    np.testing.assert_allclose(doa_errors([10, 100], [20, 350], matching="optimal"), [80, 20])


def test_doa_error_arguments():
    with pytest.raises(CountMismatchError):
        doa_errors([10, 20], [10])
    with pytest.raises(ConfigError):
        doa_errors([10], [10], mode="euclid")
    with pytest.raises(ConfigError):
        doa_errors([10], [10], matching="greedy")


def test_meem_scales_by_microphones():
    assert meem(90.03, 4) == pytest.approx(360.12)
    assert meem(25.72, 1) == pytest.approx(25.72)
    with pytest.raises(ConfigError):
        meem(1.0, 0)


def test_normalize_text():
    assert normalize_text("Hello, World!  It's 'quoted'.") == ["hello", "world", "it's", "quoted"]


def test_word_error_rate():
    ref, hyp = "the cat sat on the mat", "The cat sit on mat."
    assert word_error_counts(ref, hyp) == {"substitutions": 1, "deletions": 1, "insertions": 0, "ref_words": 6}
    assert wer(ref, hyp) == pytest.approx(100 * 2 / 6)
    assert wer("a", "a b c") == pytest.approx(200.0)
    assert wer("", "") == 0.0
    with pytest.raises(ValidationError):
        wer("", "words")


def test_confusion_matrix_rows_normalize():
    matrix, unsupported = confusion_matrix([1, 2, 2], [1, 2, 1])
    np.testing.assert_allclose(matrix[0], [0.5, 0.5, 0, 0, 0])
    np.testing.assert_allclose(matrix[1], [0, 1, 0, 0, 0])
    assert np.all(matrix[2:] == 0)
    assert unsupported == [3, 4, 5]
    with pytest.raises(ValidationError):
        confusion_matrix([6], [1])
    with pytest.raises(CountMismatchError):
        confusion_matrix([1, 2], [1])


def test_cdf_points():
    points, mean, median = cdf([3.0, 1.0, 2.0])
    assert points == [(1.0, pytest.approx(1 / 3)), (2.0, pytest.approx(2 / 3)), (3.0, 1.0)]
    assert mean == 2.0 and median == 2.0
    with pytest.raises(ValidationError):
        cdf([])


def test_evaluate_report():
    truth = [_truth("a", [90], ["turn left"]), _truth("b", [30, 200], ["", ""]),
             _truth("c", [120]), _truth("d", [10])]
    predictions = [
        {"clip_id": "a", "doas_deg": [100], "transcript": "turn right"},
        {"clip_id": "b", "doas_deg": [20, 210], "n_speakers": 2},
        {"clip_id": "c", "doas_deg": [100, 140]},
    ]
    report = evaluation_service.evaluate(predictions, truth, n_mics=4)
    assert report.n_clips == 2
    assert report.mae_deg == pytest.approx(10.0)
    assert report.mse_deg2 == pytest.approx(100.0)
    assert report.meem == pytest.approx(40.0)
    assert report.missing_predictions == ["d"]
    assert report.count_errors == [{"clip_id": "c", "predicted": 2, "truth": 1}]
    assert report.count_accuracy == pytest.approx(2 / 3)
    assert set(report.per_count) == {"1", "2", "all"}
    assert report.per_count["2"]["n_errors"] == 2
    assert report.wer == pytest.approx(50.0)
    assert report.confusion[0] == [0.5, 0.5, 0.0, 0.0, 0.0]


def test_evaluate_reports_out_of_range_counts():
    truth = [_truth("a", [90]), _truth("b", [45])]
    predictions = [{"clip_id": "a", "doas_deg": [80]},
                   {"clip_id": "b", "doas_deg": [45], "n_speakers": 7}]
    report = evaluation_service.evaluate(predictions, truth)
    assert report.n_clips == 1
    assert report.count_errors == [{"clip_id": "b", "predicted": 7, "truth": 1}]
    assert report.count_accuracy == 1.0
    assert sum(report.confusion[0]) == pytest.approx(1.0)


def test_evaluate_needs_fields_and_scorable_clips():
    truth = [_truth("a", [90])]
    with pytest.raises(MissingFieldError):
        evaluation_service.evaluate([{"clip_id": "a"}], truth)
    with pytest.raises(ValidationError):
        evaluation_service.evaluate([{"clip_id": "zzz", "doas_deg": [90]}], truth)
    with pytest.raises(ConfigError):
        evaluation_service.evaluate([{"clip_id": "a", "doas_deg": [90]}], truth, meem_basis="rmse")


def test_evaluate_files_and_outputs(tmp_path):
    truth = [_truth("a", [90]), _truth("b", [300])]
    write_jsonl(tmp_path / "manifest.jsonl", [r.to_dict() for r in truth])
    write_jsonl(tmp_path / "pred.jsonl", [{"clip_id": "a", "doas_deg": [95]}, {"clip_id": "b", "doas_deg": [280]}])
    report = evaluation_service.evaluate_files(tmp_path / "pred.jsonl", tmp_path / "manifest.jsonl",
                                               meem_basis="mse")
    assert report.meem == pytest.approx((25 + 400) / 2)

    out = evaluation_service.write_report(report, tmp_path / "out" / "report.json")
    assert json.loads(out.read_text())["mae_deg"] == pytest.approx(12.5)
    csv_path = evaluation_service.write_cdf_csv(report.cdf_points, tmp_path / "cdf.csv")
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [["error_deg", "cum_fraction"], ["5.000000", "0.500000"], ["20.000000", "1.000000"]]
