from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from cxrscreen.metrics import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    metrics_from_confusion,
    parse_report_json,
    read_predictions,
    render_headline,
    render_report,
    render_report_json,
    write_predictions,
)
from oracles import half_up_percent_string


def test_confusion_from_probabilities():
    probs = [0.1, 0.9, 0.4, 0.6, 0.5]
    labels = [0, 1, 1, 0, 1]
    m = confusion(probs, labels)
    assert (m.true_negative, m.false_positive, m.false_negative, m.true_positive) == (1, 1, 1, 2)


def test_threshold_is_inclusive():
    m = confusion([0.5], [1], threshold=0.5)
    assert m.true_positive == 1 and m.false_negative == 0


def test_confusion_input_validation():
    with pytest.raises(ValueError, match="length mismatch"):
        confusion([0.5, 0.5], [1])
    with pytest.raises(ValueError, match="labels must be 0 or 1"):
        confusion([0.5], [2])
    with pytest.raises(ValueError, match="1-D"):
        confusion(np.zeros((2, 2)), np.zeros((2, 2)))


def test_matrix_rejects_negative_or_float_counts():
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        ConfusionMatrix(1.5, 0, 0, 0)


def test_rates_are_exact_fractions():
    m = ConfusionMatrix(true_negative=194, false_positive=6, false_negative=9, true_positive=191)
    report = metrics_from_confusion(m)
    assert report.sensitivity == Fraction(191, 200)
    assert report.ppv == Fraction(191, 197)
    assert report.accuracy == Fraction(385, 400)


def test_zero_denominators_give_none():
    no_positives = metrics_from_confusion(ConfusionMatrix(5, 0, 0, 0))
    assert no_positives.sensitivity is None
    assert no_positives.ppv is None
    assert no_positives.accuracy == Fraction(1)
    empty = metrics_from_confusion(ConfusionMatrix(0, 0, 0, 0))
    assert empty.accuracy is None
    assert "n/a" in render_report(no_positives)


def test_headline_rounds_half_up_to_one_decimal():
    m = ConfusionMatrix(true_negative=194, false_positive=6, false_negative=9, true_positive=191)
    report = metrics_from_confusion(m)
    # accuracy 385/400 = 96.25% rounds up, never to even
    assert render_headline(report) == "95.5 / 97.0 / 96.3"


def test_headline_matches_decimal_oracle_on_fuzz():
    rng = np.random.default_rng(52)
    for _ in range(200):
        tn, fp, fn, tp = (int(v) for v in rng.integers(0, 60, 4))
        if tp + fn == 0 or tp + fp == 0:
            continue
        report = metrics_from_confusion(ConfusionMatrix(tn, fp, fn, tp))
        want = " / ".join(
            half_up_percent_string(num, den)
            for num, den in (
                (tp, tp + fn),
                (tp, tp + fp),
                (tp + tn, tn + fp + fn + tp),
            )
        )
        assert render_headline(report) == want


def test_from_values_reads_floats_as_decimals():
    report = MetricsReport.from_values(0.95, 0.1)
    assert report.sensitivity == Fraction(19, 20)
    assert report.ppv == Fraction(1, 10)
    assert report.accuracy is None


def test_render_report_table():
    report = metrics_from_confusion(ConfusionMatrix(194, 6, 9, 191), threshold=0.5)
    text = render_report(report)
    assert "sensitivity" in text
    assert "95.5 / 97.0 / 96.3" in text
    assert "tn=194" in text and "tp=191" in text


def test_json_round_trip_is_lossless():
    report = metrics_from_confusion(ConfusionMatrix(194, 6, 9, 191), threshold=0.4)
    back = parse_report_json(render_report_json(report))
    assert back.sensitivity == report.sensitivity
    assert back.ppv == report.ppv
    assert back.accuracy == report.accuracy
    assert back.matrix == report.matrix
    assert back.threshold == report.threshold


def test_json_round_trip_preserves_none_rates():
    report = metrics_from_confusion(ConfusionMatrix(3, 0, 0, 0))
    back = parse_report_json(render_report_json(report))
    assert back.sensitivity is None
    assert back.ppv is None
    assert back.accuracy == Fraction(1)


def test_predictions_round_trip(tmp_path):
    path = tmp_path / "preds.csv"
    rows = [("a", 0, 0.125), ("b", 1, 0.875), ("c", 1, 1e-7)]
    write_predictions(path, rows)
    assert read_predictions(path) == rows


def test_predictions_reject_bad_rows(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("image_id,label,probability\na,2,0.5\n")
    with pytest.raises(ValueError, match="label"):
        read_predictions(path)
    path.write_text("image_id,label,probability\na,1,nan\n")
    with pytest.raises(ValueError):
        read_predictions(path)
    path.write_text("wrong,header,here\na,1,0.5\n")
    with pytest.raises(ValueError, match="header"):
        read_predictions(path)


def test_sample_predictions_fixture_reproduces_headline():
    fixture = Path(__file__).resolve().parent.parent / "fixtures" / "sample_predictions.csv"
    rows = read_predictions(fixture)
    probs = [p for _, _, p in rows]
    labels = [l for _, l, _ in rows]
    m = confusion(probs, labels)
    assert (m.true_negative, m.false_positive, m.false_negative, m.true_positive) == (194, 6, 9, 191)
    assert render_headline(metrics_from_confusion(m)) == "95.5 / 97.0 / 96.3"
