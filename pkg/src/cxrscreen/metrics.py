"""Confusion-matrix screening metrics with exact rational arithmetic.

Counts are integers and every derived rate is a ``fractions.Fraction``, so
quantities like 191/200 never pick up floating-point error before rendering.
Display rounding is half-up to one decimal (see ``formatting``): 96.25%
renders as "96.3". A rate whose denominator is zero is undefined and renders
as "n/a".

Thresholding convention: a probability >= threshold predicts positive.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .formatting import fraction_percent_tenths, tenths_string


@dataclass(frozen=True)
class ConfusionMatrix:
    true_negative: int
    false_positive: int
    false_negative: int
    true_positive: int

    def __post_init__(self) -> None:
        for name in ("true_negative", "false_positive", "false_negative", "true_positive"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.true_negative + self.false_positive + self.false_negative + self.true_positive

    @property
    def actual_positives(self) -> int:
        return self.true_positive + self.false_negative

    @property
    def predicted_positives(self) -> int:
        return self.true_positive + self.false_positive


def confusion(
    probabilities: Sequence[float] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    threshold: float = 0.5,
) -> ConfusionMatrix:
    probs = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if probs.shape != y.shape:
        raise ValueError(f"length mismatch: {probs.shape} probabilities vs {y.shape} labels")
    if probs.ndim != 1:
        raise ValueError(f"expected 1-D inputs, got shape {probs.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    predicted = probs >= threshold
    actual = y == 1
    return ConfusionMatrix(
        true_negative=int(np.sum(~predicted & ~actual)),
        false_positive=int(np.sum(predicted & ~actual)),
        false_negative=int(np.sum(~predicted & actual)),
        true_positive=int(np.sum(predicted & actual)),
    )


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: Fraction | None
    ppv: Fraction | None
    accuracy: Fraction | None
    matrix: ConfusionMatrix | None = None
    threshold: float = 0.5

    @classmethod
    def from_values(
        cls,
        sensitivity: float | str | Fraction | None,
        ppv: float | str | Fraction | None,
        accuracy: float | str | Fraction | None = None,
    ) -> "MetricsReport":
        """Build a report from bare rates (for gating externally reported numbers).

        Floats are interpreted by their decimal rendering, so 0.95 means
        exactly 19/20.
        """
        return cls(
            sensitivity=as_exact_fraction(sensitivity),
            ppv=as_exact_fraction(ppv),
            accuracy=as_exact_fraction(accuracy),
            matrix=None,
        )


def as_exact_fraction(value: float | str | Fraction | None) -> Fraction | None:
    if value is None:
        return None
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


def metrics_from_confusion(matrix: ConfusionMatrix, threshold: float = 0.5) -> MetricsReport:
    """sensitivity = tp/(tp+fn), ppv = tp/(tp+fp), accuracy = (tp+tn)/total."""

    def rate(num: int, den: int) -> Fraction | None:
        return Fraction(num, den) if den > 0 else None

    return MetricsReport(
        sensitivity=rate(matrix.true_positive, matrix.actual_positives),
        ppv=rate(matrix.true_positive, matrix.predicted_positives),
        accuracy=rate(matrix.true_positive + matrix.true_negative, matrix.total),
        matrix=matrix,
        threshold=threshold,
    )


def _render_rate(value: Fraction | None) -> str:
    if value is None:
        return "n/a"
    return tenths_string(fraction_percent_tenths(value))


def render_headline(report: MetricsReport) -> str:
    """One-decimal "sensitivity / ppv / accuracy" line, e.g. "95.5 / 97.0 / 96.3"."""
    return " / ".join(
        _render_rate(v) for v in (report.sensitivity, report.ppv, report.accuracy)
    )


def render_report(report: MetricsReport, style: str = "table") -> str:
    if style == "json":
        return render_report_json(report)
    if style != "table":
        raise ValueError(f"unknown report style {style!r}")
    lines = [
        "metric       value",
        f"sensitivity  {_render_rate(report.sensitivity)}",
        f"ppv          {_render_rate(report.ppv)}",
        f"accuracy     {_render_rate(report.accuracy)}",
        f"headline     {render_headline(report)}",
    ]
    if report.matrix is not None:
        m = report.matrix
        lines.append(f"threshold    {report.threshold}")
        lines.append(
            f"matrix       tn={m.true_negative} fp={m.false_positive} "
            f"fn={m.false_negative} tp={m.true_positive}"
        )
    return "\n".join(lines)


def _rate_payload(value: Fraction | None) -> dict | None:
    if value is None:
        return None
    return {
        "numerator": value.numerator,
        "denominator": value.denominator,
        "value": float(value),
        "percent_display": _render_rate(value),
    }


def render_report_json(report: MetricsReport) -> str:
    payload = {
        "sensitivity": _rate_payload(report.sensitivity),
        "ppv": _rate_payload(report.ppv),
        "accuracy": _rate_payload(report.accuracy),
        "threshold": report.threshold,
        "headline": render_headline(report),
        "matrix": None,
    }
    if report.matrix is not None:
        m = report.matrix
        payload["matrix"] = {
            "true_negative": m.true_negative,
            "false_positive": m.false_positive,
            "false_negative": m.false_negative,
            "true_positive": m.true_positive,
        }
    return json.dumps(payload, indent=2)


def parse_report_json(text: str) -> MetricsReport:
    """Inverse of render_report_json; rational values round-trip exactly."""
    raw = json.loads(text)

    def rate(entry: dict | None) -> Fraction | None:
        if entry is None:
            return None
        return Fraction(int(entry["numerator"]), int(entry["denominator"]))

    matrix = None
    if raw.get("matrix") is not None:
        m = raw["matrix"]
        matrix = ConfusionMatrix(
            true_negative=int(m["true_negative"]),
            false_positive=int(m["false_positive"]),
            false_negative=int(m["false_negative"]),
            true_positive=int(m["true_positive"]),
        )
    return MetricsReport(
        sensitivity=rate(raw.get("sensitivity")),
        ppv=rate(raw.get("ppv")),
        accuracy=rate(raw.get("accuracy")),
        matrix=matrix,
        threshold=float(raw.get("threshold", 0.5)),
    )


# ---------------------------------------------------------------------------
# Prediction logs: image_id,label,probability CSV

PREDICTIONS_HEADER = ("image_id", "label", "probability")


def write_predictions(
    path: Path | str, rows: Iterable[tuple[str, int, float]]
) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for image_id, label, probability in rows:
            writer.writerow([image_id, int(label), repr(float(probability))])


def read_predictions(path: Path | str) -> list[tuple[str, int, float]]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            image_id, label_s, prob_s = row
            label = int(label_s)
            if label not in (0, 1):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {label_s!r}")
            prob = float(prob_s)
            if not np.isfinite(prob):
                raise ValueError(f"{path}:{lineno}: non-finite probability {prob_s!r}")
            rows.append((image_id, label, prob))
    return rows
