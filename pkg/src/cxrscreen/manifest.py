"""Benchmark dataset assembly: ingestion, unification, patient-level splits.

The unit of exchange is a manifest CSV with the fixed header

    image_id,patient_id,source,label,finding,view,age,sex,country,file_path

(UTF-8, empty field = unknown). Split assignments are persisted in a
``<stem>.splits.csv`` sidecar and summary statistics in a ``<stem>.summary.txt``
key=value sidecar, so the manifest itself stays diff-able and tool-agnostic.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .formatting import count_pct_cell

logger = logging.getLogger(__name__)

MANIFEST_HEADER = (
    "image_id",
    "patient_id",
    "source",
    "label",
    "finding",
    "view",
    "age",
    "sex",
    "country",
    "file_path",
)

AGE_BIN_NAMES = (
    "<20",
    "20-29",
    "30-39",
    "40-49",
    "50-59",
    "60-69",
    "70-79",
    "80-89",
    "90+",
    "Unknown",
)


class SchemaError(ValueError):
    """A source file does not satisfy its declared column schema."""


class IntegrityError(ValueError):
    """Records contradict each other (e.g. one image id, two labels)."""


class SplitError(ValueError):
    """Requested split targets cannot be met by the available patients."""


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Finding(str, Enum):
    NONE = "none"
    PNEUMONIA_NON_SARS2 = "pneumonia_non_sars2"
    SARS2 = "sars2"

    @property
    def label(self) -> Label:
        return Label.POSITIVE if self is Finding.SARS2 else Label.NEGATIVE


class View(str, Enum):
    PA = "PA"
    AP = "AP"
    UNKNOWN = "unknown"


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"


class SplitName(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class ImageRecord:
    """One chest X-ray image plus the metadata the pipeline relies on.

    ``label`` is always derived from ``finding``: sars2 is positive,
    everything else negative.
    """

    image_id: str
    patient_id: str
    source: str
    finding: Finding
    view: View = View.UNKNOWN
    age: int | None = None
    sex: Sex = Sex.UNKNOWN
    country: str | None = None
    file_path: str = ""

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if not self.source:
            raise ValueError("source must be non-empty")
        if self.age is not None and self.age < 0:
            raise ValueError(f"age must be non-negative, got {self.age}")

    @property
    def label(self) -> Label:
        return self.finding.label


@dataclass(frozen=True)
class RowRejection:
    source: str
    row_number: int
    reason: str


@dataclass(frozen=True)
class IngestResult:
    """Outcome of ingesting one source file: no row is silently dropped."""

    source: str
    records: tuple[ImageRecord, ...]
    rejections: tuple[RowRejection, ...]


DEFAULT_FINDING_VALUES: dict[str, Finding] = {
    "sars2": Finding.SARS2,
    "sars-cov-2": Finding.SARS2,
    "covid-19": Finding.SARS2,
    "covid19": Finding.SARS2,
    "covid": Finding.SARS2,
    "pneumonia_non_sars2": Finding.PNEUMONIA_NON_SARS2,
    "pneumonia": Finding.PNEUMONIA_NON_SARS2,
    "none": Finding.NONE,
    "normal": Finding.NONE,
    "no finding": Finding.NONE,
    "no_finding": Finding.NONE,
}

DEFAULT_VIEW_VALUES: dict[str, View] = {
    "pa": View.PA,
    "ap": View.AP,
    "": View.UNKNOWN,
    "unknown": View.UNKNOWN,
}

DEFAULT_SEX_VALUES: dict[str, Sex] = {
    "m": Sex.MALE,
    "male": Sex.MALE,
    "f": Sex.FEMALE,
    "female": Sex.FEMALE,
    "": Sex.UNKNOWN,
    "unknown": Sex.UNKNOWN,
}


@dataclass(frozen=True)
class SourceSchema:
    """Column mapping for one source cohort file.

    ``columns`` maps canonical field names to the source's column names;
    image_id, patient_id, finding and file_path are required, the rest are
    optional. Value vocabularies translate source spellings (matched
    case-insensitively) into the canonical enums.
    """

    columns: Mapping[str, str] = field(
        default_factory=lambda: {name: name for name in MANIFEST_HEADER if name not in ("source", "label")}
    )
    finding_values: Mapping[str, Finding] = field(default_factory=lambda: dict(DEFAULT_FINDING_VALUES))
    view_values: Mapping[str, View] = field(default_factory=lambda: dict(DEFAULT_VIEW_VALUES))
    sex_values: Mapping[str, Sex] = field(default_factory=lambda: dict(DEFAULT_SEX_VALUES))
    delimiter: str = ","

    REQUIRED = ("image_id", "patient_id", "finding", "file_path")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SourceSchema":
        """Build a schema from a parsed JSON/YAML mapping (all keys optional)."""
        kwargs: dict = {}
        if "columns" in raw:
            columns = {name: name for name in MANIFEST_HEADER if name not in ("source", "label")}
            columns.update(raw["columns"])
            kwargs["columns"] = columns
        if "finding_values" in raw:
            vocab = dict(DEFAULT_FINDING_VALUES)
            vocab.update({k.lower(): Finding(v) for k, v in raw["finding_values"].items()})
            kwargs["finding_values"] = vocab
        if "delimiter" in raw:
            kwargs["delimiter"] = raw["delimiter"]
        return cls(**kwargs)


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable collection of image records plus optional split assignment."""

    records: tuple[ImageRecord, ...]
    split_assignment: Mapping[str, SplitName] = field(default_factory=dict)
    provenance: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted(k for k, n in Counter(ids).items() if n > 1)
            raise IntegrityError(f"duplicate image_ids in manifest: {dupes[:5]}")
        unknown = set(self.split_assignment) - set(ids)
        if unknown:
            raise IntegrityError(f"split assignment references unknown image_ids: {sorted(unknown)[:5]}")
        by_patient: dict[str, set[SplitName]] = {}
        for rec in self.records:
            if rec.image_id in self.split_assignment:
                by_patient.setdefault(rec.patient_id, set()).add(self.split_assignment[rec.image_id])
        crossed = sorted(p for p, splits in by_patient.items() if len(splits) > 1)
        if crossed:
            raise IntegrityError(f"patients assigned to multiple splits: {crossed[:5]}")

    def __len__(self) -> int:
        return len(self.records)

    def records_for_split(self, split: SplitName) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if self.split_assignment.get(r.image_id) is split)

    def patient_ids(self, split: SplitName | None = None) -> set[str]:
        if split is None:
            return {r.patient_id for r in self.records}
        return {r.patient_id for r in self.records_for_split(split)}

    def with_split_assignment(self, assignment: Mapping[str, SplitName]) -> "DatasetManifest":
        return replace(self, split_assignment=dict(assignment))


def ingest_source(manifest_file: Path | str, source_id: str, schema: SourceSchema | None = None) -> IngestResult:
    """Read one delimiter-separated source file into validated records.

    Every input row ends up either in ``records`` or in ``rejections`` with a
    reason; duplicated image_ids within the file are rejected so the result is
    internally deduplicated.
    """
    schema = schema or SourceSchema()
    path = Path(manifest_file)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        header = reader.fieldnames or []
        missing = [schema.columns[f] for f in SourceSchema.REQUIRED if schema.columns[f] not in header]
        if missing:
            raise SchemaError(f"{path}: missing required columns {missing}")

        records: list[ImageRecord] = []
        rejections: list[RowRejection] = []
        seen: set[str] = set()
        for row_number, row in enumerate(reader, start=2):  # row 1 is the header
            try:
                record = _record_from_row(row, source_id, schema)
            except ValueError as exc:
                rejections.append(RowRejection(source_id, row_number, str(exc)))
                continue
            if record.image_id in seen:
                rejections.append(RowRejection(source_id, row_number, f"duplicate image_id {record.image_id!r}"))
                continue
            seen.add(record.image_id)
            records.append(record)

    for rejection in rejections:
        logger.warning("%s row %d rejected: %s", rejection.source, rejection.row_number, rejection.reason)
    return IngestResult(source_id, tuple(records), tuple(rejections))


def _record_from_row(row: Mapping[str, str], source_id: str, schema: SourceSchema) -> ImageRecord:
    def cell(name: str) -> str:
        column = schema.columns.get(name)
        if column is None:
            return ""
        return (row.get(column) or "").strip()

    image_id = cell("image_id")
    if not image_id:
        raise ValueError("missing image_id")
    patient_id = cell("patient_id")
    if not patient_id:
        raise ValueError("missing patient_id")

    raw_finding = cell("finding")
    finding = schema.finding_values.get(raw_finding.lower())
    if finding is None:
        raise ValueError(f"unparseable finding {raw_finding!r}")

    raw_view = cell("view")
    view = schema.view_values.get(raw_view.lower())
    if view is None:
        view = View.UNKNOWN

    raw_sex = cell("sex")
    sex = schema.sex_values.get(raw_sex.lower())
    if sex is None:
        sex = Sex.UNKNOWN

    raw_age = cell("age")
    age: int | None = None
    if raw_age:
        try:
            age = int(raw_age)
        except ValueError:
            raise ValueError(f"unparseable age {raw_age!r}") from None
        if age < 0:
            raise ValueError(f"negative age {age}")

    file_path = cell("file_path")
    if not file_path:
        raise ValueError("missing file_path")

    return ImageRecord(
        image_id=image_id,
        patient_id=patient_id,
        source=source_id,
        finding=finding,
        view=view,
        age=age,
        sex=sex,
        country=cell("country") or None,
        file_path=file_path,
    )


def unify(sources: Iterable[Sequence[ImageRecord]]) -> DatasetManifest:
    """Merge per-source record lists into one manifest.

    Cross-source duplicate image_ids resolve first-source-wins with a logged
    conflict; the same image_id carrying two different labels is a hard
    integrity error.
    """
    merged: dict[str, ImageRecord] = {}
    provenance: Counter[str] = Counter()
    for records in sources:
        for record in records:
            existing = merged.get(record.image_id)
            if existing is None:
                merged[record.image_id] = record
                provenance[record.source] += 1
                continue
            if existing.label is not record.label:
                raise IntegrityError(
                    f"image_id {record.image_id!r} has conflicting labels: "
                    f"{existing.label.value} ({existing.source}) vs {record.label.value} ({record.source})"
                )
            logger.warning(
                "duplicate image_id %r: keeping %s record, dropping %s record",
                record.image_id,
                existing.source,
                record.source,
            )
    return DatasetManifest(records=tuple(merged.values()), provenance=dict(provenance))


@dataclass(frozen=True)
class TestSplitSpec:
    """Per-class image targets for the held-out test set.

    ``negative_finding_split`` optionally divides the negative target between
    the two negative findings (e.g. {none: 100, pneumonia_non_sars2: 100}).
    """

    __test__ = False  # name looks collectible to pytest; it is not a test

    positive_images: int
    negative_images: int
    negative_finding_split: Mapping[Finding, int] | None = None

    def __post_init__(self) -> None:
        if self.positive_images < 0 or self.negative_images < 0:
            raise ValueError("test image targets must be non-negative")
        if self.negative_finding_split is not None:
            if set(self.negative_finding_split) - {Finding.NONE, Finding.PNEUMONIA_NON_SARS2}:
                raise ValueError("negative_finding_split keys must be negative findings")
            if sum(self.negative_finding_split.values()) != self.negative_images:
                raise ValueError("negative_finding_split must sum to negative_images")


def split_patient_level(
    manifest: DatasetManifest,
    test_spec: TestSplitSpec,
    val_fraction: float = 0.10,
    seed: int = 0,
) -> DatasetManifest:
    """Assign every record to train/val/test with zero patient overlap.

    Test patients are drawn seed-deterministically so the per-class image
    targets are met exactly whenever some set of single-class patients can
    meet them; otherwise a SplitError names the deficient class. The
    validation split takes floor(val_fraction * remaining patients) whole
    patients out of the training pool.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")

    rng = np.random.default_rng(seed)
    by_patient: dict[str, list[ImageRecord]] = {}
    for record in manifest.records:
        by_patient.setdefault(record.patient_id, []).append(record)

    # Patients whose records span several classes/findings cannot contribute
    # to an exact per-class target, so they stay in the training pool.
    def bucket_of(records: list[ImageRecord]) -> Finding | None:
        findings = {r.finding for r in records}
        return next(iter(findings)) if len(findings) == 1 else None

    buckets: dict[Finding, list[tuple[str, int]]] = {f: [] for f in Finding}
    mixed: list[str] = []
    for patient_id in sorted(by_patient):
        finding = bucket_of(by_patient[patient_id])
        if finding is None:
            mixed.append(patient_id)
        else:
            buckets[finding].append((patient_id, len(by_patient[patient_id])))
    if mixed:
        logger.warning("%d patients with mixed findings excluded from test selection", len(mixed))

    if test_spec.negative_finding_split is not None:
        targets = [(Finding.SARS2, "positive", test_spec.positive_images)]
        for finding in (Finding.NONE, Finding.PNEUMONIA_NON_SARS2):
            wanted = test_spec.negative_finding_split.get(finding, 0)
            targets.append((finding, f"negative/{finding.value}", wanted))
        pools = {finding: buckets[finding] for finding, _, _ in targets}
    else:
        targets = [(Finding.SARS2, "positive", test_spec.positive_images), (None, "negative", test_spec.negative_images)]
        pools = {
            Finding.SARS2: buckets[Finding.SARS2],
            None: buckets[Finding.NONE] + buckets[Finding.PNEUMONIA_NON_SARS2],
        }

    test_patients: set[str] = set()
    for key, class_name, target in targets:
        chosen = _select_patients_exact(pools[key], target, rng)
        if chosen is None:
            available = sum(count for _, count in pools[key])
            raise SplitError(
                f"cannot select exactly {target} test images for class {class_name!r} "
                f"({available} images available across whole patients)"
            )
        test_patients.update(chosen)

    pool = [p for p in sorted(by_patient) if p not in test_patients]
    order = rng.permutation(len(pool))
    n_val = math.floor(val_fraction * len(pool))
    val_patients = {pool[i] for i in order[:n_val]}

    assignment: dict[str, SplitName] = {}
    for record in manifest.records:
        if record.patient_id in test_patients:
            assignment[record.image_id] = SplitName.TEST
        elif record.patient_id in val_patients:
            assignment[record.image_id] = SplitName.VAL
        else:
            assignment[record.image_id] = SplitName.TRAIN
    return manifest.with_split_assignment(assignment)


def _select_patients_exact(
    patients: Sequence[tuple[str, int]], target: int, rng: np.random.Generator
) -> list[str] | None:
    """Pick whole patients whose image counts sum exactly to ``target``.

    Walks a seeded shuffle, taking each patient whose count still fits while
    the suffix can cover the remainder (subset-sum feasibility tracked as
    bitmasks), so selection is random yet exact. Returns None if no subset
    reaches the target.
    """
    if target == 0:
        return []
    order = rng.permutation(len(patients)) if patients else []
    counts = [patients[i][1] for i in order]
    n = len(counts)
    cap = (1 << (target + 1)) - 1
    achievable = [0] * (n + 1)
    achievable[n] = 1
    for i in range(n - 1, -1, -1):
        achievable[i] = (achievable[i + 1] | (achievable[i + 1] << counts[i])) & cap
    if not (achievable[0] >> target) & 1:
        return None
    chosen: list[str] = []
    remaining = target
    for i in range(n):
        count = counts[i]
        if count <= remaining and (achievable[i + 1] >> (remaining - count)) & 1:
            chosen.append(patients[order[i]][0])
            remaining -= count
            if remaining == 0:
                break
    return chosen


@dataclass(frozen=True)
class DemographicSummary:
    """Patient-level age/sex statistics plus image-level view statistics."""

    patient_total: int
    image_total: int
    age_mean: float | None
    age_std: float | None
    age_bins: Mapping[str, int]
    sex_counts: Mapping[str, int]
    view_counts: Mapping[str, int]


def _age_bin(age: int | None) -> str:
    if age is None:
        return "Unknown"
    if age < 20:
        return "<20"
    if age >= 90:
        return "90+"
    low = (age // 10) * 10
    return f"{low}-{low + 9}"


def demographic_summary(manifest: DatasetManifest) -> DemographicSummary:
    """Tally demographics: one vote per patient (its first record), views per image.

    A patient whose records disagree on age/sex keeps the first record's
    values; the conflict is logged.
    """
    first_record: dict[str, ImageRecord] = {}
    for record in manifest.records:
        existing = first_record.get(record.patient_id)
        if existing is None:
            first_record[record.patient_id] = record
        elif (existing.age, existing.sex) != (record.age, record.sex):
            logger.warning(
                "patient %r has conflicting demographics; keeping first record %r",
                record.patient_id,
                existing.image_id,
            )

    ages = [r.age for r in first_record.values() if r.age is not None]
    age_bins = {name: 0 for name in AGE_BIN_NAMES}
    for record in first_record.values():
        age_bins[_age_bin(record.age)] += 1
    sex_counts = {sex.value: 0 for sex in Sex}
    for record in first_record.values():
        sex_counts[record.sex.value] += 1
    view_counts = {view.value: 0 for view in View}
    for record in manifest.records:
        view_counts[record.view.value] += 1

    if ages:
        mean = float(np.mean(ages))
        std = float(np.std(ages))  # population std: a single known age has std 0
    else:
        mean = std = None
    return DemographicSummary(
        patient_total=len(first_record),
        image_total=len(manifest.records),
        age_mean=mean,
        age_std=std,
        age_bins=age_bins,
        sex_counts=sex_counts,
        view_counts=view_counts,
    )


def render_demographics(summary: DemographicSummary) -> str:
    """Render the demographics table with "count (pct%)" cells."""
    if summary.patient_total == 0:
        return "no records"
    lines = ["Age"]
    if summary.age_mean is None:
        lines.append("  mean ± std  n/a")
    else:
        lines.append(f"  mean ± std  {summary.age_mean:.2f} ± {summary.age_std:.2f}")
    for name in AGE_BIN_NAMES:
        lines.append(f"  {name:<8}{count_pct_cell(summary.age_bins[name], summary.patient_total)}")
    lines.append("Sex")
    for sex in Sex:
        lines.append(f"  {sex.value:<8}{count_pct_cell(summary.sex_counts[sex.value], summary.patient_total)}")
    lines.append("Imaging view")
    for view in View:
        lines.append(f"  {view.value:<8}{count_pct_cell(summary.view_counts[view.value], summary.image_total)}")
    return "\n".join(lines)


@dataclass(frozen=True)
class DistributionRow:
    split: str
    images_positive: int
    images_negative: int
    images_negative_none: int
    images_negative_pneumonia: int
    patients_positive: int
    patients_negative: int

    @property
    def images_total(self) -> int:
        return self.images_positive + self.images_negative


def distribution_report(manifest: DatasetManifest) -> dict[str, DistributionRow]:
    """Per-split per-class image and unique-patient counts.

    Keys are the split names present plus "all"; records without a split
    assignment land under "unassigned". Patient counts tally unique
    patient_ids per class, so totals across classes may exceed the unique
    patient total when a patient carries both classes.
    """
    groups: dict[str, list[ImageRecord]] = {"all": list(manifest.records)}
    for record in manifest.records:
        split = manifest.split_assignment.get(record.image_id)
        name = split.value if split is not None else "unassigned"
        groups.setdefault(name, []).append(record)

    report: dict[str, DistributionRow] = {}
    for name, records in groups.items():
        positives = [r for r in records if r.label is Label.POSITIVE]
        negatives = [r for r in records if r.label is Label.NEGATIVE]
        report[name] = DistributionRow(
            split=name,
            images_positive=len(positives),
            images_negative=len(negatives),
            images_negative_none=sum(1 for r in negatives if r.finding is Finding.NONE),
            images_negative_pneumonia=sum(1 for r in negatives if r.finding is Finding.PNEUMONIA_NON_SARS2),
            patients_positive=len({r.patient_id for r in positives}),
            patients_negative=len({r.patient_id for r in negatives}),
        )
    return report


def render_distribution(report: Mapping[str, DistributionRow]) -> str:
    columns = ("split", "img_pos", "img_neg", "neg_none", "neg_pneu", "img_total", "pat_pos", "pat_neg")
    widths = [max(len(c), 10) for c in columns]
    header = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    lines = [header]
    order = [k for k in ("train", "val", "test", "unassigned", "all") if k in report]
    for name in order:
        row = report[name]
        values = (
            row.split,
            row.images_positive,
            row.images_negative,
            row.images_negative_none,
            row.images_negative_pneumonia,
            row.images_total,
            row.patients_positive,
            row.patients_negative,
        )
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(values, widths)))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Persistence


def _record_to_row(record: ImageRecord) -> list[str]:
    return [
        record.image_id,
        record.patient_id,
        record.source,
        record.label.value,
        record.finding.value,
        "" if record.view is View.UNKNOWN else record.view.value,
        "" if record.age is None else str(record.age),
        "" if record.sex is Sex.UNKNOWN else record.sex.value,
        record.country or "",
        record.file_path,
    ]


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write the manifest CSV plus splits and summary sidecars."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for record in manifest.records:
            writer.writerow(_record_to_row(record))
    if manifest.split_assignment:
        with splits_sidecar_path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "split"])
            for record in manifest.records:
                split = manifest.split_assignment.get(record.image_id)
                if split is not None:
                    writer.writerow([record.image_id, split.value])
    summary_sidecar_path(path).write_text(render_summary_sidecar(manifest), encoding="utf-8")


def splits_sidecar_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".splits.csv")


def summary_sidecar_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".summary.txt")


def render_summary_sidecar(manifest: DatasetManifest) -> str:
    """key=value summary: totals, provenance, split and class tallies."""
    report = distribution_report(manifest)
    pairs: list[tuple[str, object]] = [
        ("images.total", len(manifest.records)),
        ("patients.total", len(manifest.patient_ids())),
    ]
    for source in sorted(manifest.provenance):
        pairs.append((f"source.{source}", manifest.provenance[source]))
    for name in sorted(report):
        row = report[name]
        pairs.append((f"split.{name}.images.positive", row.images_positive))
        pairs.append((f"split.{name}.images.negative", row.images_negative))
        pairs.append((f"split.{name}.patients.positive", row.patients_positive))
        pairs.append((f"split.{name}.patients.negative", row.patients_negative))
    return "\n".join(f"{key}={value}" for key, value in pairs) + "\n"


def read_manifest(path: Path | str, require_splits: bool = False) -> DatasetManifest:
    """Read a manifest CSV (strict header) and its sidecars if present."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, []))
        if header != MANIFEST_HEADER:
            raise SchemaError(f"{path}: unexpected header {header}")
        records = []
        provenance: Counter[str] = Counter()
        for row in reader:
            if len(row) != len(MANIFEST_HEADER):
                raise SchemaError(f"{path}: row with {len(row)} fields: {row}")
            cells = dict(zip(MANIFEST_HEADER, (c.strip() for c in row)))
            finding = Finding(cells["finding"])
            if cells["label"] and Label(cells["label"]) is not finding.label:
                raise IntegrityError(f"{path}: image {cells['image_id']!r} label contradicts finding")
            records.append(
                ImageRecord(
                    image_id=cells["image_id"],
                    patient_id=cells["patient_id"],
                    source=cells["source"],
                    finding=finding,
                    view=View(cells["view"]) if cells["view"] else View.UNKNOWN,
                    age=int(cells["age"]) if cells["age"] else None,
                    sex=Sex(cells["sex"]) if cells["sex"] else Sex.UNKNOWN,
                    country=cells["country"] or None,
                    file_path=cells["file_path"],
                )
            )
            provenance[cells["source"]] += 1

    assignment: dict[str, SplitName] = {}
    splits_path = splits_sidecar_path(path)
    if splits_path.exists():
        with splits_path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["image_id", "split"]:
                raise SchemaError(f"{splits_path}: unexpected header {header}")
            for image_id, split in reader:
                assignment[image_id] = SplitName(split)
    elif require_splits:
        raise SchemaError(f"{path}: split sidecar {splits_path} not found")
    return DatasetManifest(records=tuple(records), split_assignment=assignment, provenance=dict(provenance))


def resolve_file_paths(manifest: DatasetManifest, data_root: Path | str) -> dict[str, Path]:
    """Resolve each record's file_path under ``data_root``; error on escapes."""
    root = Path(data_root).resolve()
    resolved: dict[str, Path] = {}
    for record in manifest.records:
        candidate = (root / record.file_path).resolve()
        if not candidate.is_relative_to(root):
            raise IntegrityError(f"image {record.image_id!r}: file_path escapes the data root")
        resolved[record.image_id] = candidate
    return resolved
