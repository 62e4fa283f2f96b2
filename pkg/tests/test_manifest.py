import logging

import numpy as np
import pytest

from conftest import make_manifest, make_records
from cxrscreen.manifest import (
    AGE_BIN_NAMES,
    DatasetManifest,
    Finding,
    ImageRecord,
    IntegrityError,
    Label,
    SchemaError,
    Sex,
    SourceSchema,
    SplitError,
    SplitName,
    TestSplitSpec,
    View,
    demographic_summary,
    distribution_report,
    ingest_source,
    read_manifest,
    render_demographics,
    render_distribution,
    resolve_file_paths,
    split_patient_level,
    unify,
    write_manifest,
)


def write_source(path, rows, header="image_id,patient_id,finding,view,age,sex,country,file_path"):
    lines = [header] + rows
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# ingestion


def test_ingest_basic(tmp_path):
    src = write_source(
        tmp_path / "cohortA.csv",
        [
            "i1,p1,COVID-19,PA,34,M,it,a/i1.png",
            "i2,p1,covid-19,AP,34,M,it,a/i2.png",
            "i3,p2,normal,,,F,,a/i3.png",
            "i4,p3,pneumonia,pa,61,,us,a/i4.png",
        ],
    )
    result = ingest_source(src, "cohortA")
    assert len(result.records) == 4
    assert result.rejections == ()
    r1 = result.records[0]
    assert r1.finding is Finding.SARS2
    assert r1.label is Label.POSITIVE
    assert r1.view is View.PA
    assert r1.sex is Sex.MALE
    assert r1.age == 34
    assert result.records[2].finding is Finding.NONE
    assert result.records[2].age is None
    assert result.records[3].finding is Finding.PNEUMONIA_NON_SARS2
    assert result.records[3].view is View.PA


def test_ingest_rejects_bad_rows_with_row_numbers(tmp_path):
    src = write_source(
        tmp_path / "s.csv",
        [
            "i1,p1,covid-19,PA,30,M,,x.png",
            ",p2,covid-19,PA,30,M,,y.png",  # row 3: no image_id
            "i3,p3,gremlins,PA,30,M,,z.png",  # row 4: unknown finding
            "i4,p4,normal,PA,-3,M,,w.png",  # row 5: negative age
            "i5,p5,normal,PA,abc,M,,v.png",  # row 6: non-numeric age
            "i1,p6,normal,PA,30,M,,u.png",  # row 7: duplicate image_id
        ],
    )
    result = ingest_source(src, "s")
    assert [r.image_id for r in result.records] == ["i1"]
    assert [r.row_number for r in result.rejections] == [3, 4, 5, 6, 7]
    reasons = " | ".join(r.reason for r in result.rejections)
    assert "image_id" in reasons
    assert "gremlins" in reasons
    assert "age" in reasons
    assert "duplicate" in reasons


def test_ingest_missing_required_column_is_schema_error(tmp_path):
    src = write_source(tmp_path / "s.csv", ["i1,p1,PA"], header="image_id,patient_id,view")
    with pytest.raises(SchemaError, match="finding"):
        ingest_source(src, "s")


def test_ingest_with_custom_schema(tmp_path):
    path = tmp_path / "weird.csv"
    path.write_text(
        "scan;subject;dx;projection;years;path\n"
        "s1;sub1;positivo;posteroanterior;44;img/s1.png\n"
        "s2;sub2;sano;;;img/s2.png\n"
    )
    schema = SourceSchema.from_dict(
        {
            "columns": {
                "image_id": "scan",
                "patient_id": "subject",
                "finding": "dx",
                "view": "projection",
                "age": "years",
                "file_path": "path",
            },
            "finding_values": {"positivo": "sars2", "sano": "none"},
            "delimiter": ";",
        }
    )
    result = ingest_source(path, "weird", schema)
    assert len(result.records) == 2
    assert result.records[0].finding is Finding.SARS2
    assert result.records[1].finding is Finding.NONE
    # unmapped view vocabulary falls back to unknown rather than rejecting
    assert result.records[0].view is View.UNKNOWN


def test_unify_first_source_wins_and_label_conflict_fails(caplog):
    a = ImageRecord("dup", "p1", "srcA", Finding.SARS2, file_path="a.png")
    b = ImageRecord("dup", "p9", "srcB", Finding.SARS2, file_path="b.png")
    with caplog.at_level(logging.WARNING):
        manifest = unify([[a], [b]])
    assert len(manifest) == 1
    assert manifest.records[0].source == "srcA"
    assert "duplicate image_id" in caplog.text

    c = ImageRecord("dup", "p9", "srcB", Finding.NONE, file_path="b.png")
    with pytest.raises(IntegrityError, match="conflicting labels"):
        unify([[a], [c]])


def test_unify_provenance_counts():
    a = [ImageRecord(f"a{i}", f"p{i}", "srcA", Finding.NONE, file_path="x") for i in range(3)]
    b = [ImageRecord(f"b{i}", f"q{i}", "srcB", Finding.SARS2, file_path="x") for i in range(2)]
    manifest = unify([a, b])
    assert manifest.provenance == {"srcA": 3, "srcB": 2}


# ---------------------------------------------------------------------------
# manifest invariants


def test_duplicate_ids_rejected():
    r = ImageRecord("i1", "p1", "s", Finding.NONE, file_path="x")
    with pytest.raises(IntegrityError, match="duplicate"):
        DatasetManifest(records=(r, r))


def test_split_assignment_unknown_id_rejected():
    r = ImageRecord("i1", "p1", "s", Finding.NONE, file_path="x")
    with pytest.raises(IntegrityError, match="unknown"):
        DatasetManifest(records=(r,), split_assignment={"ghost": SplitName.TEST})


def test_patient_split_straddle_rejected():
    r1 = ImageRecord("i1", "p1", "s", Finding.NONE, file_path="x")
    r2 = ImageRecord("i2", "p1", "s", Finding.NONE, file_path="y")
    with pytest.raises(IntegrityError, match="multiple splits"):
        DatasetManifest(
            records=(r1, r2),
            split_assignment={"i1": SplitName.TRAIN, "i2": SplitName.TEST},
        )


def test_record_validation():
    with pytest.raises(ValueError):
        ImageRecord("", "p", "s", Finding.NONE)
    with pytest.raises(ValueError):
        ImageRecord("i", "p", "s", Finding.NONE, age=-1)


# ---------------------------------------------------------------------------
# patient-level splitting


def test_split_meets_exact_targets():
    manifest = make_manifest(n_patients=60, seed=1)
    manifest = split_patient_level(manifest, TestSplitSpec(8, 10), val_fraction=0.15, seed=5)
    test_records = manifest.records_for_split(SplitName.TEST)
    assert sum(1 for r in test_records if r.label is Label.POSITIVE) == 8
    assert sum(1 for r in test_records if r.label is Label.NEGATIVE) == 10
    # every record assigned
    assert len(manifest.split_assignment) == len(manifest)


def test_split_no_patient_overlap():
    manifest = make_manifest(n_patients=45, seed=2)
    manifest = split_patient_level(manifest, TestSplitSpec(6, 6), val_fraction=0.2, seed=9)
    train = manifest.patient_ids(SplitName.TRAIN)
    val = manifest.patient_ids(SplitName.VAL)
    test = manifest.patient_ids(SplitName.TEST)
    assert not train & val
    assert not train & test
    assert not val & test
    assert train | val | test == manifest.patient_ids()


def test_split_deterministic_per_seed():
    manifest = make_manifest(n_patients=40, seed=3)
    a = split_patient_level(manifest, TestSplitSpec(5, 5), seed=11)
    b = split_patient_level(manifest, TestSplitSpec(5, 5), seed=11)
    c = split_patient_level(manifest, TestSplitSpec(5, 5), seed=12)
    assert a.split_assignment == b.split_assignment
    assert a.split_assignment != c.split_assignment


def test_split_negative_finding_subtargets():
    manifest = make_manifest(n_patients=60, seed=4)
    spec = TestSplitSpec(
        4, 10, negative_finding_split={Finding.NONE: 6, Finding.PNEUMONIA_NON_SARS2: 4}
    )
    manifest = split_patient_level(manifest, spec, seed=2)
    test_records = manifest.records_for_split(SplitName.TEST)
    assert sum(1 for r in test_records if r.finding is Finding.NONE) == 6
    assert sum(1 for r in test_records if r.finding is Finding.PNEUMONIA_NON_SARS2) == 4
    assert sum(1 for r in test_records if r.finding is Finding.SARS2) == 4


def test_split_error_names_deficient_class():
    # two positive patients with 2 images each: an odd target is unreachable
    records = []
    for p in range(2):
        for j in range(2):
            records.append(
                ImageRecord(f"pos{p}{j}", f"pp{p}", "s", Finding.SARS2, file_path="x")
            )
    for i in range(6):
        records.append(ImageRecord(f"neg{i}", f"np{i}", "s", Finding.NONE, file_path="x"))
    manifest = DatasetManifest(records=tuple(records))
    with pytest.raises(SplitError, match="positive"):
        split_patient_level(manifest, TestSplitSpec(3, 2), seed=0)


def test_split_mixed_finding_patients_never_in_test():
    manifest = make_manifest(n_patients=60, seed=5, mixed_every=4)
    mixed = {
        pid
        for pid in manifest.patient_ids()
        if len({r.finding for r in manifest.records if r.patient_id == pid}) > 1
    }
    assert mixed, "fixture should contain mixed-finding patients"
    result = split_patient_level(manifest, TestSplitSpec(6, 6), seed=1)
    assert not mixed & result.patient_ids(SplitName.TEST)


def test_val_fraction_takes_floor_of_patients():
    manifest = make_manifest(n_patients=41, seed=6)
    result = split_patient_level(manifest, TestSplitSpec(2, 2), val_fraction=0.25, seed=0)
    n_test = len(result.patient_ids(SplitName.TEST))
    remaining = 41 - n_test
    assert len(result.patient_ids(SplitName.VAL)) == int(np.floor(0.25 * remaining))


def test_val_fraction_validation():
    manifest = make_manifest(n_patients=10)
    with pytest.raises(ValueError):
        split_patient_level(manifest, TestSplitSpec(1, 1), val_fraction=1.0)


def test_test_split_spec_validation():
    with pytest.raises(ValueError):
        TestSplitSpec(-1, 0)
    with pytest.raises(ValueError):
        TestSplitSpec(1, 5, negative_finding_split={Finding.NONE: 2})
    with pytest.raises(ValueError):
        TestSplitSpec(1, 5, negative_finding_split={Finding.SARS2: 5})


# ---------------------------------------------------------------------------
# demographics and distribution


def test_demographics_counts_patients_once():
    records = (
        ImageRecord("i1", "p1", "s", Finding.NONE, age=42, sex=Sex.FEMALE, file_path="x"),
        ImageRecord("i2", "p1", "s", Finding.NONE, age=42, sex=Sex.FEMALE, file_path="x"),
        ImageRecord("i3", "p2", "s", Finding.SARS2, view=View.PA, file_path="x"),
    )
    summary = demographic_summary(DatasetManifest(records=records))
    assert summary.patient_total == 2
    assert summary.image_total == 3
    assert summary.age_bins["40-49"] == 1
    assert summary.age_bins["Unknown"] == 1
    assert summary.sex_counts["female"] == 1
    assert summary.view_counts["PA"] == 1
    assert summary.view_counts["unknown"] == 2


def test_demographics_single_age_has_zero_std():
    records = (ImageRecord("i1", "p1", "s", Finding.NONE, age=50, file_path="x"),)
    summary = demographic_summary(DatasetManifest(records=records))
    assert summary.age_mean == 50.0
    assert summary.age_std == 0.0


def test_demographics_no_ages_renders_na():
    records = (ImageRecord("i1", "p1", "s", Finding.NONE, file_path="x"),)
    summary = demographic_summary(DatasetManifest(records=records))
    assert summary.age_mean is None
    assert "n/a" in render_demographics(summary)


def test_age_bin_edges():
    bins = {}
    for age, expected in [(0, "<20"), (19, "<20"), (20, "20-29"), (89, "80-89"), (90, "90+"), (117, "90+")]:
        records = (ImageRecord("i", "p", "s", Finding.NONE, age=age, file_path="x"),)
        summary = demographic_summary(DatasetManifest(records=records))
        bins[age] = [name for name, count in summary.age_bins.items() if count][0]
        assert bins[age] == expected
    assert list(summary.age_bins) == list(AGE_BIN_NAMES)


def test_distribution_report_and_rendering():
    manifest = make_manifest(n_patients=30, seed=7)
    manifest = split_patient_level(manifest, TestSplitSpec(3, 3), seed=0)
    report = distribution_report(manifest)
    assert set(report) == {"train", "val", "test", "all"}
    all_row = report["all"]
    assert all_row.images_total == len(manifest)
    assert all_row.images_negative == all_row.images_negative_none + all_row.images_negative_pneumonia
    text = render_distribution(report)
    assert "test" in text and "img_pos" in text


# ---------------------------------------------------------------------------
# persistence


def test_manifest_round_trip(tmp_path):
    manifest = make_manifest(n_patients=25, seed=8)
    manifest = split_patient_level(manifest, TestSplitSpec(3, 3), seed=1)
    out = tmp_path / "data.csv"
    write_manifest(manifest, out)
    assert (tmp_path / "data.splits.csv").exists()
    assert (tmp_path / "data.summary.txt").exists()
    back = read_manifest(out, require_splits=True)
    assert back.records == manifest.records
    assert back.split_assignment == manifest.split_assignment


def test_manifest_write_is_byte_stable(tmp_path):
    manifest = make_manifest(n_patients=10, seed=9)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_manifest(manifest, a)
    write_manifest(manifest, b)
    assert a.read_bytes() == b.read_bytes()


def test_read_manifest_rejects_wrong_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("image,patient\nx,y\n")
    with pytest.raises(SchemaError):
        read_manifest(bad)


def test_read_manifest_rejects_label_finding_mismatch(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "image_id,patient_id,source,label,finding,view,age,sex,country,file_path\n"
        "i1,p1,s,negative,sars2,,,,,x.png\n"
    )
    with pytest.raises(IntegrityError, match="contradicts"):
        read_manifest(path)


def test_read_manifest_requires_splits_when_asked(tmp_path):
    manifest = make_manifest(n_patients=5)
    out = tmp_path / "m.csv"
    write_manifest(manifest, out)  # no split assignment: no sidecar
    with pytest.raises(SchemaError, match="sidecar"):
        read_manifest(out, require_splits=True)


def test_summary_sidecar_contents(tmp_path):
    manifest = make_manifest(n_patients=12, seed=10)
    manifest = split_patient_level(manifest, TestSplitSpec(2, 2), seed=0)
    out = tmp_path / "m.csv"
    write_manifest(manifest, out)
    text = (tmp_path / "m.summary.txt").read_text()
    assert f"images.total={len(manifest)}" in text
    assert "split.test.images.positive=2" in text
    assert "split.test.images.negative=2" in text


def test_resolve_file_paths_blocks_escapes(tmp_path):
    good = ImageRecord("i1", "p1", "s", Finding.NONE, file_path="sub/a.png")
    evil = ImageRecord("i2", "p2", "s", Finding.NONE, file_path="../../etc/passwd")
    resolved = resolve_file_paths(DatasetManifest(records=(good,)), tmp_path)
    assert resolved["i1"] == (tmp_path / "sub/a.png").resolve()
    with pytest.raises(IntegrityError, match="escapes"):
        resolve_file_paths(DatasetManifest(records=(good, evil)), tmp_path)


def test_make_records_helper_is_deterministic():
    assert make_records(10, seed=3) == make_records(10, seed=3)
