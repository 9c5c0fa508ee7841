"""Table mapping, streaming transform and collection roundtrips."""

import gzip
import json
import random

import pytest

from ehrpipe.errors import (
    IoFailure,
    MalformedJson,
    MalformedRow,
    SchemaMismatch,
    UnknownResourceType,
    UnmappedTable,
)
from ehrpipe.fhir_etl import (
    read_collection,
    transform,
    transform_stream,
)
from ehrpipe.tables import TABLE_COLUMNS, TableKind, map_table_kind

# Independent copy of the full table -> resource mapping; the test fails if
# the implementation ever drifts from this 21-row reference.
EXPECTED_MAPPING = {
    "patients": "patient",
    "admissions": "encounter",
    "diagnoses_icd": "encounter",
    "icustays": "encounter",
    "cptevents": "claim",
    "noteevents": "diagnosticReport",
    "inputevents_cv": "medicationDispense",
    "inputevents_mv": "medicationDispense",
    "prescriptions": "medicationRequest",
    "chartevents": "observation",
    "datetimeevents": "observation",
    "labevents": "observation",
    "caregivers": "practitioner",
    "procedures_icd": "procedure",
    "procedureevents_mv": "procedure",
    "microbiologyevents": "specimen",
    "outputevents": "specimen",
    "services": "serviceRequest",
    "callout": None,
    "transfers": None,
    "drgcodes": None,
}

ADMISSION_HEADER = list(TABLE_COLUMNS[TableKind.ADMISSIONS])


def _admission_row(row_id, subject, hadm):
    base = {
        "row_id": row_id,
        "subject_id": subject,
        "hadm_id": hadm,
        "admittime": "2101-05-01 10:00:00",
        "dischtime": "2101-05-05 09:30:00",
        "admission_type": "EMERGENCY",
        "diagnosis": "SEPSIS",
    }
    return [str(base.get(col, "")) for col in ADMISSION_HEADER]


class TestMapping:
    def test_all_21_rows(self):
        assert len(EXPECTED_MAPPING) == 21
        for table in TableKind:
            assert map_table_kind(table) == EXPECTED_MAPPING[table.value]

    def test_exactly_18_tables_map(self):
        mapped = [t for t in TableKind if map_table_kind(t) is not None]
        assert len(mapped) == 18

    def test_examples(self):
        assert map_table_kind(TableKind.PATIENTS) == "patient"
        assert map_table_kind(TableKind.CHARTEVENTS) == "observation"
        assert map_table_kind(TableKind.CALLOUT) is None


class TestTransform:
    def test_three_row_admissions(self, csv_writer, tmp_path):
        path = csv_writer(
            "admissions.csv", ADMISSION_HEADER,
            [_admission_row(i, i, 100 + i) for i in range(1, 4)],
        )
        out = tmp_path / "admissions.json"
        collection = transform(path, out, TableKind.ADMISSIONS)
        assert collection.resource_type == "encounter"
        assert len(collection) == 3
        assert json.loads(out.read_text()) == [
            {"resource_type": r.resource_type} | r.attributes
            for r in collection.records
        ]

    def test_header_only_gives_empty_array(self, csv_writer, tmp_path):
        path = csv_writer("patients.csv",
                          list(TABLE_COLUMNS[TableKind.PATIENTS]), [])
        out = tmp_path / "patients.json"
        collection = transform(path, out, TableKind.PATIENTS)
        assert len(collection) == 0
        assert json.loads(out.read_text()) == []

    def test_unmapped_table(self, csv_writer, tmp_path):
        path = csv_writer("transfers.csv",
                          list(TABLE_COLUMNS[TableKind.TRANSFERS]), [])
        with pytest.raises(UnmappedTable):
            transform(path, tmp_path / "x.json", TableKind.TRANSFERS)

    def test_schema_mismatch(self, csv_writer, tmp_path):
        path = csv_writer("bad.csv", ["row_id", "subject_id"], [["1", "2"]])
        with pytest.raises(SchemaMismatch):
            transform(path, tmp_path / "x.json", TableKind.PATIENTS)

    def test_malformed_row_reports_row_number(self, csv_writer, tmp_path):
        rows = [_admission_row(1, 1, 101), _admission_row(2, 2, 102)[:-3]]
        path = csv_writer("admissions.csv", ADMISSION_HEADER, rows)
        with pytest.raises(MalformedRow, match="row 2"):
            transform(path, tmp_path / "x.json", TableKind.ADMISSIONS)

    def test_missing_input(self, tmp_path):
        with pytest.raises(IoFailure):
            transform(tmp_path / "nope.csv", tmp_path / "x.json",
                      TableKind.PATIENTS)

    def test_attribute_naming_and_nulls(self, csv_writer, tmp_path):
        path = csv_writer("admissions.csv", ADMISSION_HEADER,
                          [_admission_row(1, 7, 101)])
        collection = transform(path, tmp_path / "a.json",
                               TableKind.ADMISSIONS)
        attrs = collection.records[0].attributes
        assert attrs["periodStart"] == "2101-05-01T10:00:00"
        assert attrs["periodEnd"] == "2101-05-05T09:30:00"
        assert attrs["subject"] == 7
        assert attrs["identifier"] == 101
        assert attrs["mimic_source_table"] == "admissions"
        assert attrs["mimic_deathtime"] is None  # empty cell

    def test_stream_variant_counts(self, csv_writer, tmp_path):
        path = csv_writer(
            "admissions.csv", ADMISSION_HEADER,
            [_admission_row(i, i, 100 + i) for i in range(1, 6)],
        )
        count = transform_stream(path, tmp_path / "a.json",
                                 TableKind.ADMISSIONS)
        assert count == 5
        assert len(read_collection(tmp_path / "a.json")) == 5


class TestRoundtrip:
    def test_roundtrip_identity(self, csv_writer, tmp_path):
        path = csv_writer(
            "admissions.csv", ADMISSION_HEADER,
            [_admission_row(i, i, 100 + i) for i in range(1, 4)],
        )
        out = tmp_path / "a.json"
        written = transform(path, out, TableKind.ADMISSIONS)
        read = read_collection(out)
        assert read.records == written.records
        assert read.resource_type == written.resource_type
        assert read.source_table == TableKind.ADMISSIONS

    def test_gzip_compression_transparency(self, csv_writer, tmp_path):
        path = csv_writer(
            "admissions.csv", ADMISSION_HEADER,
            [_admission_row(i, i, 100 + i) for i in range(1, 4)],
        )
        plain = tmp_path / "a.json"
        packed = tmp_path / "a.json.gz"
        transform(path, plain, TableKind.ADMISSIONS)
        transform(path, packed, TableKind.ADMISSIONS)
        assert gzip.decompress(packed.read_bytes()) == plain.read_bytes()
        assert read_collection(packed).records == \
            read_collection(plain).records

    def test_gzip_input(self, tmp_path):
        raw = "\r\n".join(
            [",".join(ADMISSION_HEADER),
             ",".join(_admission_row(1, 1, 101))]
        )
        src = tmp_path / "a.csv.gz"
        src.write_bytes(gzip.compress(raw.encode()))
        collection = transform(src, tmp_path / "a.json",
                               TableKind.ADMISSIONS)
        assert len(collection) == 1

    def test_truncated_gzip(self, csv_writer, tmp_path):
        path = csv_writer(
            "admissions.csv", ADMISSION_HEADER,
            [_admission_row(i, i, 100 + i) for i in range(1, 30)],
        )
        packed = tmp_path / "a.json.gz"
        transform(path, packed, TableKind.ADMISSIONS)
        packed.write_bytes(packed.read_bytes()[:40])
        with pytest.raises((IoFailure, MalformedJson)):
            read_collection(packed)

    def test_unknown_resource_type(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps([{"resource_type": "foo", "id": 1}]))
        with pytest.raises(UnknownResourceType):
            read_collection(bad)

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(MalformedJson):
            read_collection(bad)

    def test_nested_record_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(
            [{"resource_type": "patient", "x": {"nested": 1}}]
        ))
        with pytest.raises(MalformedJson):
            read_collection(bad)


def _random_cell(rng):
    kind = rng.randrange(6)
    if kind == 0:
        return ""
    if kind == 1:
        return str(rng.randrange(-1000, 1000))
    if kind == 2:
        return f"{rng.uniform(-50, 50):.3f}"
    if kind == 3:
        return "2104-07-12 08:15:00"
    if kind == 4:
        return "text, with comma\nand newline"
    return 'quoted "text"'


class TestRandomizedRoundtrips:
    def test_count_and_roundtrip_on_random_csvs(self, tmp_path):
        rng = random.Random(99)
        mapped = [t for t in TableKind if map_table_kind(t) is not None]
        for trial in range(40):
            table = mapped[rng.randrange(len(mapped))]
            header = list(TABLE_COLUMNS[table])
            n_rows = rng.randrange(0, 15)
            rows = [
                [_random_cell(rng) for _ in header] for _ in range(n_rows)
            ]
            src = tmp_path / f"t{trial}.csv"
            with open(src, "w", encoding="utf-8", newline="") as handle:
                import csv as _csv

                writer = _csv.writer(handle, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)
            out = tmp_path / f"t{trial}.json"
            written = transform(src, out, table)
            assert len(written) == n_rows  # count preservation
            read = read_collection(out)
            assert read.records == written.records

    def test_flatness_of_serialized_records(self, csv_writer, tmp_path):
        path = csv_writer(
            "admissions.csv", ADMISSION_HEADER,
            [_admission_row(i, i, 100 + i) for i in range(1, 6)],
        )
        out = tmp_path / "a.json"
        transform(path, out, TableKind.ADMISSIONS)
        for record in json.loads(out.read_text()):
            for value in record.values():
                assert not isinstance(value, (dict, list))
