"""Transform MIMIC-III-schema CSV tables into flat FHIR JSON collections.

Each output file is a JSON array of single-level objects: one "resource_type"
key plus scalar attributes (string / integer / decimal / ISO timestamp /
null). A "mimic_source_table" attribute is added to every record so the
source table survives the many-to-one table->resource mapping and the files
stay lossless. Paths ending in ".gz" are read/written gzip-compressed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, TextIO

from .errors import (
    IoFailure,
    MalformedJson,
    MalformedRow,
    SchemaMismatch,
    UnknownResourceType,
    UnmappedTable,
)
from .tables import (
    RESOURCE_TYPES,
    TABLE_COLUMNS,
    TableKind,
    attribute_name,
    convert_cell,
    map_table_kind,
    open_text_auto,
)

Scalar = str | int | float | None


@dataclass
class ResourceRecord:
    """One flat FHIR resource: a type plus an ordered attribute map."""

    resource_type: str
    attributes: dict[str, Scalar]


@dataclass
class ResourceCollection:
    """All records produced from one source table, in source-row order."""

    resource_type: Optional[str]
    source_table: Optional[TableKind]
    records: list[ResourceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def _resolve_header(table: TableKind, header: list[str]) -> list[str]:
    """Validate the CSV header against the table schema.

    Returns lowercase column names in file order. Missing schema columns are
    a SchemaMismatch; extra columns are carried through as mimic_<name>.
    """
    columns = [h.strip().lower() for h in header]
    missing = set(TABLE_COLUMNS[table]) - set(columns)
    if missing:
        raise SchemaMismatch(
            f"{table.value}: header missing column(s) {sorted(missing)}"
        )
    return columns


def _row_to_record(
    table: TableKind,
    resource_type: str,
    columns: list[str],
    row: list[str],
    row_number: int,
) -> ResourceRecord:
    if len(row) != len(columns):
        raise MalformedRow(
            f"{table.value}: row {row_number} has {len(row)} fields, "
            f"header has {len(columns)}"
        )
    schema = TABLE_COLUMNS[table]
    attrs: dict[str, Scalar] = {"mimic_source_table": table.value}
    for col, raw in zip(columns, row):
        kind = schema.get(col, "str")
        attrs[attribute_name(table, col)] = convert_cell(raw, kind)
    return ResourceRecord(resource_type=resource_type, attributes=attrs)


def iter_records(input_path, table: TableKind) -> Iterator[ResourceRecord]:
    """Stream records from a CSV file, one source row at a time."""
    resource_type = map_table_kind(table)
    if resource_type is None:
        raise UnmappedTable(f"no FHIR resource type for table {table.value}")
    try:
        with open_text_auto(input_path, "rt", newline="") as handle:
            reader = csv.reader(handle)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaMismatch(f"{table.value}: empty file, no header")
            columns = _resolve_header(table, header)
            for number, row in enumerate(reader, start=1):
                yield _row_to_record(table, resource_type, columns, row, number)
    except OSError as exc:
        raise IoFailure(f"cannot read {input_path}: {exc}") from exc
    except EOFError as exc:
        raise IoFailure(f"truncated input {input_path}: {exc}") from exc


def _record_json(record: ResourceRecord) -> str:
    payload: dict[str, Scalar] = {"resource_type": record.resource_type}
    payload.update(record.attributes)
    return json.dumps(payload, ensure_ascii=False)


def _write_array(handle: TextIO, records: Iterator[ResourceRecord]) -> int:
    """Write records incrementally as a JSON array; returns the count."""
    handle.write("[")
    count = 0
    for record in records:
        handle.write(",\n " if count else "\n ")
        handle.write(_record_json(record))
        count += 1
    handle.write("\n]\n" if count else "]\n")
    return count


def transform(input_path, output_path, table: TableKind) -> ResourceCollection:
    """Convert one table CSV into a flat FHIR collection file.

    Persists the JSON array to output_path (gzip when the name ends in .gz)
    and returns the in-memory collection so the call can be chained into
    further processing. Record order equals source-row order.
    """
    collection = ResourceCollection(
        resource_type=map_table_kind(table), source_table=table
    )

    def _collect() -> Iterator[ResourceRecord]:
        for record in iter_records(input_path, table):
            collection.records.append(record)
            yield record

    try:
        with open_text_auto(output_path, "wt") as handle:
            _write_array(handle, _collect())
    except OSError as exc:
        raise IoFailure(f"cannot write {output_path}: {exc}") from exc
    return collection


def transform_stream(input_path, output_path, table: TableKind) -> int:
    """Like transform, but never materializes records; returns the row count.

    This is the O(1)-memory path the CLI uses for very large tables.
    """
    try:
        with open_text_auto(output_path, "wt") as handle:
            return _write_array(handle, iter_records(input_path, table))
    except OSError as exc:
        raise IoFailure(f"cannot write {output_path}: {exc}") from exc


def read_collection(path) -> ResourceCollection:
    """Read a collection file written by transform.

    Returns records in file order. resource_type/source_table are taken from
    the first record; an empty array yields an empty collection with both
    fields None.
    """
    try:
        with open_text_auto(path, "rt") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except EOFError as exc:
        raise IoFailure(f"truncated input {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"{path}: {exc}") from exc

    if not isinstance(payload, list):
        raise MalformedJson(f"{path}: top-level JSON value is not an array")

    records: list[ResourceRecord] = []
    for index, obj in enumerate(payload):
        if not isinstance(obj, dict) or "resource_type" not in obj:
            raise MalformedJson(f"{path}: record {index} is not a flat object")
        rtype = obj["resource_type"]
        if rtype not in RESOURCE_TYPES:
            raise UnknownResourceType(
                f"{path}: record {index} has resource_type {rtype!r}"
            )
        attrs = {k: v for k, v in obj.items() if k != "resource_type"}
        for key, value in attrs.items():
            if isinstance(value, (dict, list)):
                raise MalformedJson(
                    f"{path}: record {index} attribute {key!r} is nested"
                )
        records.append(ResourceRecord(resource_type=rtype, attributes=attrs))

    resource_type = records[0].resource_type if records else None
    source_table: Optional[TableKind] = None
    if records:
        source = records[0].attributes.get("mimic_source_table")
        if isinstance(source, str):
            try:
                source_table = TableKind(source)
            except ValueError:
                source_table = None
    return ResourceCollection(
        resource_type=resource_type, source_table=source_table, records=records
    )
