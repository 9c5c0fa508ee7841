"""MIMIC-III table registry: names, column schemas, FHIR resource mapping.

Attribute naming convention for the flat resources: a column is renamed to
the camelCase FHIR element name when an obvious element exists (admittime
-> periodStart, dob -> birthDate, ...); every other column keeps its
original name prefixed with "mimic_". row_id becomes "id" (the technical
resource id). The per-table rename maps below are the single source of
truth for that convention.
"""

from __future__ import annotations

import csv
import gzip
import io
from contextlib import contextmanager
from datetime import datetime
from enum import Enum
from typing import Iterator, Optional

from .errors import SchemaMismatch


class TableKind(str, Enum):
    PATIENTS = "patients"
    ADMISSIONS = "admissions"
    DIAGNOSES_ICD = "diagnoses_icd"
    ICUSTAYS = "icustays"
    CPTEVENTS = "cptevents"
    NOTEEVENTS = "noteevents"
    INPUTEVENTS_CV = "inputevents_cv"
    INPUTEVENTS_MV = "inputevents_mv"
    PRESCRIPTIONS = "prescriptions"
    CHARTEVENTS = "chartevents"
    DATETIMEEVENTS = "datetimeevents"
    LABEVENTS = "labevents"
    CAREGIVERS = "caregivers"
    PROCEDURES_ICD = "procedures_icd"
    PROCEDUREEVENTS_MV = "procedureevents_mv"
    MICROBIOLOGYEVENTS = "microbiologyevents"
    OUTPUTEVENTS = "outputevents"
    SERVICES = "services"
    CALLOUT = "callout"
    TRANSFERS = "transfers"
    DRGCODES = "drgcodes"

    def __str__(self) -> str:
        return self.value


#: Target resource type per table; None means no corresponding FHIR resource.
FHIR_RESOURCE_BY_TABLE: dict[TableKind, Optional[str]] = {
    TableKind.PATIENTS: "patient",
    TableKind.ADMISSIONS: "encounter",
    TableKind.DIAGNOSES_ICD: "encounter",
    TableKind.ICUSTAYS: "encounter",
    TableKind.CPTEVENTS: "claim",
    TableKind.NOTEEVENTS: "diagnosticReport",
    TableKind.INPUTEVENTS_CV: "medicationDispense",
    TableKind.INPUTEVENTS_MV: "medicationDispense",
    TableKind.PRESCRIPTIONS: "medicationRequest",
    TableKind.CHARTEVENTS: "observation",
    TableKind.DATETIMEEVENTS: "observation",
    TableKind.LABEVENTS: "observation",
    TableKind.CAREGIVERS: "practitioner",
    TableKind.PROCEDURES_ICD: "procedure",
    TableKind.PROCEDUREEVENTS_MV: "procedure",
    TableKind.MICROBIOLOGYEVENTS: "specimen",
    TableKind.OUTPUTEVENTS: "specimen",
    TableKind.SERVICES: "serviceRequest",
    TableKind.CALLOUT: None,
    TableKind.TRANSFERS: None,
    TableKind.DRGCODES: None,
}

RESOURCE_TYPES = frozenset(
    v for v in FHIR_RESOURCE_BY_TABLE.values() if v is not None
)


def map_table_kind(table: TableKind) -> Optional[str]:
    """Resource type for a table, or None for the three unmapped tables."""
    return FHIR_RESOURCE_BY_TABLE[table]


# Column kinds drive scalar conversion: "int" and "float" parse numerically,
# "time" canonicalizes to ISO-8601 seconds precision, "str" passes through.
# Cells that fail to parse keep their raw string (lossless by design).

_ID = "int"
_F = "float"
_T = "time"
_S = "str"

TABLE_COLUMNS: dict[TableKind, dict[str, str]] = {
    TableKind.PATIENTS: {
        "row_id": _ID, "subject_id": _ID, "gender": _S, "dob": _T,
        "dod": _T, "dod_hosp": _T, "dod_ssn": _T, "expire_flag": _ID,
    },
    TableKind.ADMISSIONS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "admittime": _T,
        "dischtime": _T, "deathtime": _T, "admission_type": _S,
        "admission_location": _S, "discharge_location": _S, "insurance": _S,
        "language": _S, "religion": _S, "marital_status": _S,
        "ethnicity": _S, "edregtime": _T, "edouttime": _T, "diagnosis": _S,
        "hospital_expire_flag": _ID, "has_chartevents_data": _ID,
    },
    TableKind.DIAGNOSES_ICD: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "seq_num": _ID,
        "icd9_code": _S,
    },
    TableKind.ICUSTAYS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "dbsource": _S, "first_careunit": _S, "last_careunit": _S,
        "first_wardid": _ID, "last_wardid": _ID, "intime": _T,
        "outtime": _T, "los": _F,
    },
    TableKind.CPTEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "costcenter": _S,
        "chartdate": _T, "cpt_cd": _S, "cpt_number": _ID, "cpt_suffix": _S,
        "ticket_id_seq": _ID, "sectionheader": _S, "subsectionheader": _S,
        "description": _S,
    },
    TableKind.NOTEEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "chartdate": _T,
        "charttime": _T, "storetime": _T, "category": _S, "description": _S,
        "cgid": _ID, "iserror": _ID, "text": _S,
    },
    TableKind.INPUTEVENTS_CV: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "charttime": _T, "itemid": _ID, "amount": _F, "amountuom": _S,
        "rate": _F, "rateuom": _S, "storetime": _T, "cgid": _ID,
        "orderid": _ID, "linkorderid": _ID, "stopped": _S, "newbottle": _ID,
        "originalamount": _F, "originalamountuom": _S, "originalroute": _S,
        "originalrate": _F, "originalrateuom": _S, "originalsite": _S,
    },
    TableKind.INPUTEVENTS_MV: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "starttime": _T, "endtime": _T, "itemid": _ID, "amount": _F,
        "amountuom": _S, "rate": _F, "rateuom": _S, "storetime": _T,
        "cgid": _ID, "orderid": _ID, "linkorderid": _ID,
        "ordercategoryname": _S, "secondaryordercategoryname": _S,
        "ordercomponenttypedescription": _S, "ordercategorydescription": _S,
        "patientweight": _F, "totalamount": _F, "totalamountuom": _S,
        "isopenbag": _ID, "continueinnextdept": _ID, "cancelreason": _ID,
        "statusdescription": _S, "comments_editedby": _S,
        "comments_canceledby": _S, "comments_date": _T,
        "originalamount": _F, "originalrate": _F,
    },
    TableKind.PRESCRIPTIONS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "startdate": _T, "enddate": _T, "drug_type": _S, "drug": _S,
        "drug_name_poe": _S, "drug_name_generic": _S,
        "formulary_drug_cd": _S, "gsn": _S, "ndc": _S, "prod_strength": _S,
        "dose_val_rx": _S, "dose_unit_rx": _S, "form_val_disp": _S,
        "form_unit_disp": _S, "route": _S,
    },
    TableKind.CHARTEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "itemid": _ID, "charttime": _T, "storetime": _T, "cgid": _ID,
        "value": _S, "valuenum": _F, "valueuom": _S, "warning": _ID,
        "error": _ID, "resultstatus": _S, "stopped": _S,
    },
    TableKind.DATETIMEEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "itemid": _ID, "charttime": _T, "storetime": _T, "cgid": _ID,
        "value": _T, "valueuom": _S, "warning": _ID, "error": _ID,
        "resultstatus": _S, "stopped": _S,
    },
    TableKind.LABEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "itemid": _ID,
        "charttime": _T, "value": _S, "valuenum": _F, "valueuom": _S,
        "flag": _S,
    },
    TableKind.CAREGIVERS: {
        "row_id": _ID, "cgid": _ID, "label": _S, "description": _S,
    },
    TableKind.PROCEDURES_ICD: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "seq_num": _ID,
        "icd9_code": _S,
    },
    TableKind.PROCEDUREEVENTS_MV: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "starttime": _T, "endtime": _T, "itemid": _ID, "value": _F,
        "valueuom": _S, "location": _S, "locationcategory": _S,
        "storetime": _T, "cgid": _ID, "orderid": _ID, "linkorderid": _ID,
        "ordercategoryname": _S, "secondaryordercategoryname": _S,
        "ordercategorydescription": _S, "isopenbag": _ID,
        "continueinnextdept": _ID, "cancelreason": _ID,
        "statusdescription": _S, "comments_editedby": _S,
        "comments_canceledby": _S, "comments_date": _T,
    },
    TableKind.MICROBIOLOGYEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "chartdate": _T,
        "charttime": _T, "spec_itemid": _ID, "spec_type_desc": _S,
        "org_itemid": _ID, "org_name": _S, "isolate_num": _ID,
        "ab_itemid": _ID, "ab_name": _S, "dilution_text": _S,
        "dilution_comparison": _S, "dilution_value": _F,
        "interpretation": _S,
    },
    TableKind.OUTPUTEVENTS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "charttime": _T, "itemid": _ID, "value": _F, "valueuom": _S,
        "storetime": _T, "cgid": _ID, "stopped": _S, "newbottle": _S,
        "iserror": _ID,
    },
    TableKind.SERVICES: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID,
        "transfertime": _T, "prev_service": _S, "curr_service": _S,
    },
    TableKind.CALLOUT: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID,
        "submit_wardid": _ID, "submit_careunit": _S, "curr_wardid": _ID,
        "curr_careunit": _S, "callout_wardid": _ID, "callout_service": _S,
        "request_tele": _ID, "request_resp": _ID, "request_cdiff": _ID,
        "request_mrsa": _ID, "request_vre": _ID, "callout_status": _S,
        "callout_outcome": _S, "discharge_wardid": _ID,
        "acknowledge_status": _S, "createtime": _T, "updatetime": _T,
        "acknowledgetime": _T, "outcometime": _T, "firstreservationtime": _T,
        "currentreservationtime": _T,
    },
    TableKind.TRANSFERS: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "icustay_id": _ID,
        "dbsource": _S, "eventtype": _S, "prev_careunit": _S,
        "curr_careunit": _S, "prev_wardid": _ID, "curr_wardid": _ID,
        "intime": _T, "outtime": _T, "los": _F,
    },
    TableKind.DRGCODES: {
        "row_id": _ID, "subject_id": _ID, "hadm_id": _ID, "drg_type": _S,
        "drg_code": _ID, "description": _S, "drg_severity": _ID,
        "drg_mortality": _ID,
    },
}

# Columns with an obvious FHIR element; everything else gets mimic_<col>.
FHIR_ATTRIBUTE_BY_COLUMN: dict[TableKind, dict[str, str]] = {
    TableKind.PATIENTS: {
        "subject_id": "identifier", "gender": "gender", "dob": "birthDate",
        "dod": "deceasedDateTime",
    },
    TableKind.ADMISSIONS: {
        "hadm_id": "identifier", "subject_id": "subject",
        "admittime": "periodStart", "dischtime": "periodEnd",
        "admission_type": "class", "diagnosis": "reasonCode",
    },
    TableKind.DIAGNOSES_ICD: {
        "hadm_id": "identifier", "subject_id": "subject",
        "icd9_code": "reasonCode",
    },
    TableKind.ICUSTAYS: {
        "icustay_id": "identifier", "hadm_id": "partOf",
        "subject_id": "subject", "intime": "periodStart",
        "outtime": "periodEnd",
    },
    TableKind.CPTEVENTS: {
        "subject_id": "patient", "chartdate": "created",
    },
    TableKind.NOTEEVENTS: {
        "subject_id": "subject", "hadm_id": "encounter",
        "charttime": "effectiveDateTime", "category": "category",
    },
    TableKind.INPUTEVENTS_CV: {
        "subject_id": "subject", "hadm_id": "context",
        "amount": "quantity",
    },
    TableKind.INPUTEVENTS_MV: {
        "subject_id": "subject", "hadm_id": "context",
        "amount": "quantity",
    },
    TableKind.PRESCRIPTIONS: {
        "subject_id": "subject", "hadm_id": "encounter",
        "drug": "medication", "startdate": "authoredOn",
    },
    TableKind.CHARTEVENTS: {
        "subject_id": "subject", "hadm_id": "encounter", "itemid": "code",
        "charttime": "effectiveDateTime", "valuenum": "valueQuantity",
        "value": "valueString",
    },
    TableKind.DATETIMEEVENTS: {
        "subject_id": "subject", "hadm_id": "encounter", "itemid": "code",
        "charttime": "effectiveDateTime", "value": "valueDateTime",
    },
    TableKind.LABEVENTS: {
        "subject_id": "subject", "hadm_id": "encounter", "itemid": "code",
        "charttime": "effectiveDateTime", "valuenum": "valueQuantity",
        "value": "valueString",
    },
    TableKind.CAREGIVERS: {
        "cgid": "identifier",
    },
    TableKind.PROCEDURES_ICD: {
        "subject_id": "subject", "hadm_id": "encounter",
        "icd9_code": "code",
    },
    TableKind.PROCEDUREEVENTS_MV: {
        "subject_id": "subject", "hadm_id": "encounter", "itemid": "code",
    },
    TableKind.MICROBIOLOGYEVENTS: {
        "subject_id": "subject", "charttime": "collectedDateTime",
    },
    TableKind.OUTPUTEVENTS: {
        "subject_id": "subject", "charttime": "collectedDateTime",
    },
    TableKind.SERVICES: {
        "subject_id": "subject", "hadm_id": "encounter",
        "transfertime": "authoredOn",
    },
    TableKind.CALLOUT: {},
    TableKind.TRANSFERS: {},
    TableKind.DRGCODES: {},
}


def attribute_name(table: TableKind, column: str) -> str:
    """Flat-resource attribute name for a source column."""
    if column == "row_id":
        return "id"
    return FHIR_ATTRIBUTE_BY_COLUMN[table].get(column, f"mimic_{column}")


_TIME_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d")


def parse_timestamp(raw: str) -> Optional[datetime]:
    text = raw.strip()
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    return None


def convert_cell(raw: str, kind: str):
    """Convert a CSV cell per its column kind; empty cells become None.

    Unparseable cells fall back to the raw string so no input is ever lost.
    """
    if raw == "":
        return None
    if kind == _ID:
        try:
            return int(raw)
        except ValueError:
            return raw
    if kind == _F:
        try:
            return float(raw)
        except ValueError:
            return raw
    if kind == _T:
        ts = parse_timestamp(raw)
        return ts.isoformat(sep="T", timespec="seconds") if ts else raw
    return raw


@contextmanager
def open_text_auto(path, mode: str = "rt", newline: Optional[str] = None):
    """Open a text file, transparently gzip-compressed when it ends in .gz.

    Gzip writes use mtime=0 so identical content produces identical bytes.
    """
    p = str(path)
    if p.endswith(".gz"):
        if "r" in mode:
            handle = gzip.open(p, "rt", encoding="utf-8", newline=newline)
            try:
                yield handle
            finally:
                handle.close()
        else:
            raw = open(p, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            text = io.TextIOWrapper(gz, encoding="utf-8", newline=newline)
            try:
                yield text
            finally:
                text.close()
                raw.close()
    else:
        handle = open(p, mode, encoding="utf-8", newline=newline)
        try:
            yield handle
        finally:
            handle.close()


def read_admission_times(path) -> dict[str, tuple[datetime, datetime]]:
    """Map hadm_id -> (admit time, discharge time) from an admissions CSV."""
    times: dict[str, tuple[datetime, datetime]] = {}
    with open_text_auto(path, "rt", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            return times
        fields = {name.lower(): name for name in reader.fieldnames}
        missing = {"hadm_id", "admittime", "dischtime"} - set(fields)
        if missing:
            raise SchemaMismatch(
                f"{path}: admissions file lacks column(s) {sorted(missing)}"
            )
        for row in reader:
            hadm = row[fields["hadm_id"]].strip()
            admit = parse_timestamp(row[fields["admittime"]])
            disch = parse_timestamp(row[fields["dischtime"]])
            if hadm and admit and disch:
                times[hadm] = (admit, disch)
    return times


def iter_csv_rows(path) -> Iterator[dict[str, str]]:
    """Stream rows of a (possibly gzipped) CSV as lowercase-keyed dicts."""
    with open_text_auto(path, "rt", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return
        keys = [h.strip().lower() for h in header]
        for row in reader:
            yield dict(zip(keys, row))
