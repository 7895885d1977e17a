"""Discharge-letter corpus ingestion and per-admission context aggregation."""
from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import ConfigurationError, NotFoundError, SchemaError, ValidationError
from .segmenter import SectionedLetter

log = logging.getLogger(__name__)

IMAGING = "imaging_and_studies"
MAX_AGE = 150
SPLITS = ("train", "validation", "test")

# Logical field -> column name, MIMIC-IV naming.
DEFAULT_COLUMNS: dict[str, dict[str, str]] = {
    "patients": {"subject_id": "subject_id", "gender": "gender", "anchor_age": "anchor_age", "anchor_year": "anchor_year"},
    "admissions": {"hadm_id": "hadm_id", "subject_id": "subject_id", "admittime": "admittime", "dischtime": "dischtime", "race": "race"},
    "diagnoses": {"hadm_id": "hadm_id", "seq_num": "seq_num", "description": "long_title"},
    "transfers": {"hadm_id": "hadm_id", "eventtype": "eventtype", "careunit": "careunit", "intime": "intime", "outtime": "outtime"},
    "radiology": {"hadm_id": "hadm_id", "text": "text"},
}


@dataclass(frozen=True)
class PatientAdmissionSummary:
    gender: str
    race: str
    age_years: int
    diagnoses: tuple[str, ...] = ()
    transfer_summary: tuple[str, ...] = ()
    stay_duration_hours: float = 0.0

    def render_admission(self) -> str:
        return "\n".join(
            [
                f"gender: {self.gender}",
                f"race: {self.race}",
                f"age: {self.age_years}",
                f"stay duration (hours): {self.stay_duration_hours:g}",
            ]
        )

    def render_diagnoses(self) -> str:
        return "\n".join(self.diagnoses)

    def render_transfers(self) -> str:
        return "\n".join(self.transfer_summary)

    def to_dict(self) -> dict:
        return {
            "gender": self.gender,
            "race": self.race,
            "age_years": self.age_years,
            "diagnoses": list(self.diagnoses),
            "transfer_summary": list(self.transfer_summary),
            "stay_duration_hours": self.stay_duration_hours,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatientAdmissionSummary":
        return cls(
            gender=d["gender"],
            race=d["race"],
            age_years=int(d["age_years"]),
            diagnoses=tuple(d.get("diagnoses", ())),
            transfer_summary=tuple(d.get("transfer_summary", ())),
            stay_duration_hours=float(d.get("stay_duration_hours", 0.0)),
        )


@dataclass(frozen=True)
class DischargeRecord:
    hadm_id: str
    text: str
    admission: PatientAdmissionSummary | None = None
    radiology_notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "hadm_id": self.hadm_id,
            "text": self.text,
            "admission": self.admission.to_dict() if self.admission else None,
            "radiology_notes": list(self.radiology_notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DischargeRecord":
        adm = d.get("admission")
        return cls(
            hadm_id=str(d["hadm_id"]),
            text=d["text"],
            admission=PatientAdmissionSummary.from_dict(adm) if adm else None,
            radiology_notes=tuple(d.get("radiology_notes") or ()),
        )


@dataclass(frozen=True)
class Corpus:
    records: tuple[DischargeRecord, ...]
    split_label: str = "train"
    skipped_empty: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.split_label not in SPLITS:
            raise ValidationError(f"split_label must be one of {SPLITS}, got {self.split_label!r}")
        dupes = sorted(k for k, v in Counter(r.hadm_id for r in self.records).items() if v > 1)
        if dupes:
            raise ValidationError(f"duplicate hadm_id values: {', '.join(dupes)}")
        for r in self.records:
            if not r.hadm_id:
                raise ValidationError("empty hadm_id")
            if not r.text:
                raise ValidationError(f"record {r.hadm_id} has empty text")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DischargeRecord]:
        return iter(self.records)

    def by_id(self) -> dict[str, DischargeRecord]:
        return {r.hadm_id: r for r in self.records}

    def write_jsonl(self, fh: io.TextIOBase) -> None:
        for r in self.records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    def to_jsonl(self) -> str:
        buf = io.StringIO()
        self.write_jsonl(buf)
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, lines: Iterable[str], split_label: str = "train") -> "Corpus":
        records = [DischargeRecord.from_dict(json.loads(line)) for line in lines if line.strip()]
        return cls(records=tuple(records), split_label=split_label)


def read_corpus_jsonl(path: str | Path, split_label: str = "train") -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return Corpus.from_jsonl(fh, split_label=split_label)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def read_csv_rows(path: str | Path, required: Sequence[str] = ()) -> list[dict[str, str]]:
    """Read an RFC 4180 CSV (quoted multi-line fields allowed) into dict rows."""
    path = Path(path)
    csv.field_size_limit(sys.maxsize)
    with _open_text(path) as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise SchemaError(col, str(path))
        return list(reader)


def load_column_mapping(path: str | Path | None = None) -> dict[str, dict[str, str]]:
    mapping = {t: dict(cols) for t, cols in DEFAULT_COLUMNS.items()}
    if path is None:
        return mapping
    with open(path, encoding="utf-8") as fh:
        override = json.load(fh)
    for table, cols in override.items():
        if table not in mapping:
            raise ConfigurationError(f"unknown aux table {table!r} in column mapping")
        for logical, column in cols.items():
            if logical not in mapping[table]:
                raise ConfigurationError(f"unknown field {logical!r} for aux table {table!r}")
            mapping[table][logical] = column
    return mapping


def _parse_ts(value: str, table: str, row: int, column: str) -> datetime:
    try:
        return datetime.fromisoformat(value.strip())
    except (ValueError, AttributeError):
        raise ValidationError(f"{table} row {row}: unparsable timestamp {value!r} in column {column!r}") from None


class AuxTables:
    """Auxiliary admission tables indexed by admission (and subject) id.

    ``tables`` maps table name to its rows; columns are resolved through
    ``mapping`` (see :data:`DEFAULT_COLUMNS`). Rows keep their 1-based position
    for error messages.
    """

    def __init__(self, tables: Mapping[str, Sequence[Mapping[str, str]]], mapping=None):
        self.mapping = mapping or load_column_mapping()
        self.tables = {k: list(v) for k, v in tables.items()}
        for name in self.tables:
            if name not in self.mapping:
                raise ConfigurationError(f"unknown aux table {name!r}")
        self._by_hadm: dict[str, dict[str, list[tuple[int, Mapping[str, str]]]]] = {}
        self._patients: dict[str, tuple[int, Mapping[str, str]]] = {}
        for name, rows in self.tables.items():
            cols = self.mapping[name]
            if rows:
                header = rows[0].keys()
                for column in cols.values():
                    if column not in header and not (name == "diagnoses" and column == cols["seq_num"]):
                        raise SchemaError(column, f"aux table {name}")
            if name == "patients":
                for i, row in enumerate(rows, start=1):
                    self._patients[str(row[cols["subject_id"]])] = (i, row)
            else:
                index = self._by_hadm.setdefault(name, {})
                for i, row in enumerate(rows, start=1):
                    index.setdefault(str(row[cols["hadm_id"]]), []).append((i, row))

    @classmethod
    def from_paths(cls, paths: Mapping[str, str | Path], mapping=None) -> "AuxTables":
        mapping = mapping or load_column_mapping()
        return cls({name: read_csv_rows(p) for name, p in paths.items()}, mapping)

    def has(self, table: str) -> bool:
        return table in self.tables

    def rows(self, table: str, hadm_id: str) -> list[tuple[int, Mapping[str, str]]]:
        return self._by_hadm.get(table, {}).get(hadm_id, [])

    def patient(self, subject_id: str) -> tuple[int, Mapping[str, str]] | None:
        return self._patients.get(subject_id)

    def col(self, table: str, field_name: str) -> str:
        return self.mapping[table][field_name]

    def radiology_notes(self, hadm_id: str) -> tuple[str, ...]:
        if not self.has("radiology"):
            return ()
        col = self.col("radiology", "text")
        return tuple(row[col] for _, row in self.rows("radiology", hadm_id) if row[col].strip())


def aggregate_patient_context(record_id: str, aux: AuxTables) -> PatientAdmissionSummary:
    """Aggregate demographics, diagnoses and transfers for one admission."""
    adm_rows = aux.rows("admissions", record_id)
    if not adm_rows:
        raise NotFoundError(f"admission {record_id!r} not found in admissions table")
    row_no, adm = adm_rows[0]
    c = lambda f: aux.col("admissions", f)  # noqa: E731
    admit = _parse_ts(adm[c("admittime")], "admissions", row_no, c("admittime"))
    disch = _parse_ts(adm[c("dischtime")], "admissions", row_no, c("dischtime"))
    stay_hours = (disch - admit).total_seconds() / 3600.0
    if stay_hours < 0:
        raise ValidationError(f"admissions row {row_no}: discharge precedes admission")

    gender, age = "", 0
    if aux.has("patients"):
        found = aux.patient(str(adm[c("subject_id")]))
        if found is None:
            raise NotFoundError(f"subject {adm[c('subject_id')]!r} of admission {record_id!r} not in patients table")
        p_row, patient = found
        pc = lambda f: aux.col("patients", f)  # noqa: E731
        gender = patient[pc("gender")]
        try:
            anchor_age = int(float(patient[pc("anchor_age")]))
            anchor_year = int(float(patient[pc("anchor_year")]))
        except ValueError:
            raise ValidationError(f"patients row {p_row}: non-numeric anchor_age/anchor_year") from None
        age = min(MAX_AGE, max(0, anchor_age + (admit.year - anchor_year)))

    diagnoses: list[str] = []
    if aux.has("diagnoses"):
        desc = aux.col("diagnoses", "description")
        seq = aux.col("diagnoses", "seq_num")
        drows = aux.rows("diagnoses", record_id)

        def seq_key(item):
            i, row = item
            try:
                return float(row.get(seq, "")), i
            except ValueError:
                return float("inf"), i

        diagnoses = [row[desc] for _, row in sorted(drows, key=seq_key) if row[desc].strip()]

    transfers: list[str] = []
    if aux.has("transfers"):
        tc = lambda f: aux.col("transfers", f)  # noqa: E731
        keyed = []
        for i, row in aux.rows("transfers", record_id):
            t_in = _parse_ts(row[tc("intime")], "transfers", i, tc("intime"))
            out_raw = row[tc("outtime")].strip()
            t_out = _parse_ts(out_raw, "transfers", i, tc("outtime")) if out_raw else datetime.max
            line = " ".join(x for x in (row[tc("intime")].strip(), row[tc("eventtype")].strip(), row[tc("careunit")].strip()) if x)
            keyed.append(((t_in, t_out, row[tc("careunit")], row[tc("eventtype")]), line))
        transfers = [line for _, line in sorted(keyed)]

    return PatientAdmissionSummary(
        gender=gender,
        race=adm.get(c("race"), ""),
        age_years=age,
        diagnoses=tuple(diagnoses),
        transfer_summary=tuple(transfers),
        stay_duration_hours=stay_hours,
    )


def load_corpus(
    discharge_path: str | Path,
    aux_paths: Mapping[str, str | Path] | None = None,
    mapping=None,
    split_label: str = "train",
) -> Corpus:
    """Load a discharge CSV (columns ``hadm_id`` and ``text`` at minimum).

    Other columns are ignored. Rows with empty text are skipped and counted in
    ``Corpus.skipped_empty``.
    """
    rows = read_csv_rows(discharge_path, required=("hadm_id", "text"))
    aux = AuxTables.from_paths(aux_paths, mapping) if aux_paths else None

    ids = Counter(str(r["hadm_id"]).strip() for r in rows if (r["text"] or "").strip())
    dupes = sorted(k for k, v in ids.items() if v > 1)
    if dupes:
        raise ValidationError(f"duplicate hadm_id values: {', '.join(dupes)}")

    records = []
    skipped = 0
    for row in rows:
        text = row["text"] or ""
        if not text.strip():
            skipped += 1
            continue
        hid = str(row["hadm_id"]).strip()
        admission = None
        notes: tuple[str, ...] = ()
        if aux is not None:
            if aux.has("admissions"):
                try:
                    admission = aggregate_patient_context(hid, aux)
                except NotFoundError as exc:
                    log.warning("no admission context for %s: %s", hid, exc)
            notes = aux.radiology_notes(hid)
        records.append(DischargeRecord(hadm_id=hid, text=text, admission=admission, radiology_notes=notes))
    if skipped:
        log.info("skipped %d rows with empty text", skipped)
    return Corpus(records=tuple(records), split_label=split_label, skipped_empty=skipped)


def backfill_imaging(sectioned: SectionedLetter, radiology_notes: Sequence[str]) -> SectionedLetter:
    """Fill an empty or missing imaging section from radiology notes."""
    current = sectioned.sections.get(IMAGING, "")
    if current.strip() or not radiology_notes:
        return sectioned
    return sectioned.with_section(IMAGING, "\n".join(radiology_notes))


AUX_SECTIONS = {
    "patient_admissions": PatientAdmissionSummary.render_admission,
    "diagnoses": PatientAdmissionSummary.render_diagnoses,
    "transfer_summary": PatientAdmissionSummary.render_transfers,
}


def resolve_section(name: str, letter: SectionedLetter, admission: PatientAdmissionSummary | None = None) -> str | None:
    """Body of section ``name``, preferring aggregated aux data for aux-derived sections."""
    if admission is not None and name in AUX_SECTIONS:
        rendered = AUX_SECTIONS[name](admission)
        if rendered.strip():
            return rendered
    return letter.sections.get(name)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


__all__ = [
    "AuxTables",
    "Corpus",
    "DEFAULT_COLUMNS",
    "DischargeRecord",
    "PatientAdmissionSummary",
    "aggregate_patient_context",
    "backfill_imaging",
    "load_column_mapping",
    "load_corpus",
    "read_corpus_jsonl",
    "read_csv_rows",
    "resolve_section",
]
