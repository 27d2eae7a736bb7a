"""Per-site mammogram metadata schema and embedded store.

Each grid node keeps four keyed tables (patients, studies, images,
annotations) of immutable record values plus a monotonic data version that
bumps exactly once per ingest batch that accepts at least one line.
Ingestion is line-atomic JSONL: a bad line is rejected with a reason and
never partially applied, while the good lines around it still land.

Readers take consistent snapshots identified by the data version; the
store itself is single-writer, multiple-reader.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import date
from typing import Any, Iterable, NamedTuple, Optional

ENTITIES = ("patients", "studies", "images", "annotations")

ENTITY_SINGULAR = {
    "patients": "patient",
    "studies": "study",
    "images": "image",
    "annotations": "annotation",
}
SINGULAR_TO_PLURAL = {v: k for k, v in ENTITY_SINGULAR.items()}

# Upward reference chain: child entity -> (parent entity, reference field).
UPWARD_REF = {
    "annotations": ("images", "image_id"),
    "images": ("studies", "study_id"),
    "studies": ("patients", "patient_id"),
}

VIEWS = ("CC", "MLO")
LATERALITIES = ("L", "R")
DIAGNOSES = ("normal", "benign", "cancer")
DIAGNOSED_LATERALITIES = ("left", "right")
THERAPY_OUTCOMES = ("successful", "unsuccessful")
READINGS = ("first", "second")
ANNOTATION_KINDS = ("mass", "microcalcification_cluster")
FEATURE_VECTOR_LEN = 8

# Author value marking a CAD-generated annotation; anything else is a
# radiologist identifier.
CAD_AUTHOR = "cad"


class RecordError(ValueError):
    """A record fails schema validation."""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age_years: int
    children_count: int
    age_first_pregnancy: Optional[int]
    age_last_pregnancy: Optional[int]
    hrt: bool
    hrt_start: Optional[date]
    site_id: str


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    patient_id: str
    study_date: date
    reader_ids: tuple[str, ...]
    diagnosis: Optional[str]
    diagnosed_laterality: Optional[str]
    therapy_outcome: Optional[str]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    study_id: str
    laterality: str
    view: str
    breast_area_mm2: float
    mean_density: float
    feature_vector: tuple[float, ...]


@dataclass(frozen=True)
class AnnotationRecord:
    annotation_id: str
    image_id: str
    author: str
    kind: str
    regions: tuple[tuple[float, float, float, float], ...]
    microcalc_count: Optional[int]
    session_length_min: Optional[float]
    serial_order: Optional[int]
    reading: Optional[str]
    author_experience_years: Optional[int]


ID_FIELD = {
    "patients": "patient_id",
    "studies": "study_id",
    "images": "image_id",
    "annotations": "annotation_id",
}

# Attribute-path vocabulary: path -> (entity, field, kind). `kind` drives
# comparison semantics; "list" fields are projection-only.
SCHEMA_PATHS: dict[str, tuple[str, str, str]] = {
    "patient.patient_id": ("patients", "patient_id", "str"),
    "patient.age_years": ("patients", "age_years", "int"),
    "patient.children_count": ("patients", "children_count", "int"),
    "patient.age_first_pregnancy": ("patients", "age_first_pregnancy", "int"),
    "patient.age_last_pregnancy": ("patients", "age_last_pregnancy", "int"),
    "patient.hrt": ("patients", "hrt", "bool"),
    "patient.hrt_start": ("patients", "hrt_start", "date"),
    "patient.site_id": ("patients", "site_id", "str"),
    "study.study_id": ("studies", "study_id", "str"),
    "study.patient_id": ("studies", "patient_id", "str"),
    "study.study_date": ("studies", "study_date", "date"),
    "study.reader_ids": ("studies", "reader_ids", "list"),
    "study.diagnosis": ("studies", "diagnosis", "str"),
    "study.diagnosed_laterality": ("studies", "diagnosed_laterality", "str"),
    "study.therapy_outcome": ("studies", "therapy_outcome", "str"),
    "image.image_id": ("images", "image_id", "str"),
    "image.study_id": ("images", "study_id", "str"),
    "image.laterality": ("images", "laterality", "str"),
    "image.view": ("images", "view", "str"),
    "image.breast_area_mm2": ("images", "breast_area_mm2", "real"),
    "image.mean_density": ("images", "mean_density", "real"),
    "image.feature_vector": ("images", "feature_vector", "list"),
    "annotation.annotation_id": ("annotations", "annotation_id", "str"),
    "annotation.image_id": ("annotations", "image_id", "str"),
    "annotation.author": ("annotations", "author", "str"),
    "annotation.kind": ("annotations", "kind", "str"),
    "annotation.regions": ("annotations", "regions", "list"),
    "annotation.microcalc_count": ("annotations", "microcalc_count", "int"),
    "annotation.session_length_min": ("annotations", "session_length_min", "real"),
    "annotation.serial_order": ("annotations", "serial_order", "int"),
    "annotation.reading": ("annotations", "reading", "str"),
    "annotation.author_experience_years": ("annotations", "author_experience_years", "int"),
}

# Field order used by ALL projections.
PROJECTION_ORDER: dict[str, tuple[str, ...]] = {
    "patients": (
        "patient.patient_id",
        "patient.age_years",
        "patient.children_count",
        "patient.age_first_pregnancy",
        "patient.age_last_pregnancy",
        "patient.hrt",
        "patient.hrt_start",
        "patient.site_id",
    ),
    "studies": (
        "study.study_id",
        "study.patient_id",
        "study.study_date",
        "study.reader_ids",
        "study.diagnosis",
        "study.diagnosed_laterality",
        "study.therapy_outcome",
    ),
    "images": (
        "image.image_id",
        "image.study_id",
        "image.laterality",
        "image.view",
        "image.breast_area_mm2",
        "image.mean_density",
        "image.feature_vector",
    ),
    "annotations": (
        "annotation.annotation_id",
        "annotation.image_id",
        "annotation.author",
        "annotation.kind",
        "annotation.regions",
        "annotation.microcalc_count",
        "annotation.session_length_min",
        "annotation.serial_order",
        "annotation.reading",
        "annotation.author_experience_years",
    ),
}


def path_entity(path: str) -> str:
    """Entity (plural) an attribute path belongs to."""
    try:
        return SCHEMA_PATHS[path][0]
    except KeyError:
        raise RecordError(f"unknown attribute path {path!r}") from None


def reachable_entities(target: str) -> tuple[str, ...]:
    """Entities resolvable from `target` rows along the upward reference chain."""
    chain = [target]
    while chain[-1] in UPWARD_REF:
        chain.append(UPWARD_REF[chain[-1]][0])
    return tuple(chain)


# ---------------------------------------------------------------------------
# Field validators


def _require(obj: dict, key: str) -> Any:
    if key not in obj or obj[key] is None:
        raise RecordError(f"missing field {key}")
    return obj[key]


def _as_str(v: Any, name: str) -> str:
    if not isinstance(v, str) or not v:
        raise RecordError(f"invalid {name}: expected non-empty string")
    return v


def _as_int(v: Any, name: str, lo: Optional[int] = None, hi: Optional[int] = None) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecordError(f"invalid {name}: expected integer")
    if isinstance(v, float):
        if v != int(v):
            raise RecordError(f"invalid {name}: expected integer")
        v = int(v)
    if lo is not None and v < lo:
        raise RecordError(f"invalid {name}={v}: below {lo}")
    if hi is not None and v > hi:
        raise RecordError(f"invalid {name}={v}: above {hi}")
    return v


def _as_real(v: Any, name: str, lo: Optional[float] = None, hi: Optional[float] = None,
             strict_lo: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecordError(f"invalid {name}: expected number")
    x = float(v)
    if x != x or x in (float("inf"), float("-inf")):
        raise RecordError(f"invalid {name}: not finite")
    if lo is not None and (x < lo or (strict_lo and x == lo)):
        raise RecordError(f"invalid {name}={x}: out of range")
    if hi is not None and x > hi:
        raise RecordError(f"invalid {name}={x}: out of range")
    return x


def _as_bool(v: Any, name: str) -> bool:
    if not isinstance(v, bool):
        raise RecordError(f"invalid {name}: expected boolean")
    return v


def _as_date(v: Any, name: str) -> date:
    if not isinstance(v, str):
        raise RecordError(f"invalid {name}: expected YYYY-MM-DD string")
    try:
        return date.fromisoformat(v)
    except ValueError:
        raise RecordError(f"invalid {name}: expected YYYY-MM-DD string") from None


def _as_enum(v: Any, name: str, allowed: tuple[str, ...]) -> str:
    if v not in allowed:
        raise RecordError(f"invalid {name}={v!r}: expected one of {', '.join(allowed)}")
    return v


def _opt(obj: dict, key: str, fn, *args) -> Any:
    v = obj.get(key)
    if v is None:
        return None
    return fn(v, key, *args)


# ---------------------------------------------------------------------------
# Entity parsers (shape + intra-record invariants)


def parse_patient(obj: dict, site_id: str) -> PatientRecord:
    pid = _as_str(_require(obj, "patient_id"), "patient_id")
    age = _as_int(_require(obj, "age_years"), "age_years", 0, 130)
    children = _as_int(_require(obj, "children_count"), "children_count", 0)
    first = _opt(obj, "age_first_pregnancy", _as_int, 0, 130)
    last = _opt(obj, "age_last_pregnancy", _as_int, 0, 130)
    if children == 0 and (first is not None or last is not None):
        raise RecordError("pregnancy ages present with children_count=0")
    if first is not None and last is not None and first > last:
        raise RecordError("age_first_pregnancy exceeds age_last_pregnancy")
    hrt = _as_bool(_require(obj, "hrt"), "hrt")
    hrt_start = _opt(obj, "hrt_start", _as_date)
    rec_site = obj.get("site_id", site_id)
    if rec_site != site_id:
        raise RecordError(f"site mismatch: record says {rec_site!r}, store is {site_id!r}")
    return PatientRecord(pid, age, children, first, last, hrt, hrt_start, site_id)


def parse_study(obj: dict) -> StudyRecord:
    sid = _as_str(_require(obj, "study_id"), "study_id")
    pid = _as_str(_require(obj, "patient_id"), "patient_id")
    sdate = _as_date(_require(obj, "study_date"), "study_date")
    readers_raw = obj.get("reader_ids", [])
    if not isinstance(readers_raw, list):
        raise RecordError("invalid reader_ids: expected list")
    readers = tuple(_as_str(r, "reader_ids entry") for r in readers_raw)
    diagnosis = _opt(obj, "diagnosis", _as_enum, DIAGNOSES)
    laterality = _opt(obj, "diagnosed_laterality", _as_enum, DIAGNOSED_LATERALITIES)
    outcome = _opt(obj, "therapy_outcome", _as_enum, THERAPY_OUTCOMES)
    if (diagnosis == "cancer") != (laterality is not None):
        raise RecordError("diagnosed_laterality required exactly when diagnosis=cancer")
    return StudyRecord(sid, pid, sdate, readers, diagnosis, laterality, outcome)


def parse_image(obj: dict) -> ImageRecord:
    iid = _as_str(_require(obj, "image_id"), "image_id")
    sid = _as_str(_require(obj, "study_id"), "study_id")
    lat = _as_enum(_require(obj, "laterality"), "laterality", LATERALITIES)
    view = _as_enum(_require(obj, "view"), "view", VIEWS)
    area = _as_real(_require(obj, "breast_area_mm2"), "breast_area_mm2", 0.0, None, strict_lo=True)
    density = _as_real(_require(obj, "mean_density"), "mean_density", 0.0, 1.0)
    fv_raw = _require(obj, "feature_vector")
    if not isinstance(fv_raw, list) or len(fv_raw) != FEATURE_VECTOR_LEN:
        raise RecordError(f"invalid feature_vector: expected {FEATURE_VECTOR_LEN} numbers")
    fv = tuple(_as_real(x, "feature_vector entry") for x in fv_raw)
    return ImageRecord(iid, sid, lat, view, area, density, fv)


def parse_annotation(obj: dict) -> AnnotationRecord:
    aid = _as_str(_require(obj, "annotation_id"), "annotation_id")
    iid = _as_str(_require(obj, "image_id"), "image_id")
    author = _as_str(_require(obj, "author"), "author")
    kind = _as_enum(_require(obj, "kind"), "kind", ANNOTATION_KINDS)
    regions_raw = obj.get("regions", [])
    if not isinstance(regions_raw, list):
        raise RecordError("invalid regions: expected list of [x0,y0,x1,y1]")
    regions = []
    for r in regions_raw:
        if not isinstance(r, list) or len(r) != 4:
            raise RecordError("invalid region: expected [x0,y0,x1,y1]")
        x0, y0, x1, y1 = (_as_real(c, "region coordinate") for c in r)
        if not (x0 < x1 and y0 < y1):
            raise RecordError("invalid region: needs positive area")
        regions.append((x0, y0, x1, y1))
    count = _opt(obj, "microcalc_count", _as_int, 0)
    if kind == "microcalcification_cluster" and count is None:
        raise RecordError("microcalc_count required for microcalcification_cluster")
    if kind != "microcalcification_cluster" and count is not None:
        raise RecordError("microcalc_count only valid for microcalcification_cluster")
    session = _opt(obj, "session_length_min", _as_real, 0.0)
    serial = _opt(obj, "serial_order", _as_int, 1)
    reading = _opt(obj, "reading", _as_enum, READINGS)
    exp = _opt(obj, "author_experience_years", _as_int, 0)
    return AnnotationRecord(aid, iid, author, kind, tuple(regions), count,
                            session, serial, reading, exp)


# ---------------------------------------------------------------------------
# Store


class StoreSnapshot(NamedTuple):
    """Immutable view of a store at one data version. Tables must not be mutated."""

    site_id: str
    tables: dict[str, dict[str, Any]]
    version: int


@dataclass(frozen=True)
class IngestReport:
    accepted: int
    rejected: tuple[tuple[int, str], ...]
    new_version: int


class SiteStore:
    """Embedded per-site store: four keyed tables plus a data version.

    Mutation happens only through ingest; each batch is copy-on-write and
    commits with a single version bump, so snapshots taken by readers stay
    internally consistent forever.
    """

    def __init__(self, site_id: str):
        self.site_id = site_id
        self._tables: dict[str, dict[str, Any]] = {e: {} for e in ENTITIES}
        self._version = 0
        self._read_lock = threading.Lock()
        self._write_lock = threading.Lock()

    def snapshot(self) -> StoreSnapshot:
        with self._read_lock:
            return StoreSnapshot(self.site_id, self._tables, self._version)

    def data_version(self) -> int:
        with self._read_lock:
            return self._version

    def get_entity(self, entity: str, record_id: str) -> Any:
        """Record with that id in the named table, or None."""
        if entity not in ENTITIES:
            raise RecordError(f"unknown entity {entity!r}")
        with self._read_lock:
            return self._tables[entity].get(record_id)

    def counts(self) -> dict[str, int]:
        snap = self.snapshot()
        return {e: len(snap.tables[e]) for e in ENTITIES}

    def ingest_lines(self, lines: Iterable[str]) -> IngestReport:
        """Ingest a JSONL stream: one entity-tagged JSON object per line.

        Lines are validated against the store state including lines already
        accepted in this batch, so a study may follow its patient in the
        same stream.
        """
        with self._write_lock:
            staged = {e: dict(self._tables[e]) for e in ENTITIES}
            accepted = 0
            rejected: list[tuple[int, str]] = []
            for line_no, line in enumerate(lines, start=1):
                text = line.strip()
                if not text:
                    continue
                try:
                    self._apply_line(staged, text)
                    accepted += 1
                except RecordError as exc:
                    rejected.append((line_no, str(exc)))
            with self._read_lock:
                if accepted > 0:
                    self._tables = staged
                    self._version += 1
                new_version = self._version
        return IngestReport(accepted, tuple(rejected), new_version)

    def ingest_path(self, path) -> IngestReport:
        with open(path, "r", encoding="utf-8") as fh:
            return self.ingest_lines(fh)

    # -- internals --

    def _apply_line(self, staged: dict[str, dict[str, Any]], text: str) -> None:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RecordError(f"bad json: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise RecordError("bad json: expected object")
        entity = obj.get("entity")
        if entity not in SINGULAR_TO_PLURAL:
            raise RecordError(f"unknown entity tag {entity!r}")
        table = SINGULAR_TO_PLURAL[entity]

        if table == "patients":
            rec = parse_patient(obj, self.site_id)
        elif table == "studies":
            rec = parse_study(obj)
            if rec.patient_id not in staged["patients"]:
                raise RecordError(f"dangling reference patient_id={rec.patient_id}")
        elif table == "images":
            rec = parse_image(obj)
            if rec.study_id not in staged["studies"]:
                raise RecordError(f"dangling reference study_id={rec.study_id}")
            for other in staged["images"].values():
                if (other.study_id == rec.study_id and other.laterality == rec.laterality
                        and other.view == rec.view):
                    raise RecordError(
                        f"duplicate laterality/view {rec.laterality}/{rec.view}"
                        f" for study {rec.study_id}")
        else:
            rec = parse_annotation(obj)
            if rec.image_id not in staged["images"]:
                raise RecordError(f"dangling reference image_id={rec.image_id}")

        rec_id = getattr(rec, ID_FIELD[table])
        if rec_id in staged[table]:
            raise RecordError("duplicate")
        staged[table][rec_id] = rec


def ingest_records(store: SiteStore, source: Iterable[str]) -> IngestReport:
    """Module-level convenience wrapper over SiteStore.ingest_lines."""
    return store.ingest_lines(source)


def data_version(store: SiteStore) -> int:
    return store.data_version()


def get_entity(store: SiteStore, entity: str, record_id: str) -> Any:
    return store.get_entity(entity, record_id)
