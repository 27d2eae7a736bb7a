"""Clinical study machinery: reader allocation, disagreement metrics,
contralateral-cancer cohort extraction, and correlation.

Reader allocation is blocked randomization over the three unordered pairs
of a three-reader panel: each block holds every pair exactly once, shuffled
by a seeded xorshift64* generator (the normative PRNG, so allocations are
bit-reproducible across runs and implementations). Pair counts can never
drift further than one apart.

Mass disagreement is the exact area of the symmetric difference of the two
readers' region unions, computed by coordinate-compression sweep; the
microcalcification metric is the absolute count difference.
"""

from __future__ import annotations

import csv
import io
import math
import threading
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Optional, Sequence

from . import records

Rect = tuple[float, float, float, float]


class AllocationError(ValueError):
    """Patient already allocated, or the panel is malformed."""


class Xorshift64Star:
    """xorshift64* with the 2685821657736338717 multiplier; seed 0 is
    remapped to a fixed odd constant (the raw generator would stick at 0)."""

    MULTIPLIER = 0x2545F4914F6CDD1D
    ZERO_SEED = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self._state = (seed & ((1 << 64) - 1)) or self.ZERO_SEED

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & ((1 << 64) - 1)
        x ^= x >> 27
        self._state = x
        return (x * self.MULTIPLIER) & ((1 << 64) - 1)

    def shuffle(self, items: list) -> None:
        """Fisher-Yates driven by next_u64 % (i + 1)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


class AllocationState:
    """Blocked randomization of patients onto reader pairs.

    Blocks of three contain each unordered pair once; intra-block order is
    drawn from the seeded PRNG. One state instance serves one screening
    desk, so access is serialized internally.
    """

    def __init__(self, readers: Sequence[str] = ("R1", "R2", "R3"), seed: int = 0):
        if len(readers) != 3 or len(set(readers)) != 3:
            raise AllocationError("the panel must be exactly three distinct readers")
        self.readers = tuple(readers)
        self.pairs = tuple(combinations(sorted(self.readers), 2))
        self.rng_seed = seed
        self._rng = Xorshift64Star(seed)
        self.pair_counts: dict[tuple[str, str], int] = {p: 0 for p in self.pairs}
        self.assignments: dict[str, tuple[str, str]] = {}
        self._block: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def allocate(self, patient_id: str) -> tuple[str, str]:
        with self._lock:
            if patient_id in self.assignments:
                raise AllocationError(f"patient {patient_id!r} already allocated")
            if not self._block:
                block = list(self.pairs)
                self._rng.shuffle(block)
                self._block = block
            pair = self._block.pop(0)
            self.pair_counts[pair] += 1
            self.assignments[patient_id] = pair
            return pair

    def counts_snapshot(self) -> dict[str, int]:
        with self._lock:
            return {f"{a}+{b}": n for (a, b), n in self.pair_counts.items()}


def allocate_reader_pair(state: AllocationState, patient_id: str) -> tuple[tuple[str, str], AllocationState]:
    """Functional-style wrapper: returns (pair, state). State mutates in place."""
    return state.allocate(patient_id), state


# ---------------------------------------------------------------------------
# Disagreement metrics


def _covers(rect: Rect, x: float, y: float) -> bool:
    return rect[0] <= x and x < rect[2] and rect[1] <= y and y < rect[3]


def _cell_covered(rects: Sequence[Rect], x0: float, x1: float, y0: float, y1: float) -> bool:
    # Coordinates are compressed, so a cell is entirely inside or outside
    # every rectangle; testing the lower corner suffices.
    return any(r[0] <= x0 and x1 <= r[2] and r[1] <= y0 and y1 <= r[3] for r in rects)


def symmetric_difference_area(regions_a: Sequence[Rect], regions_b: Sequence[Rect]) -> float:
    """Exact area covered by exactly one of the two region unions (mm^2)."""
    for r in list(regions_a) + list(regions_b):
        if not (r[0] < r[2] and r[1] < r[3]):
            raise ValueError(f"rectangle {r} needs positive area")
    xs = sorted({c for r in list(regions_a) + list(regions_b) for c in (r[0], r[2])})
    ys = sorted({c for r in list(regions_a) + list(regions_b) for c in (r[1], r[3])})
    area = 0.0
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            in_a = _cell_covered(regions_a, xs[i], xs[i + 1], ys[j], ys[j + 1])
            in_b = _cell_covered(regions_b, xs[i], xs[i + 1], ys[j], ys[j + 1])
            if in_a != in_b:
                area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
    return area


def mass_disagreement(regions_a: Sequence[Rect], regions_b: Sequence[Rect]) -> float:
    return symmetric_difference_area(regions_a, regions_b)


def microcalc_disagreement(count_a: int, count_b: int) -> int:
    return abs(count_a - count_b)


# ---------------------------------------------------------------------------
# Per-image disagreement report (quality-control survey)


@dataclass(frozen=True)
class ReaderMarks:
    reader: str
    mass_regions: tuple[Rect, ...]
    microcalc_count: int
    session_length_min: Optional[float] = None
    serial_order: Optional[int] = None
    reading: Optional[str] = None
    experience_years: Optional[int] = None


@dataclass(frozen=True)
class DisagreementRow:
    image_id: str
    reader_a: str
    reader_b: str
    mass_area_mm2: float
    microcalc_count_diff: int
    # Metrics against the CAD annotation, one pair per reader; None when the
    # image has no CAD marks.
    vs_cad: Optional[dict[str, tuple[float, int]]]
    covariates: dict[str, dict[str, Optional[float]]] = field(default_factory=dict)


def _marks_from_annotations(annotations: list) -> dict[str, ReaderMarks]:
    """Collapse a list of AnnotationRecord-likes per author."""
    by_author: dict[str, list] = {}
    for a in annotations:
        by_author.setdefault(a.author, []).append(a)
    out = {}
    for author, items in by_author.items():
        items = sorted(items, key=lambda a: a.annotation_id)
        regions = tuple(r for a in items if a.kind == "mass" for r in a.regions)
        count = sum(a.microcalc_count or 0 for a in items
                    if a.kind == "microcalcification_cluster")
        first = items[0]
        out[author] = ReaderMarks(author, regions, count, first.session_length_min,
                                  first.serial_order, first.reading,
                                  first.author_experience_years)
    return out


def disagreement_report(annotations_by_image: dict[str, list]) -> list[DisagreementRow]:
    """Rows for every image with at least two radiologist readers.

    The two compared readers are the first two in identifier order; CAD
    marks, when present, are compared against each reader separately.
    """
    rows = []
    for image_id in sorted(annotations_by_image):
        marks = _marks_from_annotations(annotations_by_image[image_id])
        cad = marks.pop(records.CAD_AUTHOR, None)
        readers = sorted(marks)
        if len(readers) < 2:
            continue
        a, b = marks[readers[0]], marks[readers[1]]
        vs_cad = None
        if cad is not None:
            vs_cad = {
                a.reader: (mass_disagreement(a.mass_regions, cad.mass_regions),
                           microcalc_disagreement(a.microcalc_count, cad.microcalc_count)),
                b.reader: (mass_disagreement(b.mass_regions, cad.mass_regions),
                           microcalc_disagreement(b.microcalc_count, cad.microcalc_count)),
            }
        covariates = {
            m.reader: {
                "session_length_min": m.session_length_min,
                "serial_order": m.serial_order,
                "reading": m.reading,
                "experience_years": m.experience_years,
            }
            for m in (a, b)
        }
        rows.append(DisagreementRow(
            image_id, a.reader, b.reader,
            mass_disagreement(a.mass_regions, b.mass_regions),
            microcalc_disagreement(a.microcalc_count, b.microcalc_count),
            vs_cad, covariates))
    return rows


_REPORT_HEADER = (
    "image_id", "reader_a", "reader_b", "mass_area_mm2", "microcalc_count_diff",
    "cad_mass_area_a", "cad_count_diff_a", "cad_mass_area_b", "cad_count_diff_b",
    "experience_a", "experience_b", "session_length_a", "session_length_b",
    "serial_order_a", "serial_order_b", "reading_a", "reading_b",
)


def report_csv(rows: list[DisagreementRow]) -> str:
    """RFC-4180 rendering with a header row (the correlation input format)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_REPORT_HEADER)
    for row in rows:
        cad_a = row.vs_cad.get(row.reader_a) if row.vs_cad else None
        cad_b = row.vs_cad.get(row.reader_b) if row.vs_cad else None
        cov_a = row.covariates.get(row.reader_a, {})
        cov_b = row.covariates.get(row.reader_b, {})
        writer.writerow([
            row.image_id, row.reader_a, row.reader_b,
            row.mass_area_mm2, row.microcalc_count_diff,
            cad_a[0] if cad_a else "", cad_a[1] if cad_a else "",
            cad_b[0] if cad_b else "", cad_b[1] if cad_b else "",
            _blank(cov_a.get("experience_years")), _blank(cov_b.get("experience_years")),
            _blank(cov_a.get("session_length_min")), _blank(cov_b.get("session_length_min")),
            _blank(cov_a.get("serial_order")), _blank(cov_b.get("serial_order")),
            _blank(cov_a.get("reading")), _blank(cov_b.get("reading")),
        ])
    return buf.getvalue()


def _blank(v):
    return "" if v is None else v


# ---------------------------------------------------------------------------
# Contralateral cohort


@dataclass(frozen=True)
class StudyView:
    """The study fields the cohort scan needs; site-agnostic."""

    patient_id: str
    study_date: str  # ISO text, so federated rows feed in directly
    diagnosis: Optional[str]
    diagnosed_laterality: Optional[str]
    therapy_outcome: Optional[str]


def study_view(study: records.StudyRecord) -> StudyView:
    return StudyView(study.patient_id, study.study_date.isoformat(),
                     study.diagnosis, study.diagnosed_laterality, study.therapy_outcome)


_OPPOSITE = {"left": "right", "right": "left"}


def contralateral_cohort(studies: Iterable[StudyView]) -> list[str]:
    """Patients with a successfully treated cancer followed strictly later by
    a cancer on the opposite side. Deterministic (sorted) order."""
    by_patient: dict[str, list[StudyView]] = {}
    for s in studies:
        by_patient.setdefault(s.patient_id, []).append(s)
    cohort = []
    for patient_id, items in by_patient.items():
        cancers = [s for s in items if s.diagnosis == "cancer" and s.diagnosed_laterality]
        if _has_contralateral_pair(cancers):
            cohort.append(patient_id)
    return sorted(cohort)


def _has_contralateral_pair(cancers: list[StudyView]) -> bool:
    firsts = [s for s in cancers if s.therapy_outcome == "successful"]
    for first in firsts:
        opposite = _OPPOSITE[first.diagnosed_laterality]
        for later in cancers:
            if later.study_date > first.study_date and later.diagnosed_laterality == opposite:
                return True
    return False


def cohort_csv(patient_ids: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["patient_id"])
    for pid in patient_ids:
        writer.writerow([pid])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Correlation


class CorrelationError(ValueError):
    """Pearson r is undefined for the given inputs."""


def pearson_correlation(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson r; needs two points and nonzero variance on both sides."""
    n = len(xs)
    if n != len(ys):
        raise CorrelationError("input lengths differ")
    if n < 2:
        raise CorrelationError("needs at least two points")
    mean_x = math.fsum(xs) / n
    mean_y = math.fsum(ys) / n
    dx = [x - mean_x for x in xs]
    dy = [y - mean_y for y in ys]
    var_x = math.fsum(d * d for d in dx)
    var_y = math.fsum(d * d for d in dy)
    if var_x == 0.0 or var_y == 0.0:
        raise CorrelationError("zero variance")
    cov = math.fsum(a * b for a, b in zip(dx, dy))
    r = cov / math.sqrt(var_x * var_y)
    return max(-1.0, min(1.0, r))
