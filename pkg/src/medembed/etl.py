"""Cohort extraction from raw hospital tables.

Filters, in order: MICU-only without unit transfer; age over 18; stay longer
than 12 hours; first ICU stay per patient; events restricted to the first 12
hours; codes occurring fewer than 5 times dataset-wide removed; stays with
fewer than 5 remaining events removed; events sorted by offset and truncated
to the first 150.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError

TWELVE_HOURS_MIN = 12 * 60
MAX_EVENTS = 150
MIN_EVENTS = 5
MIN_CODE_COUNT = 5

SPLIT_FRACS = (0.65, 0.15, 0.20)


@dataclass(frozen=True)
class ClinicalEvent:
    code: str
    description: str
    offset: int
    value: str | None = None
    unit: str | None = None


@dataclass
class LabelSet:
    readm: bool
    mort: bool
    los3: bool
    los7: bool
    dx: frozenset[int]

    def binary(self, task: str) -> bool:
        return {"readm": self.readm, "mort": self.mort,
                "los3": self.los3, "los7": self.los7}[task]


@dataclass
class CohortSample:
    stay_id: str
    events: list[ClinicalEvent]
    labels: LabelSet


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise InputError(f"missing raw table: {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ParseError(f"{path}:{lineno}: malformed row")
            rows.append(row)
    return rows


def _to_int(path, lineno, value) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected integer, got {value!r}")


def map_diagnosis(dx: str, hierarchy: dict[str, int]) -> int | None:
    """Exact match at the most granular level, then up the hierarchy.

    Returns a class in 1..18, or None when no level matches (entry dropped).
    """
    if not dx:
        raise InputError("empty diagnosis string")
    parts = dx.split("|")
    while parts:
        cls = hierarchy.get("|".join(parts))
        if cls is not None:
            return cls
        parts.pop()
    return None


def assign_labels(stay: dict, admission_stays: list[dict],
                  hierarchy: dict[str, int]) -> LabelSet:
    status = stay.get("discharge_status", "")
    if not status:
        raise InputError(f"stay {stay.get('stay_id')}: missing discharge status")
    los_min = int(stay["out_offset"]) - int(stay["in_offset"])
    dx_classes = set()
    for dx in stay["diagnoses"].split(";"):
        if not dx:
            continue
        cls = map_diagnosis(dx, hierarchy)
        if cls is not None:
            dx_classes.add(cls)
    return LabelSet(
        readm=len(admission_stays) > 1,
        mort=status.lower() == "expired",
        los3=los_min > 3 * 24 * 60,
        los7=los_min > 7 * 24 * 60,
        dx=frozenset(dx_classes),
    )


def load_hierarchy(path) -> dict[str, int]:
    return {r["path"]: int(r["class_id"]) for r in _read_csv(Path(path))}


def build_cohort(raw_dir) -> list[CohortSample]:
    raw = Path(raw_dir)
    stays = _read_csv(raw / "stays.csv")
    labs = _read_csv(raw / "labevents.csv")
    meds = _read_csv(raw / "medications.csv")
    infs = _read_csv(raw / "infusions.csv")
    defs = {r["code"]: r["description"] for r in _read_csv(raw / "definitions.csv")}
    hierarchy = load_hierarchy(raw / "hierarchy.csv")

    by_admission: dict[str, list[dict]] = {}
    for s in stays:
        by_admission.setdefault(s["admission_id"], []).append(s)

    # stay-level filters
    kept: list[dict] = []
    first_by_patient: dict[str, dict] = {}
    for s in stays:
        cur = first_by_patient.get(s["patient_id"])
        if cur is None or int(s["in_offset"]) < int(cur["in_offset"]):
            first_by_patient[s["patient_id"]] = s
    for s in stays:
        if s["unit_type"] != "MICU" or s["transferred"] not in ("0", "", "False"):
            continue
        if _to_int(raw / "stays.csv", 0, s["age"]) <= 18:
            continue
        if int(s["out_offset"]) - int(s["in_offset"]) <= TWELVE_HOURS_MIN:
            continue
        if first_by_patient[s["patient_id"]]["stay_id"] != s["stay_id"]:
            continue
        kept.append(s)
    kept_ids = {s["stay_id"] for s in kept}

    # event assembly, restricted to the first 12 hours
    events_by_stay: dict[str, list[ClinicalEvent]] = {sid: [] for sid in kept_ids}

    def add_event(row, value=None, unit=None):
        sid = row["stay_id"]
        if sid not in events_by_stay:
            return
        off = int(row["offset"])
        if off >= TWELVE_HOURS_MIN:
            return
        code = row["code"]
        if code not in defs:
            raise ParseError(f"unknown code {code!r} (no catalog entry)")
        events_by_stay[sid].append(
            ClinicalEvent(code=code, description=defs[code], offset=off,
                          value=value, unit=unit))

    for r in labs:
        add_event(r, value=r["value"], unit=r["unit"])
    for r in meds:
        add_event(r)
    for r in infs:
        add_event(r, value=r["rate"])

    # dataset-global code frequency filter
    counts = Counter(e.code for evs in events_by_stay.values() for e in evs)
    rare = {c for c, n in counts.items() if n < MIN_CODE_COUNT}

    samples: list[CohortSample] = []
    for s in kept:
        evs = [e for e in events_by_stay[s["stay_id"]] if e.code not in rare]
        if len(evs) < MIN_EVENTS:
            continue
        evs.sort(key=lambda e: e.offset)
        evs = evs[:MAX_EVENTS]
        labels = assign_labels(s, by_admission[s["admission_id"]], hierarchy)
        samples.append(CohortSample(s["stay_id"], evs, labels))
    return samples


# ---------------------------------------------------------------------------
# processed dataset serialization (one JSON line per stay)
# ---------------------------------------------------------------------------

def save_cohort(samples: list[CohortSample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps({
                "stay_id": s.stay_id,
                "events": [{"code": e.code, "description": e.description,
                            "offset": e.offset, "value": e.value,
                            "unit": e.unit} for e in s.events],
                "labels": {"readm": s.labels.readm, "mort": s.labels.mort,
                           "los3": s.labels.los3, "los7": s.labels.los7,
                           "dx": sorted(s.labels.dx)},
            }, sort_keys=True) + "\n")


def load_cohort(path) -> list[CohortSample]:
    samples = []
    with open(path) as f:
        for line in f:
            obj = json.loads(line)
            lab = obj["labels"]
            samples.append(CohortSample(
                stay_id=obj["stay_id"],
                events=[ClinicalEvent(**e) for e in obj["events"]],
                labels=LabelSet(readm=lab["readm"], mort=lab["mort"],
                                los3=lab["los3"], los7=lab["los7"],
                                dx=frozenset(lab["dx"])),
            ))
    return samples


@dataclass
class DatasetSplits:
    """Train/valid/test partition with a data-access audit trail.

    Access the records through `records(split, purpose)`; the log lets tests
    assert that test data never feeds training or model selection.
    """
    train: list[CohortSample]
    valid: list[CohortSample]
    test: list[CohortSample]
    access_log: list[tuple[str, str]] = field(default_factory=list)

    def records(self, split: str, purpose: str) -> list[CohortSample]:
        self.access_log.append((split, purpose))
        return {"train": self.train, "valid": self.valid, "test": self.test}[split]


def split_dataset(samples: list[CohortSample], seed: int) -> DatasetSplits:
    """Seeded shuffle, then 65/15/20 (floor for train/valid, remainder test)."""
    if len(samples) < 20:
        raise InputError("need at least 20 samples to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    n = len(samples)
    n_train = int(n * SPLIT_FRACS[0])
    n_valid = int(n * SPLIT_FRACS[1])
    return DatasetSplits(
        train=shuffled[:n_train],
        valid=shuffled[n_train:n_train + n_valid],
        test=shuffled[n_train + n_valid:],
    )
