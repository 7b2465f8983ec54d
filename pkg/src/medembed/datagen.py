"""Synthetic two-hospital EHR generator.

Both hospitals draw on one shared clinical concept set, but render disjoint
code strings and differently-phrased descriptions for each concept (the word
stems overlap, the codes never do). A per-patient latent severity drives
which events occur, their numeric values, and all outcomes through a logistic
model with known coefficients, so the prediction tasks are learnable and the
cross-hospital description semantics transfer.

Output is a directory of raw CSV tables shaped like an ICU export:
stays.csv, labevents.csv, medications.csv, infusions.csv, plus a
definitions.csv code catalog and hierarchy.csv for diagnosis grouping.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

# ---------------------------------------------------------------------------
# shared concept universe
# ---------------------------------------------------------------------------

ANALYTES = [
    "creatinine", "sodium", "potassium", "lactate", "glucose", "hemoglobin",
    "platelet", "bilirubin", "albumin", "troponin", "urea", "chloride",
    "calcium", "magnesium", "phosphate", "bicarbonate", "leukocyte",
    "lymphocyte", "neutrophil", "ammonia", "lipase", "amylase", "ferritin",
    "lactate dehydrogenase", "alkaline phosphatase", "creatine kinase",
    "fibrinogen", "procalcitonin", "cortisol", "osmolality",
]
SPECIMENS = ["blood", "serum", "plasma", "arterial", "urine"]

MED_DRUGS = [
    "aspirin", "metoprolol", "furosemide", "pantoprazole", "enoxaparin",
    "lisinopril", "amlodipine", "atorvastatin", "warfarin", "digoxin",
    "amiodarone", "levothyroxine", "prednisone", "azithromycin",
    "ceftriaxone", "piperacillin", "meropenem", "metronidazole",
    "acetaminophen", "morphine", "hydromorphone", "lorazepam", "haloperidol",
    "quetiapine", "ondansetron", "metoclopramide", "senna", "docusate",
    "spironolactone", "hydralazine", "labetalol", "clonidine", "gabapentin",
    "levetiracetam", "phenytoin", "thiamine", "folate", "potassium chloride",
    "vancomycin", "cefepime", "linezolid", "fluconazole", "insulin glargine",
    "albuterol", "ipratropium", "budesonide", "naloxone", "calcium gluconate",
]
MED_FORMS = ["tablet", "injection", "oral solution"]

INF_DRUGS = [
    "norepinephrine", "vasopressin", "dopamine", "dobutamine", "epinephrine",
    "phenylephrine", "milrinone", "insulin", "heparin", "propofol",
    "fentanyl", "midazolam", "dexmedetomidine", "ketamine", "nitroglycerin",
    "nicardipine", "esmolol", "diltiazem", "octreotide", "bicarbonate drip",
    "amiodarone drip", "furosemide drip", "cisatracurium", "rocuronium",
]
INF_KINDS = ["continuous", "titrated"]

LAB_UNITS = {
    "blood": "mg/dl", "serum": "mmol/l", "plasma": "mg/dl",
    "arterial": "mmol/l", "urine": "mg/dl",
}


@dataclass(frozen=True)
class Concept:
    key: str          # hospital-independent identity
    kind: str         # lab | med | infusion
    terms: tuple[str, ...]
    base_logit: float
    severity_gate: float
    value_mu: float = 0.0
    value_sd: float = 1.0
    value_sev: float = 0.0   # shift of the value mean per unit severity
    unit: str = ""


def _concept_universe() -> list[Concept]:
    """Deterministic concept list shared by every hospital spec."""
    rng = np.random.default_rng(20240117)
    concepts: list[Concept] = []

    for analyte in ANALYTES:
        for specimen in SPECIMENS:
            mu = float(rng.uniform(1.0, 180.0))
            sd = mu * float(rng.uniform(0.08, 0.25))
            # about a third of labs shift strongly with severity
            sev = float(rng.choice([0.0, 0.0, 1.0]) * rng.uniform(0.8, 1.6) * sd)
            concepts.append(Concept(
                key=f"lab:{analyte}:{specimen}",
                kind="lab",
                terms=(analyte, specimen),
                base_logit=float(rng.uniform(-3.2, -0.6)),
                severity_gate=float(rng.uniform(-0.2, 0.5)),
                value_mu=mu, value_sd=sd, value_sev=sev,
                unit=LAB_UNITS[specimen],
            ))

    for drug in MED_DRUGS:
        for form in MED_FORMS:
            concepts.append(Concept(
                key=f"med:{drug}:{form}",
                kind="med",
                terms=(drug, form),
                base_logit=float(rng.uniform(-4.2, -1.6)),
                severity_gate=float(rng.uniform(-0.3, 0.6)),
            ))

    for drug in INF_DRUGS:
        for kind in INF_KINDS:
            concepts.append(Concept(
                key=f"inf:{drug}:{kind}",
                kind="infusion",
                terms=(drug, kind),
                base_logit=float(rng.uniform(-5.0, -2.4)),
                # infusions are the strongest severity markers
                severity_gate=float(rng.uniform(1.2, 2.4)),
                value_mu=float(rng.uniform(2.0, 40.0)),
                value_sd=float(rng.uniform(0.5, 6.0)),
                value_sev=float(rng.uniform(0.0, 3.0)),
                unit="ml/hr",
            ))

    return concepts


CONCEPTS = _concept_universe()


# ---------------------------------------------------------------------------
# diagnosis hierarchy (18 top-level classes, 3 mids each, 4 leaves per mid)
# ---------------------------------------------------------------------------

DX_ROOTS = [
    "infection", "neoplasm", "endocrine", "hematologic", "mental",
    "neurologic", "circulatory", "respiratory", "digestive", "genitourinary",
    "pregnancy", "dermatologic", "musculoskeletal", "congenital",
    "perinatal", "symptoms", "injury", "external",
]
_DX_MIDS = ["acute", "chronic", "unspecified"]
_DX_LEAVES = ["alpha", "beta", "gamma", "delta"]


def diagnosis_hierarchy() -> dict[str, int]:
    """Map from full or partial pipe-joined path to class id in 1..18."""
    table: dict[str, int] = {}
    for ci, root in enumerate(DX_ROOTS, start=1):
        table[root] = ci
        for mid in _DX_MIDS:
            table[f"{root}|{mid}"] = ci
            for leaf in _DX_LEAVES:
                table[f"{root}|{mid}|{leaf}"] = ci
    return table


def write_hierarchy_csv(path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "class_id"])
        for p, c in sorted(diagnosis_hierarchy().items()):
            w.writerow([p, c])


# ---------------------------------------------------------------------------
# hospital specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HospitalSpec:
    name: str
    code_style: str          # "structured" | "freetext"
    n_patients: int = 3400
    seed: int = 0
    # outcome model coefficients (targets: mort ~8%, readm ~6%, los3 ~40%, los7 ~10%)
    mort_intercept: float = -3.5
    mort_slope: float = 1.9
    readm_intercept: float = -3.0
    readm_slope: float = 0.8
    los_log_mean: float = 1.02
    los_log_sev: float = 0.55
    los_log_noise: float = 0.45
    exclusion_fracs: dict = field(default_factory=lambda: {
        "minor": 0.02, "other_unit": 0.05, "transfer": 0.03, "short_stay": 0.02,
    })

    def __post_init__(self):
        if self.n_patients < 50:
            raise ConfigError("n_patients must be at least 50 (splits degenerate)")


def default_spec(which: str, seed: int | None = None) -> HospitalSpec:
    if which == "a":
        return HospitalSpec(name="hospital_a", code_style="structured",
                            seed=11 if seed is None else seed)
    if which == "b":
        return HospitalSpec(name="hospital_b", code_style="freetext",
                            seed=23 if seed is None else seed)
    raise ConfigError(f"unknown default hospital spec '{which}' (expected a|b)")


def _code_for(concept: Concept, style: str, index: int) -> str:
    if style == "structured":
        prefix = {"lab": "LAB", "med": "MED", "infusion": "INF"}[concept.kind]
        return f"{prefix}{index:04d}"
    # free-text flavored identifiers
    stem = "_".join(t.replace(" ", "") for t in concept.terms)
    return f"{concept.kind}_{stem}"


def _description_for(concept: Concept, style: str) -> str:
    a, b = concept.terms
    if concept.kind == "lab":
        return f"{a} {b} level" if style == "structured" else f"{b} {a} measurement"
    if concept.kind == "med":
        return f"{a} {b} dose" if style == "structured" else f"{a} {b} administration"
    return f"{a} infusion rate" if style == "structured" else f"{a} infusion drip"


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def generate_hospital(spec: HospitalSpec, out_dir) -> None:
    """Write raw CSV tables for one synthetic hospital. Deterministic per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    codes = {c.key: _code_for(c, spec.code_style, i) for i, c in enumerate(CONCEPTS)}
    descs = {c.key: _description_for(c, spec.code_style) for c in CONCEPTS}

    stay_rows = []
    lab_rows = []
    med_rows = []
    inf_rows = []

    stay_id = 0
    hierarchy = diagnosis_hierarchy()
    root_by_class = {v: k for k, v in hierarchy.items() if "|" not in k}

    for pid in range(spec.n_patients):
        severity = float(rng.normal())
        u = rng.random()
        excl = spec.exclusion_fracs
        minor = u < excl["minor"]
        other_unit = excl["minor"] <= u < excl["minor"] + excl["other_unit"]
        transfer = (excl["minor"] + excl["other_unit"] <= u
                    < excl["minor"] + excl["other_unit"] + excl["transfer"])
        short = (excl["minor"] + excl["other_unit"] + excl["transfer"] <= u
                 < excl["minor"] + excl["other_unit"] + excl["transfer"] + excl["short_stay"])

        age = int(rng.integers(10, 18)) if minor else int(rng.integers(19, 96))
        unit = "SICU" if other_unit else "MICU"

        mort = rng.random() < _sigmoid(spec.mort_intercept + spec.mort_slope * severity)
        readm = rng.random() < _sigmoid(spec.readm_intercept + spec.readm_slope * severity)
        los_days = math.exp(spec.los_log_mean + spec.los_log_sev * severity
                            + spec.los_log_noise * float(rng.normal()))
        los_days = max(0.55, los_days)
        if short:
            los_days = float(rng.uniform(0.1, 0.45))

        # diagnoses: 1-3 paths, severity tilts toward the first six classes
        n_dx = int(rng.integers(1, 4))
        dx_strings = []
        weights = np.ones(18)
        weights[:6] += max(0.0, severity) * 2.0
        weights /= weights.sum()
        for _ in range(n_dx):
            cls = int(rng.choice(18, p=weights)) + 1
            root = root_by_class[cls]
            mid = _DX_MIDS[int(rng.integers(len(_DX_MIDS)))]
            r = rng.random()
            if r < 0.70:
                leaf = _DX_LEAVES[int(rng.integers(len(_DX_LEAVES)))]
                dx_strings.append(f"{root}|{mid}|{leaf}")
            elif r < 0.90:
                # unknown leaf: must fall back to the mid level
                dx_strings.append(f"{root}|{mid}|novel{int(rng.integers(100))}")
            else:
                # wholly unknown entry: dropped by the mapper
                dx_strings.append(f"misc|unknown{int(rng.integers(100))}")

        stay_id += 1
        adm_id = f"{spec.name}-adm-{pid}"
        in_off = 0
        out_off = in_off + int(round(los_days * 24 * 60))
        stay_rows.append([
            f"{spec.name}-p{pid}", f"{spec.name}-s{stay_id}", adm_id, 1, unit,
            int(transfer), age, in_off, out_off,
            "Expired" if mort else "Alive", ";".join(dx_strings),
        ])
        first_stay = f"{spec.name}-s{stay_id}"

        if readm:
            stay_id += 1
            re_in = out_off + int(rng.integers(60, 24 * 60))
            re_out = re_in + int(rng.integers(13 * 60, 5 * 24 * 60))
            stay_rows.append([
                f"{spec.name}-p{pid}", f"{spec.name}-s{stay_id}", adm_id, 2, unit,
                0, age, re_in, re_out, "Alive", ";".join(dx_strings),
            ])

        # events in the first 12h of the first stay
        for concept in CONCEPTS:
            p = _sigmoid(concept.base_logit + concept.severity_gate * severity)
            if rng.random() >= p:
                continue
            n_inst = 1 + int(rng.random() < 0.35) + int(rng.random() < 0.12)
            for _ in range(n_inst):
                off = int(rng.integers(0, 720))
                code = codes[concept.key]
                if concept.kind == "lab":
                    v = concept.value_mu + concept.value_sev * severity \
                        + concept.value_sd * float(rng.normal())
                    lab_rows.append([first_stay, off, code,
                                     f"{max(v, 0.1):.1f}", concept.unit])
                elif concept.kind == "med":
                    med_rows.append([first_stay, off, code])
                else:
                    v = concept.value_mu + concept.value_sev * max(severity, 0.0) \
                        + concept.value_sd * float(rng.normal())
                    inf_rows.append([first_stay, off, code, f"{max(v, 0.1):.1f}"])

    def write(name, header, rows):
        with open(out / name, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)

    write("stays.csv",
          ["patient_id", "stay_id", "admission_id", "stay_seq", "unit_type",
           "transferred", "age", "in_offset", "out_offset", "discharge_status",
           "diagnoses"],
          stay_rows)
    write("labevents.csv", ["stay_id", "offset", "code", "value", "unit"], lab_rows)
    write("medications.csv", ["stay_id", "offset", "code"], med_rows)
    write("infusions.csv", ["stay_id", "offset", "code", "rate"], inf_rows)
    write("definitions.csv", ["code", "description", "kind"],
          [[codes[c.key], descs[c.key], c.kind] for c in CONCEPTS])
    write_hierarchy_csv(out / "hierarchy.csv")
