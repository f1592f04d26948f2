"""Longitudinal cohort data model: records, vocabularies, IO, splits, synthesis.

Patient records carry opaque code strings at rest (the JSONL schema); the
model side works on dense integer indices produced by :func:`index_cohort`.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CohortFormatError(ValueError):
    """Raised when a cohort/vocab/spec file violates the expected schema."""


VOCAB_KINDS = ("diagnosis", "procedure", "medication")

_VISIT_FIELDS = {"diagnoses", "procedures", "daily_meds"}
_RECORD_FIELDS = {"patient_id", "visits"}


@dataclass(frozen=True)
class Visit:
    """One hospitalization: diagnosis/procedure codes plus day-grouped meds."""

    diagnoses: frozenset[str]
    procedures: frozenset[str]
    daily_meds: tuple[frozenset[str], ...]

    @property
    def med_union(self) -> frozenset[str]:
        out: set[str] = set()
        for day in self.daily_meds:
            out |= day
        return frozenset(out)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class EventVocab:
    """Dense code -> index mapping for one event kind, lexicographic order."""

    kind: str
    codes: tuple[str, ...]
    code_to_index: dict[str, int] = field(compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in VOCAB_KINDS:
            raise ValueError(f"unknown vocab kind {self.kind!r}")
        if not self.codes:
            raise ValueError(f"empty {self.kind} vocabulary")
        if len(set(self.codes)) != len(self.codes):
            raise ValueError(f"duplicate codes in {self.kind} vocabulary")
        object.__setattr__(
            self, "code_to_index", {c: i for i, c in enumerate(self.codes)}
        )

    @property
    def size(self) -> int:
        return len(self.codes)

    def index(self, code: str) -> int:
        try:
            return self.code_to_index[code]
        except KeyError:
            raise ValueError(f"code {code!r} not in {self.kind} vocabulary") from None


@dataclass(frozen=True)
class IndexedVisit:
    """Visit with codes resolved to vocab indices; all tuples sorted ascending."""

    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    daily_meds: tuple[tuple[int, ...], ...]
    med_union: tuple[int, ...]


@dataclass(frozen=True)
class IndexedPatient:
    patient_id: str
    visits: tuple[IndexedVisit, ...]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic cohort generator.

    Each latent condition maps to a fixed (diagnosis set, procedure set,
    medication combination). With noise_rate=0 the medications of a visit are
    a deterministic function of its diagnoses: condition markers occupy
    diagnosis indices [0, n_conditions) and extra diagnoses are drawn from the
    non-marker range only.
    """

    n_patients: int
    n_diag: int
    n_proc: int
    n_med: int
    n_conditions: int
    meds_per_condition: tuple[int, int] = (3, 5)
    conditions_per_patient: tuple[int, int] = (1, 2)
    visits_range: tuple[int, int] = (2, 4)
    days_range: tuple[int, int] = (1, 3)
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_patients", "n_diag", "n_proc", "n_med", "n_conditions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        for name in (
            "meds_per_condition",
            "conditions_per_patient",
            "visits_range",
            "days_range",
        ):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.meds_per_condition[1] > self.n_med:
            raise ValueError("meds_per_condition exceeds medication vocabulary size")
        if self.conditions_per_patient[1] > self.n_conditions:
            raise ValueError("conditions_per_patient exceeds n_conditions")
        if self.n_conditions > self.n_diag:
            raise ValueError("need n_diag >= n_conditions for condition markers")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise CohortFormatError(f"{path}: synthetic spec must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise CohortFormatError(f"{path}: unknown spec fields {sorted(unknown)}")
        for name in ("meds_per_condition", "conditions_per_patient", "visits_range", "days_range"):
            if name in raw:
                raw[name] = tuple(raw[name])
        return cls(**raw)


def _as_code_list(value: object, what: str, line_no: int) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(c, str) for c in value):
        raise CohortFormatError(f"line {line_no}: {what} must be a list of strings")
    return value


def _parse_visit(raw: object, line_no: int) -> Visit:
    if not isinstance(raw, dict):
        raise CohortFormatError(f"line {line_no}: visit must be an object")
    unknown = set(raw) - _VISIT_FIELDS
    if unknown:
        raise CohortFormatError(f"line {line_no}: unknown visit fields {sorted(unknown)}")
    missing = _VISIT_FIELDS - set(raw)
    if missing:
        raise CohortFormatError(f"line {line_no}: visit missing fields {sorted(missing)}")
    diagnoses = frozenset(_as_code_list(raw["diagnoses"], "diagnoses", line_no))
    procedures = frozenset(_as_code_list(raw["procedures"], "procedures", line_no))
    if not isinstance(raw["daily_meds"], list):
        raise CohortFormatError(f"line {line_no}: daily_meds must be a list of lists")
    days = []
    for day in raw["daily_meds"]:
        meds = frozenset(_as_code_list(day, "daily_meds entry", line_no))
        if not meds:
            raise CohortFormatError(f"line {line_no}: empty daily medication set")
        days.append(meds)
    return Visit(diagnoses=diagnoses, procedures=procedures, daily_meds=tuple(days))


def load_cohort(path: str | Path, format: str = "jsonl") -> list[PatientRecord]:
    """Load one patient per line; errors name the offending line number."""
    if format != "jsonl":
        raise ValueError(f"unsupported cohort format {format!r}")
    records: list[PatientRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise CohortFormatError(f"line {line_no}: patient must be an object")
            unknown = set(raw) - _RECORD_FIELDS
            if unknown:
                raise CohortFormatError(
                    f"line {line_no}: unknown patient fields {sorted(unknown)}"
                )
            missing = _RECORD_FIELDS - set(raw)
            if missing:
                raise CohortFormatError(
                    f"line {line_no}: patient missing fields {sorted(missing)}"
                )
            if not isinstance(raw["patient_id"], str):
                raise CohortFormatError(f"line {line_no}: patient_id must be a string")
            if not isinstance(raw["visits"], list) or not raw["visits"]:
                raise CohortFormatError(f"line {line_no}: visits must be a non-empty list")
            visits = tuple(_parse_visit(v, line_no) for v in raw["visits"])
            records.append(PatientRecord(patient_id=raw["patient_id"], visits=visits))
    if not records:
        raise CohortFormatError(f"{path}: cohort file is empty")
    return records


def save_cohort(records: Sequence[PatientRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            payload = {
                "patient_id": rec.patient_id,
                "visits": [
                    {
                        "diagnoses": sorted(v.diagnoses),
                        "procedures": sorted(v.procedures),
                        "daily_meds": [sorted(day) for day in v.daily_meds],
                    }
                    for v in rec.visits
                ],
            }
            fh.write(json.dumps(payload) + "\n")


def build_vocabs(
    records: Sequence[PatientRecord],
) -> tuple[EventVocab, EventVocab, EventVocab]:
    """Collect distinct codes per kind; indices follow lexicographic code order."""
    if not records:
        raise ValueError("cannot build vocabularies from an empty cohort")
    diag: set[str] = set()
    proc: set[str] = set()
    med: set[str] = set()
    for rec in records:
        for visit in rec.visits:
            diag |= visit.diagnoses
            proc |= visit.procedures
            med |= visit.med_union
    return (
        EventVocab("diagnosis", tuple(sorted(diag))),
        EventVocab("procedure", tuple(sorted(proc))),
        EventVocab("medication", tuple(sorted(med))),
    )


def save_vocab(vocab: EventVocab, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"kind": vocab.kind, "codes": list(vocab.codes)}))


def load_vocab(path: str | Path) -> EventVocab:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or set(raw) != {"kind", "codes"}:
        raise CohortFormatError(f"{path}: vocab file must contain exactly kind and codes")
    return EventVocab(raw["kind"], tuple(raw["codes"]))


def filter_cohort(
    records: Sequence[PatientRecord],
    min_visits: int = 2,
    med_whitelist: set[str] | None = None,
) -> list[PatientRecord]:
    """Apply the medication whitelist (if any), then the visit-count threshold.

    With a whitelist, out-of-list medications are dropped from every day,
    empty days and medication-free visits are removed, and the visit threshold
    is re-applied.
    """
    if min_visits < 1:
        raise ValueError("min_visits must be >= 1")
    out: list[PatientRecord] = []
    for rec in records:
        visits: Sequence[Visit] = rec.visits
        if med_whitelist is not None:
            kept: list[Visit] = []
            for visit in visits:
                days = tuple(
                    frozenset(day & med_whitelist)
                    for day in visit.daily_meds
                    if day & med_whitelist
                )
                if days:
                    kept.append(
                        Visit(
                            diagnoses=visit.diagnoses,
                            procedures=visit.procedures,
                            daily_meds=days,
                        )
                    )
            visits = kept
        if len(visits) >= min_visits:
            out.append(PatientRecord(patient_id=rec.patient_id, visits=tuple(visits)))
    return out


def index_cohort(
    records: Sequence[PatientRecord],
    diag_vocab: EventVocab,
    proc_vocab: EventVocab,
    med_vocab: EventVocab,
) -> list[IndexedPatient]:
    """Resolve code strings to vocab indices; unknown codes raise ValueError."""
    out = []
    for rec in records:
        visits = []
        for visit in rec.visits:
            daily = tuple(
                tuple(sorted(med_vocab.index(c) for c in day)) for day in visit.daily_meds
            )
            union = sorted({m for day in daily for m in day})
            visits.append(
                IndexedVisit(
                    diagnoses=tuple(sorted(diag_vocab.index(c) for c in visit.diagnoses)),
                    procedures=tuple(sorted(proc_vocab.index(c) for c in visit.procedures)),
                    daily_meds=daily,
                    med_union=tuple(union),
                )
            )
        out.append(IndexedPatient(patient_id=rec.patient_id, visits=tuple(visits)))
    return out


def encode_multi_hot(indices: Iterable[int], vocab_size: int) -> np.ndarray:
    """Binary indicator vector with ones exactly at the given indices."""
    vec = np.zeros(vocab_size, dtype=np.float32)
    for i in indices:
        if not 0 <= i < vocab_size:
            raise ValueError(f"index {i} out of range for vocab size {vocab_size}")
        vec[i] = 1.0
    return vec


def split_cohort(
    records: Sequence[PatientRecord],
    ratios: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6),
    seed: int = 0,
) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Partition patients into train/val/test; deterministic per seed."""
    if any(r <= 0 for r in ratios):
        raise ValueError("split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if len(records) < 3:
        raise ValueError("need at least 3 patients for a three-way split")
    shuffled = list(records)
    random.Random(seed).shuffle(shuffled)
    n = len(shuffled)
    b1 = round(n * ratios[0])
    b2 = round(n * (ratios[0] + ratios[1]))
    train, val, test = shuffled[:b1], shuffled[b1:b2], shuffled[b2:]
    if not train or not val or not test:
        raise ValueError(f"ratios {ratios} leave an empty split for {n} patients")
    return train, val, test


def _emit_events(
    base: Sequence[int], vocab_size: int, noise_rate: float, rng: random.Random
) -> set[int]:
    events = {e for e in base if noise_rate == 0.0 or rng.random() >= noise_rate}
    if noise_rate > 0.0 and rng.random() < noise_rate:
        events.add(rng.randrange(vocab_size))
    return events


def generate_synthetic_cohort(spec: SyntheticSpec) -> list[PatientRecord]:
    """Draw a cohort with a planted conditions -> medications signal.

    Per-event dropout and spurious insertions are both governed by
    ``noise_rate``, so a noise-free spec emits each condition's event sets
    verbatim.
    """
    rng = random.Random(spec.seed)
    cond_meds: list[list[int]] = []
    cond_diags: list[list[int]] = []
    cond_procs: list[list[int]] = []
    extra_diag_range = range(spec.n_conditions, spec.n_diag)
    for c in range(spec.n_conditions):
        cond_meds.append(sorted(rng.sample(range(spec.n_med), rng.randint(*spec.meds_per_condition))))
        extras: list[int] = []
        if len(extra_diag_range) > 0:
            n_extra = rng.randint(0, min(2, len(extra_diag_range)))
            extras = rng.sample(extra_diag_range, n_extra)
        cond_diags.append(sorted({c, *extras}))
        # condition 0 always carries a procedure so cohorts never lack the vocab
        proc_lo = 1 if c == 0 else 0
        cond_procs.append(sorted(rng.sample(range(spec.n_proc), rng.randint(proc_lo, min(2, spec.n_proc)))))

    records = []
    for p in range(spec.n_patients):
        conditions = sorted(rng.sample(range(spec.n_conditions), rng.randint(*spec.conditions_per_patient)))
        base_diag = sorted({d for c in conditions for d in cond_diags[c]})
        base_proc = sorted({x for c in conditions for x in cond_procs[c]})
        base_med = sorted({m for c in conditions for m in cond_meds[c]})
        visits = []
        for _ in range(rng.randint(*spec.visits_range)):
            diag = _emit_events(base_diag, spec.n_diag, spec.noise_rate, rng)
            proc = _emit_events(base_proc, spec.n_proc, spec.noise_rate, rng) if base_proc else set()
            meds = _emit_events(base_med, spec.n_med, spec.noise_rate, rng)
            if not diag:
                diag = {base_diag[0]}
            if not meds:
                meds = {base_med[0]}
            n_days = rng.randint(*spec.days_range)
            days: list[set[int]] = [set() for _ in range(n_days)]
            for m in sorted(meds):
                days[rng.randrange(n_days)].add(m)
                if n_days > 1 and rng.random() < 0.25:
                    days[rng.randrange(n_days)].add(m)
            day_sets = tuple(frozenset(f"M{m:04d}" for m in d) for d in days if d)
            visits.append(
                Visit(
                    diagnoses=frozenset(f"D{d:04d}" for d in diag),
                    procedures=frozenset(f"P{x:04d}" for x in proc),
                    daily_meds=day_sets,
                )
            )
        records.append(PatientRecord(patient_id=f"synth-{p:05d}", visits=tuple(visits)))
    return records
