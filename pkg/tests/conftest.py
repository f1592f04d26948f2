from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from medrec.cohort import (
    PatientRecord,
    SyntheticSpec,
    Visit,
    generate_synthetic_cohort,
    split_cohort,
)
from medrec.training import TrainConfig, train_stage1, train_stage2


def make_visit(diagnoses, procedures, daily_meds) -> Visit:
    return Visit(
        diagnoses=frozenset(diagnoses),
        procedures=frozenset(procedures),
        daily_meds=tuple(frozenset(day) for day in daily_meds),
    )


def make_record(patient_id, visits) -> PatientRecord:
    return PatientRecord(patient_id=patient_id, visits=tuple(visits))


@pytest.fixture(scope="session")
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(
        n_patients=20,
        n_diag=15,
        n_proc=8,
        n_med=15,
        n_conditions=3,
        meds_per_condition=(3, 4),
        conditions_per_patient=(1, 2),
        visits_range=(2, 3),
        days_range=(1, 2),
        noise_rate=0.0,
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_spec):
    records = generate_synthetic_cohort(tiny_spec)
    return split_cohort(records, seed=0)


@pytest.fixture(scope="session")
def tiny_config() -> TrainConfig:
    return TrainConfig(dim=16, n_heads=2, epochs_stage1=3, epochs_stage2=2, seed=5)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_splits, tiny_config):
    return train_stage1(tiny_splits, tiny_config)


@pytest.fixture(scope="session")
def tiny_stage2(tiny_stage1, tiny_splits, tiny_config):
    return train_stage2(tiny_stage1, tiny_splits, tiny_config)
