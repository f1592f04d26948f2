"""Multi-label metrics, per-visit evaluation and robustness binning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .cohort import IndexedPatient
from .graph import EhrGraph
from .model import Recommender

DEFAULT_BIN_EDGES = (0.0, 5.0, 10.0, 20.0, 40.0)

# Headline results reported for the same task on restricted real-world data,
# emitted next to user runs for comparison only (never a test gate).
REFERENCE_RESULTS = {
    "mimic3-womr": {"jaccard": 0.527, "prauc": 0.780, "f1": 0.682},
    "mimic3-wmr": {"jaccard": 0.532, "prauc": 0.787, "f1": 0.686},
    "mimic4-womr": {"jaccard": 0.502, "prauc": 0.762, "f1": 0.657},
    "mimic4-wmr": {"jaccard": 0.503, "prauc": 0.762, "f1": 0.659},
}


def jaccard(pred_set: Iterable[int], truth_set: Iterable[int]) -> float:
    """Intersection over union; two empty sets count as a perfect match."""
    pred, truth = set(pred_set), set(truth_set)
    if not pred and not truth:
        return 1.0
    return len(pred & truth) / len(pred | truth)


def f1(pred_set: Iterable[int], truth_set: Iterable[int]) -> float:
    pred, truth = set(pred_set), set(truth_set)
    if not pred and not truth:
        return 1.0
    if not pred or not truth:
        return 0.0
    tp = len(pred & truth)
    precision = tp / len(pred)
    recall = tp / len(truth)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def prauc(probs: Sequence[float] | np.ndarray, truth: Sequence[int] | np.ndarray) -> float:
    """Average precision with labels ranked by descending probability,
    ties broken by ascending index. Requires at least one positive label."""
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth)
    if probs.shape != truth.shape:
        raise ValueError("probs and truth must have the same shape")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise ValueError("prauc requires at least one positive label")
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if truth[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


@dataclass
class VisitEval:
    """Per-visit scores plus the binning key (mean historical set size)."""

    jaccard: float
    f1: float
    prauc: float | None
    n_meds_truth: int
    hist_avg_meds: float


@dataclass
class Report:
    aggregate: dict[str, float]
    bins: list[dict]
    config: dict
    n_patients: int
    n_visits: int
    n_prauc_visits: int
    reference: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "bins": self.bins,
            "config": self.config,
            "n_patients": self.n_patients,
            "n_visits": self.n_visits,
            "n_prauc_visits": self.n_prauc_visits,
            "reference": self.reference,
        }


def aggregate_means(evals: Sequence[VisitEval]) -> dict[str, float | None]:
    """Exact arithmetic means; PRAUC averages only positive-labelled visits.

    Empty inputs yield None (kept out of JSON as null, never NaN).
    """
    if not evals:
        return {"jaccard": None, "f1": None, "prauc": None}
    with_prauc = [e.prauc for e in evals if e.prauc is not None]
    return {
        "jaccard": sum(e.jaccard for e in evals) / len(evals),
        "f1": sum(e.f1 for e in evals) / len(evals),
        "prauc": sum(with_prauc) / len(with_prauc) if with_prauc else None,
    }


def bin_label(lo: float, hi: float | None) -> str:
    return f"[{lo:g},{hi:g})" if hi is not None else f"[{lo:g},inf)"


def bin_evals(
    evals: Sequence[VisitEval], edges: Sequence[float] = DEFAULT_BIN_EDGES
) -> list[dict]:
    """Group visits by mean historical medication count and average per bin."""
    bounds = [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)] + [(edges[-1], None)]
    rows = []
    for lo, hi in bounds:
        members = [
            e for e in evals if e.hist_avg_meds >= lo and (hi is None or e.hist_avg_meds < hi)
        ]
        row = {"bin": bin_label(lo, hi), "lo": lo, "hi": hi, "n_visits": len(members)}
        row.update(aggregate_means(members))
        rows.append(row)
    return rows


def collect_visit_evals(
    model: Recommender,
    graph: EhrGraph,
    patients: Sequence[IndexedPatient],
    stage: int,
    tau: float = 0.5,
    dump: list[dict] | None = None,
) -> list[VisitEval]:
    """Forward every patient and score visits with at least one prior visit."""
    evals: list[VisitEval] = []
    with torch.no_grad():
        for patient in patients:
            results = model.forward_patient(patient, graph, stage=stage, tau=tau)
            for t in range(1, len(patient.visits)):
                truth = set(patient.visits[t].med_union)
                probs = torch.sigmoid(results[t].logits)
                prob_list = probs.tolist()
                pred = {i for i, p in enumerate(prob_list) if p > 0.5}
                truth_vec = np.zeros(model.config.n_med, dtype=np.int64)
                truth_vec[list(truth)] = 1
                ap = prauc(prob_list, truth_vec) if truth else None
                hist = [len(patient.visits[s].med_union) for s in range(t)]
                evals.append(
                    VisitEval(
                        jaccard=jaccard(pred, truth),
                        f1=f1(pred, truth),
                        prauc=ap,
                        n_meds_truth=len(truth),
                        hist_avg_meds=sum(hist) / len(hist),
                    )
                )
                if dump is not None:
                    dump.append(
                        {
                            "patient_id": patient.patient_id,
                            "visit_idx": t,
                            "probs": prob_list,
                            "predicted": sorted(pred),
                            "truth": sorted(truth),
                        }
                    )
    return evals


def build_report(
    evals: Sequence[VisitEval],
    config: dict,
    n_patients: int,
    edges: Sequence[float] = DEFAULT_BIN_EDGES,
    reference: str | None = None,
) -> Report:
    return Report(
        aggregate=aggregate_means(evals),
        bins=bin_evals(evals, edges),
        config=config,
        n_patients=n_patients,
        n_visits=len(evals),
        n_prauc_visits=sum(1 for e in evals if e.prauc is not None),
        reference={reference: REFERENCE_RESULTS[reference]} if reference else {},
    )


def evaluate(
    checkpoint,
    records,
    stage: int | None = None,
    tau: float | None = None,
    edges: Sequence[float] = DEFAULT_BIN_EDGES,
    dump: list[dict] | None = None,
    reference: str | None = None,
) -> Report:
    """Score a cohort split against a checkpoint; pure in (checkpoint, split)."""
    from .cohort import index_cohort
    from .training import restore_model

    model, graph, vocabs = restore_model(checkpoint)
    stage = checkpoint.stage if stage is None else stage
    tau = checkpoint.train_config.tau if tau is None else tau
    indexed = index_cohort(records, *vocabs)
    evals = collect_visit_evals(model, graph, indexed, stage=stage, tau=tau, dump=dump)
    config = {
        "stage": stage,
        "tau": tau,
        "variant": checkpoint.model_config.variant,
        "dim": checkpoint.model_config.dim,
        "n_heads": checkpoint.model_config.n_heads,
        "seed": checkpoint.train_config.seed,
    }
    return build_report(evals, config, n_patients=len(records), edges=edges, reference=reference)
