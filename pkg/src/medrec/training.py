"""Losses, two-stage optimization with a frozen selection attention, variants."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .cohort import (
    EventVocab,
    IndexedPatient,
    PatientRecord,
    build_vocabs,
    encode_multi_hot,
    index_cohort,
)
from .graph import EhrGraph, build_cooccurrence_graph
from .model import VARIANTS, ModelConfig, Recommender
from . import metrics as metrics_mod

Splits = tuple[Sequence[PatientRecord], Sequence[PatientRecord], Sequence[PatientRecord]]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    tau: float = 0.5
    lr: float = 1e-3
    epochs_stage1: int = 50
    epochs_stage2: int = 25
    seed: int = 0
    variant: str = "full"
    dim: int = 64
    n_heads: int = 4
    gat_layers_global: int = 1
    gat_layers_local: int = 1
    negative_slope: float = 0.2
    graph_scope: str = "train"
    split_ratios: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6)
    grad_clip: float = 5.0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.graph_scope not in ("train", "all"):
            raise ValueError("graph_scope must be 'train' or 'all'")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        if "split_ratios" in raw:
            raw = dict(raw, split_ratios=tuple(raw["split_ratios"]))
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self, n_diag: int, n_proc: int, n_med: int) -> ModelConfig:
        return ModelConfig(
            n_diag=n_diag,
            n_proc=n_proc,
            n_med=n_med,
            dim=self.dim,
            n_heads=self.n_heads,
            gat_layers_global=self.gat_layers_global,
            gat_layers_local=self.gat_layers_local,
            negative_slope=self.negative_slope,
            variant=self.variant,
        )


@dataclass
class Checkpoint:
    """Everything needed to rebuild the model and evaluate it standalone."""

    stage: int
    epoch: int
    state: dict[str, Tensor]
    model_config: ModelConfig
    train_config: TrainConfig
    vocab_codes: dict[str, tuple[str, ...]]
    graph_n: int
    graph_edges: list[tuple[int, int]]
    history: list[dict] = field(default_factory=list)
    traversal_count: int = 0

    def vocabs(self) -> tuple[EventVocab, EventVocab, EventVocab]:
        return (
            EventVocab("diagnosis", self.vocab_codes["diagnosis"]),
            EventVocab("procedure", self.vocab_codes["procedure"]),
            EventVocab("medication", self.vocab_codes["medication"]),
        )

    def graph(self) -> EhrGraph:
        adj = np.zeros((self.graph_n, self.graph_n), dtype=np.bool_)
        for i, j in self.graph_edges:
            adj[i, j] = True
            adj[j, i] = True
        return EhrGraph(n=self.graph_n, adjacency=adj)


def loss_bce(logits: Tensor, truth: Tensor) -> Tensor:
    """Summed binary cross-entropy, composed stably from logits in float64."""
    if logits.shape != truth.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs truth {tuple(truth.shape)}")
    return torch.nn.functional.binary_cross_entropy_with_logits(
        logits.double(), truth.double(), reduction="sum"
    )


def loss_attention(logits: Tensor, truth: Tensor) -> Tensor:
    """Selection loss: the same cross-entropy applied to the attention logits."""
    return loss_bce(logits, truth)


def _snapshot(model: Recommender) -> dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _graph_edges(graph: EhrGraph) -> list[tuple[int, int]]:
    return [
        (int(i), int(j))
        for i in range(graph.n)
        for j in range(i + 1, graph.n)
        if graph.adjacency[i, j]
    ]


def _patient_targets(patient: IndexedPatient, n_med: int) -> list[Tensor]:
    return [
        torch.from_numpy(encode_multi_hot(v.med_union, n_med)) for v in patient.visits
    ]


def _val_row(model: Recommender, graph: EhrGraph, patients: Sequence[IndexedPatient], stage: int, tau: float) -> dict:
    if not patients:
        return {"val_jaccard": float("nan"), "val_f1": float("nan"), "val_prauc": float("nan")}
    evals = metrics_mod.collect_visit_evals(model, graph, patients, stage=stage, tau=tau)
    agg = metrics_mod.aggregate_means(evals)
    nan = float("nan")
    return {
        "val_jaccard": agg["jaccard"] if agg["jaccard"] is not None else nan,
        "val_f1": agg["f1"] if agg["f1"] is not None else nan,
        "val_prauc": agg["prauc"] if agg["prauc"] is not None else nan,
    }


def _run_training(
    model: Recommender,
    graph: EhrGraph,
    train_patients: Sequence[IndexedPatient],
    val_patients: Sequence[IndexedPatient],
    config: TrainConfig,
    stage: int,
    epochs: int,
) -> tuple[dict[str, Tensor], int, list[dict]]:
    """Per-patient stochastic optimization; returns best-val state and history."""
    n_med = model.config.n_med
    targets = [_patient_targets(p, n_med) for p in train_patients]
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.lr)
    rng = random.Random(config.seed)
    history: list[dict] = []
    best_state = _snapshot(model)
    best_epoch = 0
    best_jaccard = float("-inf")
    for epoch in range(1, epochs + 1):
        order = list(range(len(train_patients)))
        rng.shuffle(order)
        sum_b = sum_a = 0.0
        n_visits = 0
        for pi in order:
            patient = train_patients[pi]
            optimizer.zero_grad()
            results = model.forward_patient(patient, graph, stage=stage, tau=config.tau)
            lb = sum(loss_bce(r.logits, y) for r, y in zip(results, targets[pi]))
            if stage == 1:
                la = sum(loss_attention(r.selection_logits, y) for r, y in zip(results, targets[pi]))
                loss = lb + config.alpha * la
            else:
                la = torch.zeros(())
                loss = lb
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at stage {stage}, epoch {epoch}, "
                    f"patient {patient.patient_id}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            optimizer.step()
            sum_b += lb.detach().item()
            sum_a += la.detach().item()
            n_visits += len(results)
        with torch.no_grad():
            row = {
                "epoch": epoch,
                "stage": stage,
                "loss_b": sum_b / n_visits,
                "loss_alpha": sum_a / n_visits,
            }
            row.update(_val_row(model, graph, val_patients, stage, config.tau))
        history.append(row)
        val_jaccard = row["val_jaccard"]
        if val_jaccard == val_jaccard and val_jaccard > best_jaccard:  # skip NaN
            best_jaccard = val_jaccard
            best_state = _snapshot(model)
            best_epoch = epoch
    if best_jaccard == float("-inf") and epochs > 0:
        best_state = _snapshot(model)
        best_epoch = epochs
    return best_state, best_epoch, history


def train_stage1(splits: Splits, config: TrainConfig) -> Checkpoint:
    """Joint recommendation + selection training; returns the best-val state."""
    train_recs, val_recs, test_recs = splits
    if not train_recs:
        raise ValueError("training split is empty")
    all_records = list(train_recs) + list(val_recs) + list(test_recs)
    dvocab, pvocab, mvocab = build_vocabs(all_records)
    torch.manual_seed(config.seed)
    model = Recommender(config.model_config(dvocab.size, pvocab.size, mvocab.size))
    indexed_train = index_cohort(train_recs, dvocab, pvocab, mvocab)
    indexed_val = index_cohort(val_recs, dvocab, pvocab, mvocab)
    scope = indexed_train
    if config.graph_scope == "all":
        scope = index_cohort(all_records, dvocab, pvocab, mvocab)
    graph = build_cooccurrence_graph(scope, mvocab.size)
    state, epoch, history = _run_training(
        model, graph, indexed_train, indexed_val, config, stage=1, epochs=config.epochs_stage1
    )
    return Checkpoint(
        stage=1,
        epoch=epoch,
        state=state,
        model_config=model.config,
        train_config=config,
        vocab_codes={
            "diagnosis": dvocab.codes,
            "procedure": pvocab.codes,
            "medication": mvocab.codes,
        },
        graph_n=graph.n,
        graph_edges=_graph_edges(graph),
        history=history,
        traversal_count=model.traversal_count,
    )


def train_stage2(stage1: Checkpoint, splits: Splits, config: TrainConfig) -> Checkpoint:
    """Fine-tune the dual-reference recommendation with the bilinear attention
    matrix frozen at its stage-1 value; optimizes the recommendation loss only."""
    if stage1.stage != 1:
        raise ValueError("train_stage2 requires a stage-1 checkpoint")
    model, graph, vocabs = restore_model(stage1)
    dvocab, pvocab, mvocab = vocabs
    train_recs, val_recs, _ = splits
    if not train_recs:
        raise ValueError("training split is empty")
    model.bilinear.requires_grad_(False)
    indexed_train = index_cohort(train_recs, dvocab, pvocab, mvocab)
    indexed_val = index_cohort(val_recs, dvocab, pvocab, mvocab)
    state, epoch, history = _run_training(
        model, graph, indexed_train, indexed_val, config, stage=2, epochs=config.epochs_stage2
    )
    return Checkpoint(
        stage=2,
        epoch=epoch,
        state=state,
        model_config=model.config,
        train_config=config,
        vocab_codes=dict(stage1.vocab_codes),
        graph_n=stage1.graph_n,
        graph_edges=list(stage1.graph_edges),
        history=history,
        traversal_count=model.traversal_count,
    )


def run_variant(variant: str, splits: Splits, config: TrainConfig) -> tuple[Checkpoint, dict]:
    """Train both stages with the requested model wiring; returns the stage-2
    checkpoint plus a summary row (validation metrics, traversal counter)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = replace(config, variant=variant)
    stage1 = train_stage1(splits, cfg)
    stage2 = train_stage2(stage1, splits, cfg)
    summary = {"variant": variant, "traversal_count": stage1.traversal_count + stage2.traversal_count}
    for ckpt, tag in ((stage1, "stage1"), (stage2, "stage2")):
        row = ckpt.history[ckpt.epoch - 1] if ckpt.history else {}
        for key in ("val_jaccard", "val_f1", "val_prauc"):
            summary[f"{tag}_{key}"] = row.get(key, float("nan"))
    return stage2, summary


def restore_model(ckpt: Checkpoint) -> tuple[Recommender, EhrGraph, tuple[EventVocab, EventVocab, EventVocab]]:
    """Rebuild the model exactly: reloaded tensors are bit-identical."""
    model = Recommender(ckpt.model_config)
    model.load_state_dict(ckpt.state, strict=True)
    return model, ckpt.graph(), ckpt.vocabs()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "state": ckpt.state,
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "vocab_codes": {k: list(v) for k, v in ckpt.vocab_codes.items()},
        "graph_n": ckpt.graph_n,
        "graph_edges": [list(e) for e in ckpt.graph_edges],
        "history": ckpt.history,
        "traversal_count": ckpt.traversal_count,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, weights_only=True)
    return Checkpoint(
        stage=payload["stage"],
        epoch=payload["epoch"],
        state=payload["state"],
        model_config=ModelConfig(**payload["model_config"]),
        train_config=TrainConfig.from_dict(payload["train_config"]),
        vocab_codes={k: tuple(v) for k, v in payload["vocab_codes"].items()},
        graph_n=payload["graph_n"],
        graph_edges=[(int(i), int(j)) for i, j in payload["graph_edges"]],
        history=payload["history"],
        traversal_count=payload["traversal_count"],
    )
