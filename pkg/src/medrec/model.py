"""Four-level medication abstraction and the recommendation model.

Level 1 updates individual medication embeddings over the full co-occurrence
graph and within each prescription; level 2 orders each day's set by attention
voting and encodes the sequence; level 3 aggregates a visit's daily nodes into
a prescription node; level 4 mixes historical prescription nodes through a
per-patient key-value memory keyed by visit states. The current visit is then
scored against the vocabulary with a bilinear attention shared between start
selection and candidate selection; stage 1 reads candidates as an attention
mix, stage 2 thresholds, orders and encodes the selected candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .cohort import IndexedPatient, IndexedVisit
from .encoder import HistoryEncoder
from .graph import EhrGraph, SubGraph, subgraph
from .reasoning import (
    GraphAttentionLayer,
    Traversal,
    chained_traverse,
    first_argmax,
    traverse,
)

VARIANTS = ("full", "V_set", "M_set", "P_set", "C_att")


@dataclass(frozen=True)
class ModelConfig:
    n_diag: int
    n_proc: int
    n_med: int
    dim: int = 64
    n_heads: int = 4
    gat_layers_global: int = 1
    gat_layers_local: int = 1
    negative_slope: float = 0.2
    variant: str = "full"

    def __post_init__(self) -> None:
        if min(self.n_diag, self.n_proc, self.n_med, self.dim) <= 0:
            raise ValueError("vocab sizes and dim must be positive")
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        if self.gat_layers_global < 1 or self.gat_layers_local < 1:
            raise ValueError("GAT stacks need at least one layer")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class MemoryStore:
    """Per-patient key-value memory: visit states keyed to prescription nodes."""

    keys: list[Tensor] = field(default_factory=list)
    values: list[Tensor] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.keys) != len(self.values):
            raise ValueError("memory keys and values must align")


@dataclass
class VisitAbstraction:
    daily_nodes: list[Tensor]
    prescription_node: Tensor
    traversals: list[Traversal]


@dataclass
class Prediction:
    probs: Tensor  # (n_med,)
    predicted_set: frozenset[int]


@dataclass
class VisitResult:
    """Per-visit forward outputs: recommendation and selection scores."""

    logits: Tensor  # (n_med,)
    selection_logits: Tensor  # (n_med,)


class GatStack(nn.Module):
    """One or more attention layers; ELU between layers, none after the last."""

    def __init__(self, dim: int, n_heads: int, n_layers: int, negative_slope: float):
        super().__init__()
        self.layers = nn.ModuleList(
            GraphAttentionLayer(dim, n_heads, negative_slope) for _ in range(n_layers)
        )

    def forward(self, embs: Tensor, adjacency: Tensor) -> Tensor:
        x = embs
        for i, layer in enumerate(self.layers):
            if i > 0:
                x = torch.nn.functional.elu(x)
            x = layer(x, adjacency)
        return x


def adjacency_tensor(adj: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(adj))


def update_global_embeddings(w_m: Tensor, graph: EhrGraph, gat_global: GatStack) -> Tensor:
    """Refresh the whole medication table over the co-occurrence graph."""
    if graph.n != w_m.shape[0]:
        raise ValueError("graph size does not match medication table")
    return gat_global(w_m, adjacency_tensor(graph.adjacency))


def update_local_embeddings(e_m: Tensor, sub: SubGraph, gat_local: GatStack) -> Tensor:
    """Update copies of the selected rows within a prescription subgraph."""
    rows = e_m[list(sub.nodes)]
    return gat_local(rows, adjacency_tensor(sub.adjacency))


def bilinear_scores(query: Tensor, embs: Tensor, bilinear: Tensor) -> Tensor:
    return embs @ (bilinear.t() @ query)


def select_start(query: Tensor, set_embs: Tensor, bilinear: Tensor) -> tuple[int, Tensor]:
    """Pick the set position with the highest query attention (ties -> lowest)."""
    if set_embs.shape[0] == 0:
        raise ValueError("select_start requires at least one medication")
    scores = bilinear_scores(query, set_embs, bilinear)
    weights = torch.softmax(scores, dim=0)
    return first_argmax(scores.tolist()), weights


def encode_day(ordered_embs: Sequence[Tensor], gru: nn.GRUCell) -> Tensor:
    """Final hidden state of the recurrence over one day's ordered embeddings."""
    if len(ordered_embs) == 0:
        raise ValueError("encode_day requires at least one embedding")
    h = torch.zeros(gru.hidden_size)
    for emb in ordered_embs:
        h = gru(emb, h)
    return h


def memory_read(query: Tensor, store: MemoryStore) -> Tensor:
    """Softmax-attended mix of stored values; empty store reads as zero."""
    if not store.keys:
        return torch.zeros_like(query)
    keys = torch.stack(store.keys)
    alpha = torch.softmax(keys @ query, dim=0)
    return alpha @ torch.stack(store.values)


def candidate_scores(query: Tensor, e_m: Tensor, bilinear: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear logits over the full vocabulary and their softmax weights."""
    z = bilinear_scores(query, e_m, bilinear)
    return z, torch.softmax(z, dim=0)


def candidate_read(alpha: Tensor, e_m: Tensor) -> Tensor:
    if alpha.shape[0] != e_m.shape[0]:
        raise ValueError("attention weights do not match the medication table")
    return alpha @ e_m


def select_candidates(logits: Tensor, tau: float) -> list[int]:
    """Indices with sigmoid score above tau; falls back to the single argmax."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    probs = torch.sigmoid(logits).tolist()
    selected = [i for i, p in enumerate(probs) if p > tau]
    if not selected:
        selected = [first_argmax(logits.tolist())]
    return selected


def predict(query: Tensor, ref_a: Tensor, ref_b: Tensor, out_head: nn.Linear) -> Prediction:
    """Sigmoid recommendation over the vocabulary; strict 0.5 cut for the set."""
    logits = out_head(torch.cat([query, ref_a, ref_b]))
    probs = torch.sigmoid(logits)
    predicted = frozenset(i for i, p in enumerate(probs.tolist()) if p > 0.5)
    return Prediction(probs=probs, predicted_set=predicted)


class Recommender(nn.Module):
    """Full model: history encoder plus the medication abstraction stack."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = HistoryEncoder(
            config.n_diag, config.n_proc, config.dim, recurrence=config.variant != "V_set"
        )
        self.med_embedding = nn.Parameter(torch.empty(config.n_med, config.dim))
        nn.init.xavier_uniform_(self.med_embedding)
        self.gat_global = GatStack(
            config.dim, config.n_heads, config.gat_layers_global, config.negative_slope
        )
        self.gat_local = GatStack(
            config.dim, config.n_heads, config.gat_layers_local, config.negative_slope
        )
        self.bilinear = nn.Parameter(torch.empty(config.dim, config.dim))
        nn.init.xavier_uniform_(self.bilinear)
        self.gru_day = nn.GRUCell(config.dim, config.dim)
        self.gru_prescription = nn.GRUCell(config.dim, config.dim)
        self.gru_candidates = nn.GRUCell(config.dim, config.dim)
        self.out_head = nn.Linear(3 * config.dim, config.n_med)
        self.traversal_count = 0
        self.trace_sink: list[dict] | None = None

    @property
    def vote_layer(self) -> GraphAttentionLayer:
        return self.gat_local.layers[-1]

    def reset_traversal_count(self) -> None:
        self.traversal_count = 0

    def _record(self, walk: Traversal, context: dict | None, kind: str, day_idx: int | None) -> Traversal:
        self.traversal_count += 1
        if self.trace_sink is not None:
            row = {"kind": kind, "day_idx": day_idx}
            if context:
                row.update(context)
            row.update(walk.as_dict())
            self.trace_sink.append(row)
        return walk

    def abstract_prescription(
        self,
        visit: IndexedVisit,
        q_t: Tensor,
        e_m: Tensor,
        graph: EhrGraph,
        context: dict | None = None,
    ) -> VisitAbstraction:
        """Order and encode each day, then aggregate days into one node.

        Day 1 starts at the query-attended medication; later days chain from
        the previous day's last medication, carried over with its updated
        embedding.
        """
        if not visit.daily_meds:
            raise ValueError("cannot abstract a visit without medications")
        union_sub = subgraph(graph, visit.med_union)
        e_union = update_local_embeddings(e_m, union_sub, self.gat_local)
        union_pos = {node: i for i, node in enumerate(union_sub.nodes)}
        restart_query = (q_t, self.bilinear)
        daily_nodes: list[Tensor] = []
        traversals: list[Traversal] = []
        prev_last: int | None = None
        prev_last_emb: Tensor | None = None
        for day_idx, day in enumerate(visit.daily_meds):
            day_sub = subgraph(graph, day)
            rows = e_union[[union_pos[n] for n in day_sub.nodes]]
            e_day = self.gat_local(rows, adjacency_tensor(day_sub.adjacency))
            if day_idx == 0:
                pos, _ = select_start(q_t, e_day, self.bilinear)
                walk = traverse(day_sub, e_day, day_sub.nodes[pos], self.vote_layer, restart_query)
            else:
                walk = chained_traverse(
                    day_sub, e_day, prev_last, prev_last_emb, self.vote_layer, graph, restart_query
                )
            self._record(walk, context, "day", day_idx)
            day_pos = {n: i for i, n in enumerate(day_sub.nodes)}
            ordered = [e_day[day_pos[n]] for n in walk.order]
            daily_nodes.append(encode_day(ordered, self.gru_day))
            prev_last = walk.order[-1]
            prev_last_emb = e_day[day_pos[prev_last]]
            traversals.append(walk)
        h = torch.zeros(self.config.dim)
        for node in daily_nodes:
            h = self.gru_prescription(node, h)
        return VisitAbstraction(daily_nodes=daily_nodes, prescription_node=h, traversals=traversals)

    def abstract_candidates(
        self,
        selected: Sequence[int],
        q_t: Tensor,
        e_m: Tensor,
        graph: EhrGraph,
        context: dict | None = None,
    ) -> tuple[Tensor, Traversal]:
        """Order the selected candidates from the query-preferred start and
        encode the sequence; restarts cover disconnected selections."""
        if not selected:
            raise ValueError("cannot abstract an empty candidate set")
        sub = subgraph(graph, selected)
        embs = e_m[list(sub.nodes)]
        pos, _ = select_start(q_t, embs, self.bilinear)
        walk = traverse(sub, embs, sub.nodes[pos], self.vote_layer, (q_t, self.bilinear))
        self._record(walk, context, "candidates", None)
        sub_pos = {n: i for i, n in enumerate(sub.nodes)}
        h = torch.zeros(self.config.dim)
        for node in walk.order:
            h = self.gru_candidates(embs[sub_pos[node]], h)
        return h, walk

    def history_value(
        self,
        visit: IndexedVisit,
        q_t: Tensor,
        e_m: Tensor,
        graph: EhrGraph,
        context: dict | None = None,
    ) -> Tensor:
        """Memory value for one historical prescription (variant-aware)."""
        if self.config.variant in ("M_set", "P_set"):
            return e_m[list(visit.med_union)].mean(dim=0)
        return self.abstract_prescription(visit, q_t, e_m, graph, context).prescription_node

    def output_logits(self, q_t: Tensor, ref_a: Tensor, ref_b: Tensor) -> Tensor:
        return self.out_head(torch.cat([q_t, ref_a, ref_b]))

    def forward_patient(
        self,
        patient: IndexedPatient,
        graph: EhrGraph,
        stage: int,
        tau: float = 0.5,
    ) -> list[VisitResult]:
        """Teacher-forced forward over all visits of one patient.

        The prediction for visit t consumes medications of visits 1..t-1 only;
        historical abstractions are shared across the patient's visits.
        """
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        enc = self.encoder(patient.visits)
        e_m = update_global_embeddings(self.med_embedding, graph, self.gat_global)
        n_visits = len(patient.visits)
        values = []
        for s in range(n_visits - 1):
            ctx = {"patient_id": patient.patient_id, "visit_idx": s}
            values.append(self.history_value(patient.visits[s], enc.q[s], e_m, graph, ctx))
        results = []
        for t in range(n_visits):
            q_t = enc.q[t]
            store = MemoryStore(keys=[enc.q[s] for s in range(t)], values=values[:t])
            o = memory_read(q_t, store)
            z, alpha = candidate_scores(q_t, e_m, self.bilinear)
            if stage == 1 or self.config.variant == "C_att":
                ref = candidate_read(alpha, e_m)
            elif self.config.variant == "M_set":
                ref = e_m[select_candidates(z, tau)].mean(dim=0)
            else:
                ctx = {"patient_id": patient.patient_id, "visit_idx": t}
                ref, _ = self.abstract_candidates(select_candidates(z, tau), q_t, e_m, graph, ctx)
            results.append(
                VisitResult(logits=self.output_logits(q_t, o, ref), selection_logits=z)
            )
        return results
