"""Visit-history encoder: averaged event embeddings fused across modalities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .cohort import IndexedVisit


@dataclass
class PatientEncoding:
    """Per-visit state vectors; row t depends only on visits 1..t."""

    q: Tensor  # (T, dim)
    h_d: Tensor  # (T, dim)
    h_p: Tensor  # (T, dim)


class HistoryEncoder(nn.Module):
    """Embeds diagnoses/procedures, averages within a visit, runs one GRU per
    modality across visits, and fuses both hidden states with a linear layer.

    With ``recurrence=False`` the GRUs are bypassed and each visit is fused
    from its averaged embeddings alone (the set-style encoder variant).
    """

    def __init__(self, n_diag: int, n_proc: int, dim: int, recurrence: bool = True):
        super().__init__()
        if n_diag <= 0 or n_proc <= 0 or dim <= 0:
            raise ValueError("n_diag, n_proc and dim must be positive")
        self.dim = dim
        self.recurrence = recurrence
        self.emb_diag = nn.Parameter(torch.empty(n_diag, dim))
        self.emb_proc = nn.Parameter(torch.empty(n_proc, dim))
        nn.init.xavier_uniform_(self.emb_diag)
        nn.init.xavier_uniform_(self.emb_proc)
        self.gru_diag = nn.GRUCell(dim, dim)
        self.gru_proc = nn.GRUCell(dim, dim)
        self.fuse = nn.Linear(2 * dim, dim)

    def forward(self, visits: Sequence[IndexedVisit]) -> PatientEncoding:
        return encode_patient(visits, self)


def embed_visit_events(visit: IndexedVisit, encoder: HistoryEncoder) -> tuple[Tensor, Tensor]:
    """Mean embedding of the visit's diagnoses and procedures.

    An empty procedure set contributes the zero vector; diagnoses are the
    primary condition signal and must be non-empty.
    """
    if not visit.diagnoses:
        raise ValueError("visit has no diagnoses")
    d = encoder.emb_diag[list(visit.diagnoses)].mean(dim=0)
    if visit.procedures:
        p = encoder.emb_proc[list(visit.procedures)].mean(dim=0)
    else:
        p = torch.zeros(encoder.dim)
    return d, p


def encode_patient(visits: Sequence[IndexedVisit], encoder: HistoryEncoder) -> PatientEncoding:
    """Run both modality recurrences from zero states and fuse per visit."""
    if not visits:
        raise ValueError("encode_patient requires at least one visit")
    h_d = torch.zeros(encoder.dim)
    h_p = torch.zeros(encoder.dim)
    qs, hds, hps = [], [], []
    for visit in visits:
        x_d, x_p = embed_visit_events(visit, encoder)
        if encoder.recurrence:
            h_d = encoder.gru_diag(x_d, h_d)
            h_p = encoder.gru_proc(x_p, h_p)
        else:
            h_d, h_p = x_d, x_p
        qs.append(encoder.fuse(torch.cat([h_d, h_p])))
        hds.append(h_d)
        hps.append(h_p)
    return PatientEncoding(q=torch.stack(qs), h_d=torch.stack(hds), h_p=torch.stack(hps))
