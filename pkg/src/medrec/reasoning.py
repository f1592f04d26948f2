"""Multi-head attention voting over co-occurrence subgraphs.

Orders a flat medication set into a sequence: starting from a chosen node,
every attention head scores the unvisited neighbors of the current node and
votes for its favourite; the majority wins, vote ties fall back to the mean
attention weight among the heads that voted for each tied candidate, and any
residual exact tie breaks to the lowest medication index. Dead ends restart
at the unvisited node preferred by the patient-state query (or the lowest
index when no query is supplied). The walk is discrete: gradients flow
through the embeddings it orders, never through the ordering itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .graph import EhrGraph, SubGraph, subgraph, unvisited_neighbors


def first_argmax(values: Sequence[float]) -> int:
    """Index of the maximum, lowest index on exact ties."""
    if len(values) == 0:
        raise ValueError("argmax of an empty sequence")
    return min(range(len(values)), key=lambda i: (-values[i], i))


@dataclass(frozen=True)
class TraversalStep:
    current: int
    candidates: tuple[int, ...]
    head_votes: tuple[int, ...]
    chosen: int
    tie_broken: bool
    restarted: bool

    def as_dict(self) -> dict:
        return {
            "current": self.current,
            "candidates": list(self.candidates),
            "head_votes": list(self.head_votes),
            "chosen": self.chosen,
            "tie_broken": self.tie_broken,
            "restarted": self.restarted,
        }


@dataclass(frozen=True)
class Traversal:
    """Ordered medication sequence plus the per-step vote record.

    ``steps`` holds one record per move; a chained walk that entered through
    an external bridge node keeps the bridge->first move in ``steps`` even
    though the bridge is dropped from ``order``.
    """

    order: tuple[int, ...]
    steps: tuple[TraversalStep, ...]

    def as_dict(self) -> dict:
        return {"order": list(self.order), "steps": [s.as_dict() for s in self.steps]}


class GraphAttentionLayer(nn.Module):
    """Single multi-head GAT layer with per-head scores exposed for voting.

    Heads project dim -> dim/n_heads and score pairs with a leaky-rectified
    additive attention; aggregation runs over neighbors plus a self-loop, so
    isolated nodes reduce to their own projection.
    """

    def __init__(self, dim: int, n_heads: int, negative_slope: float = 0.2):
        super().__init__()
        if n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.dim_head = dim // n_heads
        self.negative_slope = negative_slope
        self.weight = nn.Parameter(torch.empty(n_heads, dim, self.dim_head))
        self.attn = nn.Parameter(torch.empty(n_heads, 2 * self.dim_head))
        nn.init.xavier_uniform_(self.weight)
        nn.init.xavier_uniform_(self.attn)

    def head_attention(self, head: int, current_emb: Tensor, candidate_embs: Tensor) -> Tensor:
        """Softmax attention of one head from ``current`` over the candidates."""
        if candidate_embs.shape[0] == 0:
            raise ValueError("head_attention requires at least one candidate")
        k = self.dim_head
        z_cur = current_emb @ self.weight[head]  # (k,)
        z_cand = candidate_embs @ self.weight[head]  # (m, k)
        scores = torch.nn.functional.leaky_relu(
            (self.attn[head, :k] * z_cur).sum() + z_cand @ self.attn[head, k:],
            negative_slope=self.negative_slope,
        )
        return torch.softmax(scores, dim=0)

    def all_head_attention(self, current_emb: Tensor, candidate_embs: Tensor) -> Tensor:
        """All heads at once, shape (n_heads, m); row h equals head_attention(h)."""
        if candidate_embs.shape[0] == 0:
            raise ValueError("all_head_attention requires at least one candidate")
        k = self.dim_head
        z_cur = torch.einsum("d,hdk->hk", current_emb, self.weight)  # (H, k)
        z_cand = torch.einsum("md,hdk->hmk", candidate_embs, self.weight)  # (H, m, k)
        scores = torch.nn.functional.leaky_relu(
            (self.attn[:, :k] * z_cur).sum(-1, keepdim=True)
            + torch.einsum("hmk,hk->hm", z_cand, self.attn[:, k:]),
            negative_slope=self.negative_slope,
        )
        return torch.softmax(scores, dim=-1)

    def forward(self, embs: Tensor, adjacency: Tensor) -> Tensor:
        n = embs.shape[0]
        z = torch.einsum("nd,hdk->hnk", embs, self.weight)  # (H, n, k)
        k = self.dim_head
        src = (z * self.attn[:, None, :k]).sum(-1)  # (H, n)
        dst = (z * self.attn[:, None, k:]).sum(-1)  # (H, n)
        scores = torch.nn.functional.leaky_relu(
            src.unsqueeze(2) + dst.unsqueeze(1), negative_slope=self.negative_slope
        )  # (H, n, n)
        mask = adjacency.to(torch.bool) | torch.eye(n, dtype=torch.bool)
        scores = scores.masked_fill(~mask.unsqueeze(0), float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        out = torch.einsum("hij,hjk->hik", alpha, z)  # (H, n, k)
        return out.permute(1, 0, 2).reshape(n, self.dim)


def head_attention(gat: GraphAttentionLayer, head: int, current_emb: Tensor, candidate_embs: Tensor) -> Tensor:
    return gat.head_attention(head, current_emb, candidate_embs)


def vote_next(
    gat: GraphAttentionLayer,
    current: int,
    candidates: Sequence[int],
    current_emb: Tensor,
    candidate_embs: Tensor,
) -> tuple[int, TraversalStep]:
    """One voting round: majority of per-head argmax picks, mean-weight tie rule.

    ``candidates`` must be ascending node ids with ``candidate_embs`` rows
    aligned, so positional tie-breaking equals lowest-medication-index.
    """
    if len(candidates) == 0:
        raise ValueError("vote_next requires at least one candidate")
    with torch.no_grad():  # ordering is discrete; no gradient flows through votes
        weights = gat.all_head_attention(current_emb, candidate_embs).tolist()
    votes = [first_argmax(w) for w in weights]
    counts = [votes.count(pos) for pos in range(len(candidates))]
    top = max(counts)
    winners = [pos for pos, c in enumerate(counts) if c == top]
    tie_broken = len(winners) > 1
    if tie_broken:
        means = [
            sum(weights[h][pos] for h in range(gat.n_heads) if votes[h] == pos)
            / counts[pos]
            for pos in winners
        ]
        chosen_pos = winners[first_argmax(means)]
    else:
        chosen_pos = winners[0]
    step = TraversalStep(
        current=current,
        candidates=tuple(candidates),
        head_votes=tuple(candidates[v] for v in votes),
        chosen=candidates[chosen_pos],
        tie_broken=tie_broken,
        restarted=False,
    )
    return candidates[chosen_pos], step


def _restart_target(
    unvisited: list[int],
    embs: Tensor,
    positions: dict[int, int],
    restart_query: tuple[Tensor, Tensor] | None,
) -> int:
    if restart_query is None:
        return unvisited[0]
    query, bilinear = restart_query
    with torch.no_grad():
        rows = embs[[positions[n] for n in unvisited]]
        scores = (rows @ (bilinear.t() @ query)).tolist()
    return unvisited[first_argmax(scores)]


def traverse(
    sub: SubGraph,
    embs: Tensor,
    start: int,
    gat: GraphAttentionLayer,
    restart_query: tuple[Tensor, Tensor] | None = None,
) -> Traversal:
    """Visit every node of ``sub`` once, voting on each move.

    ``embs`` rows align with ``sub.nodes``. ``restart_query`` is an optional
    (query vector, bilinear matrix) pair used to pick dead-end restart targets.
    """
    positions = {node: i for i, node in enumerate(sub.nodes)}
    if start not in positions:
        raise ValueError(f"start node {start} not in subgraph")
    visited = {start}
    order = [start]
    steps: list[TraversalStep] = []
    current = start
    while len(order) < len(sub.nodes):
        candidates = unvisited_neighbors(sub, current, visited)
        if candidates:
            chosen, step = vote_next(
                gat,
                current,
                candidates,
                embs[positions[current]],
                embs[[positions[c] for c in candidates]],
            )
        else:
            unvisited = [n for n in sub.nodes if n not in visited]
            chosen = _restart_target(unvisited, embs, positions, restart_query)
            step = TraversalStep(
                current=current,
                candidates=tuple(unvisited),
                head_votes=(),
                chosen=chosen,
                tie_broken=False,
                restarted=True,
            )
        visited.add(chosen)
        order.append(chosen)
        steps.append(step)
        current = chosen
    return Traversal(order=tuple(order), steps=tuple(steps))


def chained_traverse(
    sub: SubGraph,
    embs: Tensor,
    bridge_node: int,
    bridge_emb: Tensor,
    gat: GraphAttentionLayer,
    graph: EhrGraph,
    restart_query: tuple[Tensor, Tensor] | None = None,
) -> Traversal:
    """Traverse ``sub`` starting from an external bridge node.

    The bridge joins the subgraph with its co-occurrence edges from the full
    graph; a bridge with no edge into the set is connected to every member so
    it always steers the first pick. The returned order excludes the bridge
    unless it already belongs to the set.
    """
    if bridge_node in sub.nodes:
        return traverse(sub, embs, bridge_node, gat, restart_query)
    if not 0 <= bridge_node < graph.n:
        raise ValueError(f"bridge node {bridge_node} out of range for n={graph.n}")
    aug = subgraph(graph, set(sub.nodes) | {bridge_node})
    adjacency = aug.adjacency.copy()
    bridge_pos = aug.position(bridge_node)
    if not adjacency[bridge_pos].any():
        adjacency[bridge_pos, :] = True
        adjacency[:, bridge_pos] = True
        adjacency[bridge_pos, bridge_pos] = False
    aug = SubGraph(nodes=aug.nodes, adjacency=adjacency)
    rows = [
        bridge_emb if node == bridge_node else embs[sub.position(node)]
        for node in aug.nodes
    ]
    walk = traverse(aug, torch.stack(rows), bridge_node, gat, restart_query)
    return Traversal(order=walk.order[1:], steps=walk.steps)
