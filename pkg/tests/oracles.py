"""Independent numpy reference implementations used to check the torch code.

Everything here recomputes results from raw parameter arrays with explicit
loops in float64; none of it calls back into the package's forward paths.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def leaky_relu(x, slope):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


def ref_first_argmax(values) -> int:
    values = list(values)
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def ref_head_weights(weight, attn, slope, cur_emb, cand_embs) -> np.ndarray:
    """Per-head attention of the current node over candidate rows."""
    k = weight.shape[1]
    z_cur = cur_emb @ weight
    z_cand = cand_embs @ weight
    scores = [
        leaky_relu(float(attn[:k] @ z_cur + attn[k:] @ z_cand[j]), slope)
        for j in range(cand_embs.shape[0])
    ]
    return softmax(scores)


def ref_gat_layer(embs, adj, weight, attn, slope) -> np.ndarray:
    """Dense per-edge score/softmax/aggregate with an implicit self-loop."""
    n = embs.shape[0]
    n_heads, _, k = weight.shape
    out = np.zeros((n, n_heads * k))
    for i in range(n):
        neighbors = [j for j in range(n) if adj[i, j] or j == i]
        for h in range(n_heads):
            z = embs @ weight[h]
            scores = [
                leaky_relu(float(attn[h, :k] @ z[i] + attn[h, k:] @ z[j]), slope)
                for j in neighbors
            ]
            alpha = softmax(scores)
            agg = np.zeros(k)
            for w, j in zip(alpha, neighbors):
                agg += w * z[j]
            out[i, h * k : (h + 1) * k] = agg
    return out


def ref_gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> np.ndarray:
    """One step of the standard reset/update/new-gate recurrence."""
    gi = w_ih @ x + b_ih
    gh = w_hh @ h + b_hh
    i_r, i_z, i_n = np.split(gi, 3)
    h_r, h_z, h_n = np.split(gh, 3)
    r = sigmoid(i_r + h_r)
    z = sigmoid(i_z + h_z)
    n = np.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def gru_params(cell) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (
        cell.weight_ih.detach().numpy().astype(np.float64),
        cell.weight_hh.detach().numpy().astype(np.float64),
        cell.bias_ih.detach().numpy().astype(np.float64),
        cell.bias_hh.detach().numpy().astype(np.float64),
    )


def ref_gru_sequence(xs, cell) -> np.ndarray:
    w_ih, w_hh, b_ih, b_hh = gru_params(cell)
    h = np.zeros(w_hh.shape[1])
    for x in xs:
        h = ref_gru_cell(np.asarray(x, dtype=np.float64), h, w_ih, w_hh, b_ih, b_hh)
    return h


def gat_params(layer) -> tuple[np.ndarray, np.ndarray, float]:
    return (
        layer.weight.detach().numpy().astype(np.float64),
        layer.attn.detach().numpy().astype(np.float64),
        layer.negative_slope,
    )


def ref_vote(weight, attn, slope, cur_emb, cand_embs):
    """Replay one voting round; returns the chosen candidate position."""
    n_heads = weight.shape[0]
    per_head = [
        ref_head_weights(weight[h], attn[h], slope, cur_emb, cand_embs)
        for h in range(n_heads)
    ]
    votes = [ref_first_argmax(w) for w in per_head]
    counts = [votes.count(p) for p in range(cand_embs.shape[0])]
    top = max(counts)
    winners = [p for p, c in enumerate(counts) if c == top]
    if len(winners) == 1:
        return winners[0]
    means = []
    for p in winners:
        picked = [per_head[h][p] for h in range(n_heads) if votes[h] == p]
        means.append(sum(picked) / len(picked))
    return winners[ref_first_argmax(means)]


def ref_traverse(nodes, adj, embs, start, weight, attn, slope, query=None, bilinear=None):
    """Full replay of the voting walk, restarts included.

    ``nodes`` ascending ids, ``adj``/``embs`` aligned to them. A (query,
    bilinear) pair reproduces query-attended restarts; without it restarts go
    to the lowest unvisited id.
    """
    nodes = list(nodes)
    pos = {n: i for i, n in enumerate(nodes)}
    visited = {start}
    order = [start]
    current = start
    restarts = 0
    while len(order) < len(nodes):
        cands = [n for n in nodes if adj[pos[current], pos[n]] and n not in visited]
        if cands:
            cand_embs = np.stack([embs[pos[c]] for c in cands])
            chosen = cands[ref_vote(weight, attn, slope, embs[pos[current]], cand_embs)]
        else:
            unvisited = [n for n in nodes if n not in visited]
            if query is None:
                chosen = unvisited[0]
            else:
                scores = [float(query @ bilinear @ embs[pos[n]]) for n in unvisited]
                chosen = unvisited[ref_first_argmax(scores)]
            restarts += 1
        visited.add(chosen)
        order.append(chosen)
        current = chosen
    return order, restarts


def ref_chained_traverse(nodes, adj_full, embs, bridge, bridge_emb, weight, attn, slope, query=None, bilinear=None):
    """Replay the bridged walk on an explicitly augmented adjacency."""
    nodes = list(nodes)
    if bridge in nodes:
        full_adj = np.array([[adj_full[i, j] for j in nodes] for i in nodes])
        order, _ = ref_traverse(nodes, full_adj, embs, bridge, weight, attn, slope, query, bilinear)
        return order
    aug_nodes = sorted(nodes + [bridge])
    aug_adj = np.array([[bool(adj_full[i, j]) for j in aug_nodes] for i in aug_nodes])
    b_pos = aug_nodes.index(bridge)
    if not aug_adj[b_pos].any():
        aug_adj[b_pos, :] = True
        aug_adj[:, b_pos] = True
        aug_adj[b_pos, b_pos] = False
    emb_by_node = {n: embs[i] for i, n in enumerate(nodes)}
    emb_by_node[bridge] = bridge_emb
    aug_embs = np.stack([emb_by_node[n] for n in aug_nodes])
    order, _ = ref_traverse(aug_nodes, aug_adj, aug_embs, bridge, weight, attn, slope, query, bilinear)
    return order[1:]


def ref_average_precision(probs, truth) -> float:
    """Quadratic average precision: precision at every positive rank by scan."""
    n = len(probs)
    order = sorted(range(n), key=lambda i: (-float(probs[i]), i))
    positives = int(np.asarray(truth).sum())
    total = 0.0
    for rank in range(1, n + 1):
        idx = order[rank - 1]
        if truth[idx]:
            hits = sum(1 for r in range(rank) if truth[order[r]])
            total += hits / rank
    return total / positives


def ref_bce_sum(probs, truth) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(-(truth * np.log(probs) + (1 - truth) * np.log(1 - probs)).sum())
