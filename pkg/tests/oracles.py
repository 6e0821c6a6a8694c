"""Independent reference computations used by the tests.

Nothing here imports the package's math: each oracle re-derives its quantity
from the defining formula with dense numpy arrays or plain Python loops.
"""
from __future__ import annotations

import math
from itertools import combinations

import numpy as np


def dense_adjacency(num_nodes: int, edges) -> np.ndarray:
    A = np.zeros((num_nodes, num_nodes))
    for u, v in edges:
        if u != v:
            A[u, v] = A[v, u] = 1.0
    return A


def normalized_with_self_loops(A: np.ndarray) -> np.ndarray:
    A_hat = A + np.eye(A.shape[0])
    d = A_hat.sum(axis=1)
    return A_hat / np.sqrt(np.outer(d, d))


def dense_encoder(A: np.ndarray, X: np.ndarray, weights, mods=None) -> np.ndarray:
    """GCN layers with neighbour messages scaled by ``mods[l]`` and an unscaled self term."""
    S = normalized_with_self_loops(A)
    diag = np.diag(S).copy()
    S_off = S - np.diag(diag)
    H = np.array(X, dtype=np.float64)
    L = len(weights)
    for l, W in enumerate(weights):
        m = np.ones(H.shape[1]) if mods is None or mods[l] is None else np.ravel(mods[l])
        Z = S_off @ (H * m[None, :]) + diag[:, None] * H
        H = Z @ W
        if l < L - 1:
            H = np.maximum(H, 0.0)
    return H


def cos(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))))


def contrastive_loss(anchors, positives, negatives, tau: float) -> float:
    """-sum_o ln( sum_{a in Pos_o} e^{cos(a,o)/tau} / sum_{b in Neg_o} e^{cos(b,o)/tau} ).

    ``positives[o]``/``negatives[o]`` are lists of embedding vectors.
    """
    total = 0.0
    for o, pos, neg in zip(anchors, positives, negatives):
        num = sum(math.exp(cos(a, o) / tau) for a in pos)
        den = sum(math.exp(cos(b, o) / tau) for b in neg)
        total += math.log(num / den)
    return -total


def downstream_loss(support, labels, prototypes, tau: float) -> float:
    """-sum_x ln( e^{cos(h_x, h_{y_x})/tau} / sum_y e^{cos(h_x, h_y)/tau} )."""
    total = 0.0
    for h, y in zip(support, labels):
        scores = [math.exp(cos(h, p) / tau) for p in prototypes]
        total += math.log(scores[y] / sum(scores))
    return -total


def class_means(embeddings, labels, num_classes: int) -> np.ndarray:
    out = np.zeros((num_classes, len(embeddings[0])))
    for c in range(num_classes):
        rows = [e for e, y in zip(embeddings, labels) if y == c]
        for j in range(out.shape[1]):
            out[c, j] = sum(r[j] for r in rows) / len(rows)
    return out


def gram_projection(X: np.ndarray, k: int) -> np.ndarray:
    """Top-k columns of U S recovered from the eigendecomposition of X X^T."""
    evals, evecs = np.linalg.eigh(X @ X.T)
    order = np.argsort(evals)[::-1][:k]
    out = evecs[:, order] * np.sqrt(np.clip(evals[order], 0.0, None))
    for j in range(k):
        i = np.argmax(np.abs(out[:, j]))
        if out[i, j] < 0:
            out[:, j] = -out[:, j]
    return out


def hop_set(A: np.ndarray, center: int, radius: int) -> set[int]:
    """Nodes reachable in <= radius hops, via boolean matrix powers."""
    n = A.shape[0]
    reach = np.zeros(n, dtype=bool)
    reach[center] = True
    for _ in range(radius):
        reach = reach | (A[reach].sum(axis=0) > 0)
    return set(np.flatnonzero(reach).tolist())


def all_pairs_spl(A: np.ndarray) -> float:
    """Mean finite shortest-path length over ordered pairs (Floyd-Warshall)."""
    n = A.shape[0]
    D = np.where(A > 0, 1.0, np.inf)
    np.fill_diagonal(D, 0.0)
    for k in range(n):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    mask = np.isfinite(D) & (D > 0)
    return float(D[mask].mean()) if mask.any() else 0.0


def mean_clustering(A: np.ndarray) -> float:
    n = A.shape[0]
    vals = []
    for v in range(n):
        nb = np.flatnonzero(A[v])
        if nb.size < 2:
            vals.append(0.0)
            continue
        links = sum(1 for a, b in combinations(nb, 2) if A[a, b])
        vals.append(links / (nb.size * (nb.size - 1) / 2))
    return float(np.mean(vals))
