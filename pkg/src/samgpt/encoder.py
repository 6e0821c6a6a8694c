"""Message-passing graph encoder with per-layer aggregation modulators.

Layer ``l`` computes::

    Z = S_off @ (H * m_l) + s_self * H
    H' = act(Z @ W_l)          # relu except on the last layer

where ``S = D^-1/2 (A + I) D^-1/2`` is split into its off-diagonal part
(neighbour messages, scaled elementwise by the modulator ``m_l``) and its
diagonal (the node's own term, never modulated). A modulator is a structure
token during pre-training, a holistic or specific prompt downstream, or
``None`` for the plain encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .graphstore import GraphBundle
from .tensor import Tensor

HIDDEN_DIM = 256
NUM_LAYERS = 3


@dataclass
class Propagator:
    """Normalised propagation matrix of one graph (or a block-diagonal batch)."""

    off: sp.csr_matrix
    self_weight: np.ndarray  # [n, 1]
    segments: np.ndarray | None = None  # graph sizes when this is a batch

    @classmethod
    def from_edges(cls, num_nodes: int, edges: np.ndarray) -> "Propagator":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        deg = np.bincount(edges.ravel(), minlength=num_nodes).astype(np.float64) + 1.0
        inv_sqrt = 1.0 / np.sqrt(deg)
        u, v = edges[:, 0], edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        vals = inv_sqrt[rows] * inv_sqrt[cols]
        off = sp.csr_matrix((vals, (rows, cols)), shape=(num_nodes, num_nodes))
        off.sort_indices()
        return cls(off, (1.0 / deg).reshape(-1, 1))

    @classmethod
    def from_bundle(cls, g: GraphBundle) -> "Propagator":
        return cls.from_edges(g.num_nodes, g.edges)

    @classmethod
    def batch(cls, graphs: Sequence[GraphBundle]) -> "Propagator":
        parts = [cls.from_bundle(g) for g in graphs]
        out = cls(sp.block_diag([p.off for p in parts], format="csr"),
                  np.concatenate([p.self_weight for p in parts], axis=0),
                  np.array([g.num_nodes for g in graphs], dtype=np.int64))
        out.off.sort_indices()
        return out

    @property
    def num_nodes(self) -> int:
        return self.off.shape[0]

    def dense(self) -> np.ndarray:
        return self.off.toarray() + np.diag(self.self_weight.ravel())

    def receptive_rows(self, targets: np.ndarray, num_layers: int) -> list[np.ndarray]:
        """Sorted node sets needed at each depth: index 0 = input rows, ``num_layers`` = targets."""
        sets = [np.unique(np.asarray(targets, dtype=np.int64))]
        for _ in range(num_layers):
            cur = sets[-1]
            nbrs = self.off[cur].indices
            sets.append(np.union1d(cur, nbrs))
        return sets[::-1]


@dataclass
class EncoderState:
    """Layer weights (Theta). Widths: ``in_dim -> hidden -> ... -> hidden``."""

    weights: list[Tensor]
    frozen: bool = False

    @classmethod
    def init(cls, in_dim: int, hidden: int = HIDDEN_DIM, num_layers: int = NUM_LAYERS,
             seed: int = 0) -> "EncoderState":
        if num_layers < 1:
            raise ValueError("need at least one layer")
        rng = np.random.default_rng(seed)
        ws = []
        d = in_dim
        for _ in range(num_layers):
            bound = 1.0 / np.sqrt(d)
            ws.append(Tensor(rng.uniform(-bound, bound, size=(d, hidden)), requires_grad=True))
            d = hidden
        return cls(ws)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def freeze(self) -> "EncoderState":
        for w in self.weights:
            w.freeze()
        self.frozen = True
        return self

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else list(self.weights)


@dataclass
class StructureTokens:
    """Per-domain, per-layer learnable vectors (T); initialised to all-ones."""

    tokens: list[list[Tensor]] = field(default_factory=list)  # [domain][layer] 1×d_l

    @classmethod
    def init(cls, num_domains: int, widths: Sequence[int], trainable: bool = True) -> "StructureTokens":
        return cls([[Tensor(np.ones((1, d)), requires_grad=trainable) for d in widths]
                    for _ in range(num_domains)])

    @property
    def num_domains(self) -> int:
        return len(self.tokens)

    def for_domain(self, i: int) -> list[Tensor]:
        if not 0 <= i < self.num_domains:
            raise IndexError(f"unknown domain index {i}")
        return self.tokens[i]

    def layer_bank(self, layer: int) -> np.ndarray:
        """Stacked K×d_l matrix of every domain's token at ``layer``."""
        return np.concatenate([dom[layer].data for dom in self.tokens], axis=0)

    def parameters(self) -> list[Tensor]:
        return [t for dom in self.tokens for t in dom if t.requires_grad]


def _check_mods(mods, state: EncoderState):
    if mods is None:
        return [None] * state.num_layers
    if len(mods) != state.num_layers:
        raise T.ShapeError(f"{len(mods)} modulators for {state.num_layers} layers")
    for l, (m, d) in enumerate(zip(mods, state.input_widths)):
        if m is not None and m.shape != (1, d):
            raise T.ShapeError(f"modulator at layer {l} has shape {m.shape}, layer input width is {d}")
    return list(mods)


def encode(prop: Propagator, X: Tensor | np.ndarray, mods: Sequence[Tensor | None] | None,
           state: EncoderState, targets: np.ndarray | None = None) -> Tensor:
    """Run the encoder; ``mods[l]`` scales neighbour messages at layer ``l``.

    With ``targets`` only those rows are produced (in the given order), and
    each layer touches just the receptive field they need.
    """
    mods = _check_mods(mods, state)
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.shape[0] != prop.num_nodes:
        raise T.ShapeError(f"{X.shape[0]} feature rows for a {prop.num_nodes}-node graph")
    if X.shape[1] != state.input_widths[0]:
        raise T.ShapeError(f"features have width {X.shape[1]}, encoder expects {state.input_widths[0]}")
    L = state.num_layers
    if targets is None:
        H = X
        for l in range(L):
            M = H if mods[l] is None else T.mul(H, mods[l])
            Z = T.add(T.spmm(prop.off, M), T.mul(H, Tensor(prop.self_weight)))
            H = T.matmul(Z, state.weights[l])
            if l < L - 1:
                H = T.relu(H)
        return H

    targets = np.asarray(targets, dtype=np.int64)
    rows = prop.receptive_rows(targets, L)
    H = T.take_rows(X, rows[0])
    for l in range(L):
        prev, cur = rows[l], rows[l + 1]
        M = H if mods[l] is None else T.mul(H, mods[l])
        off = prop.off[cur][:, prev]
        keep = np.searchsorted(prev, cur)
        Z = T.add(T.spmm(off, M), T.mul(T.take_rows(H, keep), Tensor(prop.self_weight[cur])))
        H = T.matmul(Z, state.weights[l])
        if l < L - 1:
            H = T.relu(H)
    return T.take_rows(H, np.searchsorted(rows[-1], targets))


def encode_feature_path(prop: Propagator, X_tok: Tensor | np.ndarray, state: EncoderState,
                        targets: np.ndarray | None = None) -> Tensor:
    """Unmodulated encoding of inputs that already carry a feature token."""
    return encode(prop, X_tok, None, state, targets)


def fuse(h_primary: Tensor, h_secondary: Tensor, coeff: float) -> Tensor:
    if h_primary.shape != h_secondary.shape:
        raise T.ShapeError(f"fuse shape mismatch {h_primary.shape} vs {h_secondary.shape}")
    return T.add(h_primary, T.scalar_mul(h_secondary, coeff))


def readout(H: Tensor) -> Tensor:
    if H.data.ndim != 2 or H.shape[0] == 0:
        raise T.ShapeError("readout of an empty embedding matrix")
    return T.mean_rows(H)


def segment_readout(H: Tensor, segments: Sequence[int]) -> Tensor:
    """Mean-pool consecutive row blocks of a batched embedding matrix -> [num_graphs × d]."""
    segments = np.asarray(segments, dtype=np.int64)
    if np.any(segments < 1) or segments.sum() != H.shape[0]:
        raise T.ShapeError("segment sizes must be positive and cover every row")
    rows = np.repeat(np.arange(segments.size), segments)
    vals = np.repeat(1.0 / segments, segments)
    pool = sp.csr_matrix((vals, (rows, np.arange(H.shape[0]))), shape=(segments.size, H.shape[0]))
    return T.spmm(pool, H)
