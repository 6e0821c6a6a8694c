"""Cross-domain adaptation with dual prompts over a frozen pre-trained encoder.

Adapted embeddings::

    H_hol = encode(X, holistic prompts)
    H_spe = encode(X, specific prompts)     p_spe[l] = sum_i lambda[l, i] * t[i, l]
    H_AD  = encode(FAD(X)) + alpha * (H_hol + beta * H_spe)

Classification compares an instance with per-class prototype embeddings by
cosine similarity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .align import FeatureAdapter, apply_fad
from .encoder import Propagator, encode, encode_feature_path, fuse, segment_readout
from .graphstore import GraphBundle, ego_network
from .pretrain import Adam, Checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("full", "v1", "v2", "v3", "v4")
# (structure tokens at pre-training, holistic prompts, specific prompts)
VARIANT_COMPONENTS = {
    "v1": (False, False, False),
    "v2": (True, False, True),
    "v3": (True, False, False),
    "v4": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class AdaptConfig:
    beta: float = 1.0
    tune_steps: int = 100
    tune_lr: float = 1e-2
    ego_radius: int = 2
    variant: str = "full"
    alpha: float | None = None  # None: take the checkpoint's value
    tau: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def use_holistic(self) -> bool:
        return VARIANT_COMPONENTS[self.variant][1]

    @property
    def use_specific(self) -> bool:
        return VARIANT_COMPONENTS[self.variant][2]


@dataclass
class PromptState:
    holistic: list[Tensor]  # L × [1 × d_l]
    coeffs: list[Tensor]  # L × [1 × K]
    adapter: FeatureAdapter
    alpha: float = 1.0
    beta: float = 1.0
    use_specific: bool = True

    @classmethod
    def init(cls, ckpt: Checkpoint, alpha: float, beta: float, use_holistic: bool = True,
             use_specific: bool = True) -> "PromptState":
        K = len(ckpt.roster)
        hol = [Tensor(np.ones((1, d)), requires_grad=use_holistic) for d in ckpt.encoder.input_widths]
        lam = [Tensor(np.full((1, K), 1.0 / K), requires_grad=use_specific) for _ in hol]
        return cls(hol, lam, FeatureAdapter.init(K, ckpt.config.feature_dim), alpha, beta, use_specific)

    def parameters(self) -> list[Tensor]:
        return ([p for p in self.holistic if p.requires_grad] + [c for c in self.coeffs if c.requires_grad]
                + self.adapter.parameters())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"holistic/{l}": p.data.copy() for l, p in enumerate(self.holistic)}
        out["coeffs"] = np.concatenate([c.data for c in self.coeffs], axis=0)
        out["adapter/mixture"] = self.adapter.mixture.data.copy()
        out["adapter/offset"] = self.adapter.offset.data.copy()
        return out


def specific_prompt(coeffs: Tensor, bank: np.ndarray) -> Tensor:
    """``sum_i coeffs[i] * bank[i]``; ``bank`` is the frozen K×d token stack of one layer."""
    if coeffs.shape != (1, bank.shape[0]):
        raise T.ShapeError(f"{coeffs.shape[1]} coefficients for {bank.shape[0]} source domains")
    return T.matmul(coeffs, Tensor(bank))


def specific_prompts(prompts: PromptState, ckpt: Checkpoint) -> list[Tensor]:
    return [specific_prompt(prompts.coeffs[l], ckpt.structure.layer_bank(l))
            for l in range(ckpt.encoder.num_layers)]


# ---------------------------------------------------------------------------
# instances


@dataclass
class Instances:
    """Inputs for a set of node or graph instances of the target domain."""

    prop: Propagator
    features: np.ndarray
    targets: np.ndarray | None = None  # node rows to emit (node tasks)
    segments: np.ndarray | None = None  # graph sizes (graph tasks)

    @property
    def size(self) -> int:
        return len(self.targets) if self.targets is not None else len(self.segments)


def node_instances(g: GraphBundle, nodes: Sequence[int], prop: Propagator | None = None) -> Instances:
    return Instances(prop or Propagator.from_bundle(g), g.features, targets=np.asarray(nodes, dtype=np.int64))


def graph_instances(graphs: Sequence[GraphBundle]) -> Instances:
    prop = Propagator.batch(graphs)
    return Instances(prop, np.concatenate([h.features for h in graphs], axis=0), segments=prop.segments)


def ego_instances(g: GraphBundle, centers: Sequence[int], radius: int) -> Instances:
    return graph_instances([ego_network(g, int(c), radius) for c in centers])


def embed_adapted(inst: Instances, ckpt: Checkpoint, prompts: PromptState) -> Tensor:
    """Adapted embeddings, one row per instance."""
    enc = ckpt.encoder
    X = Tensor(inst.features)
    h_fad = encode_feature_path(inst.prop, apply_fad(X, prompts.adapter, ckpt.features), enc, inst.targets)
    h_sad = encode(inst.prop, X, prompts.holistic, enc, inst.targets)
    if prompts.use_specific:
        h_spe = encode(inst.prop, X, specific_prompts(prompts, ckpt), enc, inst.targets)
        h_sad = fuse(h_sad, h_spe, prompts.beta)
    h = fuse(h_fad, h_sad, prompts.alpha)
    if inst.segments is not None:
        h = segment_readout(h, inst.segments)
    return h


# ---------------------------------------------------------------------------
# prototypes, loss, prediction


def class_average_matrix(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"no support instances for classes {missing}")
    C = np.zeros((num_classes, labels.size))
    C[labels, np.arange(labels.size)] = 1.0 / counts[labels]
    return C


def build_prototypes(h_support: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    """Per-class mean of support embeddings -> [num_classes × d]."""
    return T.matmul(Tensor(class_average_matrix(labels, num_classes)), h_support)


def downstream_loss(h_support: Tensor, labels: np.ndarray, prototypes: Tensor, tau: float) -> Tensor:
    """``-sum_x ln softmax_y(cos(h_x, h_y) / tau)[y_x]``."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = T.scalar_mul(T.cosine_matrix(h_support, prototypes), 1.0 / tau)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    lse = T.add(T.log(T.sum_rows(T.exp(T.sub(logits, shift)))), shift)
    picked = T.sum_rows(T.mul(logits, Tensor(onehot)))
    return T.sum_all(T.sub(lse, picked))


def predict(h_query: Tensor | np.ndarray, prototypes: Tensor | np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar prototype per query row; ties go to the lowest index."""
    q = h_query.data if isinstance(h_query, Tensor) else np.asarray(h_query)
    p = prototypes.data if isinstance(prototypes, Tensor) else np.asarray(prototypes)
    sims = T.cosine_matrix(Tensor(q), Tensor(p)).data
    return np.argmax(sims, axis=1)


@dataclass
class TuneResult:
    prompts: PromptState
    prototypes: np.ndarray
    losses: list[float] = field(default_factory=list)


def prompt_tune(support: Instances, labels: np.ndarray, num_classes: int, ckpt: Checkpoint,
                config: AdaptConfig) -> TuneResult:
    """Optimise holistic prompts, specific-prompt coefficients and the feature adapter.

    The checkpoint must be frozen; only prompt parameters receive updates.
    """
    if ckpt.parameters():
        raise RuntimeError("prompt tuning requires a frozen checkpoint (call ckpt.freeze())")
    alpha = ckpt.config.alpha if config.alpha is None else config.alpha
    tau = ckpt.config.tau if config.tau is None else config.tau
    prompts = PromptState.init(ckpt, alpha, config.beta, config.use_holistic, config.use_specific)
    opt = Adam(prompts.parameters(), lr=config.tune_lr)
    losses = []
    for step in range(config.tune_steps):
        opt.zero_grad()
        h = embed_adapted(support, ckpt, prompts)
        protos = build_prototypes(h, labels, num_classes)
        loss = downstream_loss(h, labels, protos, tau)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite downstream loss at tuning step {step}")
        T.backward(loss)
        opt.step()
        losses.append(value)
    h = embed_adapted(support, ckpt, prompts)
    protos = build_prototypes(h, labels, num_classes).data
    return TuneResult(prompts, protos, losses)
