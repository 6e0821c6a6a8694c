"""Multi-domain contrastive pre-training with structure tokens.

Each step draws ``subgraphs_per_domain`` ego-subgraphs from every source
domain, makes two edge-dropped views of each, and embeds all of them with the
fused encoder ``readout(H_feat + alpha * H_struct)``.  Views of the same anchor
are positives; views of every other anchor in the batch are negatives.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .align import FeatureTokens, apply_fal, fit_dal
from .encoder import (HIDDEN_DIM, NUM_LAYERS, EncoderState, Propagator, StructureTokens, encode,
                      encode_feature_path, fuse, readout, segment_readout)
from .graphstore import GraphBundle, ego_network
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    alpha: float = 1.0
    tau: float = 0.5
    edge_drop_ratio: float = 0.2
    subgraphs_per_domain: int = 8
    subgraph_radius: int = 2
    steps: int = 200
    learning_rate: float = 1e-3
    seed: int = 0
    use_structure_tokens: bool = True
    feature_dim: int = 50
    hidden_dim: int = HIDDEN_DIM
    num_layers: int = NUM_LAYERS

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.edge_drop_ratio < 1:
            raise ValueError("edge_drop_ratio must lie in [0, 1)")
        if self.subgraphs_per_domain < 1 or self.subgraph_radius < 1 or self.steps < 0:
            raise ValueError("subgraphs_per_domain and subgraph_radius must be >= 1, steps >= 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# instances and augmentation


def sample_centers(num_nodes: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if num_nodes < 1:
        raise ValueError("cannot sample from an empty graph")
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.choice(num_nodes, size=count, replace=count > num_nodes)


def sample_subgraphs(g: GraphBundle, count: int, radius: int, rng: np.random.Generator) -> list[GraphBundle]:
    """Ego-networks around uniformly drawn centres (distinct when ``count <= num_nodes``)."""
    return [ego_network(g, int(c), radius) for c in sample_centers(g.num_nodes, count, rng)]


def augment_edge_drop(g: GraphBundle, ratio: float, rng: np.random.Generator) -> GraphBundle:
    """Remove ``floor(ratio * E)`` undirected edges chosen uniformly without replacement."""
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    drop = int(math.floor(ratio * g.num_undirected_edges))
    if drop == 0:
        return g
    keep = np.ones(g.num_undirected_edges, dtype=bool)
    keep[rng.choice(g.num_undirected_edges, size=drop, replace=False)] = False
    out = GraphBundle(g.domain_name, g.num_nodes, g.edges[keep], g.features, g.labels,
                      g.num_classes, g.graph_label, g.origin)
    return out


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator per (seed, keys...) so draws do not depend on schedule."""
    return np.random.default_rng([seed, *keys])


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    encoder: EncoderState
    structure: StructureTokens
    features: FeatureTokens
    roster: list[str]
    config: PretrainConfig
    loss_log: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def init(cls, roster: Sequence[str], config: PretrainConfig) -> "Checkpoint":
        enc = EncoderState.init(config.feature_dim, config.hidden_dim, config.num_layers, seed=config.seed)
        st = StructureTokens.init(len(roster), enc.input_widths, trainable=config.use_structure_tokens)
        ft = FeatureTokens.init(len(roster), config.feature_dim)
        return cls(enc, st, ft, list(roster), config)

    def domain_index(self, name: str) -> int:
        return self.roster.index(name)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.structure.parameters() + self.features.parameters()

    def freeze(self) -> "Checkpoint":
        self.encoder.freeze()
        for t in self.structure.tokens:
            for x in t:
                x.freeze()
        for f in self.features.tokens:
            f.freeze()
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l, w in enumerate(self.encoder.weights):
            out[f"encoder/W{l}"] = w.data
        for i, name in enumerate(self.roster):
            for l, t in enumerate(self.structure.tokens[i]):
                out[f"structure/{i}/t{l}"] = t.data
            out[f"feature/{i}"] = self.features.tokens[i].data
        return out

    def hyperparameters(self) -> dict:
        return {
            "num_layers": self.encoder.num_layers,
            "widths": self.encoder.input_widths + [self.encoder.out_dim],
            "alpha": self.config.alpha,
            "tau": self.config.tau,
            "feature_dim": self.config.feature_dim,
            "roster": list(self.roster),
            "config": asdict(self.config),
            "config_hash": self.config.digest(),
            "feature_alignment": "FAL: domain feature tokens (in-repo)",
        }

    def save(self, directory: str | Path) -> Path:
        d = T.save_tensors(directory, self.arrays(), extra={"hyperparameters": self.hyperparameters()})
        if self.loss_log:
            with open(Path(directory) / "loss.tsv", "w") as fh:
                fh.write("step\tloss\n")
                fh.writelines(f"{s}\t{v!r}\n" for s, v in self.loss_log)
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        arrays, manifest = T.load_tensors(directory)
        hp = manifest["hyperparameters"]
        config = PretrainConfig(**hp["config"])
        roster = hp["roster"]
        L = hp["num_layers"]
        enc = EncoderState([Tensor(arrays[f"encoder/W{l}"], requires_grad=True) for l in range(L)])
        st = StructureTokens([[Tensor(arrays[f"structure/{i}/t{l}"], requires_grad=config.use_structure_tokens)
                               for l in range(L)] for i in range(len(roster))])
        ft = FeatureTokens([Tensor(arrays[f"feature/{i}"], requires_grad=True) for i in range(len(roster))])
        ckpt = cls(enc, st, ft, list(roster), config)
        log_path = Path(directory) / "loss.tsv"
        if log_path.exists():
            rows = log_path.read_text().splitlines()[1:]
            ckpt.loss_log = [(int(s), float(v)) for s, v in (r.split("\t") for r in rows)]
        return ckpt

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(json.dumps(self.hyperparameters(), sort_keys=True).encode())
        return h.hexdigest()[:16]


def checkpoint_dir_hash(directory: str | Path) -> str:
    """Hash of every file in a saved checkpoint directory (serialized bytes)."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# embeddings and loss


def embed_fused(g: GraphBundle, domain_index: int, ckpt: Checkpoint, alpha: float | None = None) -> Tensor:
    """Graph embedding ``readout(H_feat + alpha * H_struct)`` for a single aligned graph."""
    alpha = ckpt.config.alpha if alpha is None else alpha
    prop = Propagator.from_bundle(g)
    tokens = ckpt.structure.for_domain(domain_index)
    X = Tensor(g.features)
    h_feat = encode_feature_path(prop, apply_fal(domain_index, X, ckpt.features), ckpt.encoder)
    h_struct = encode(prop, X, tokens, ckpt.encoder)
    return readout(fuse(h_feat, h_struct, alpha))


def embed_fused_batch(graphs: Sequence[GraphBundle], domain_index: int, ckpt: Checkpoint,
                      alpha: float | None = None) -> Tensor:
    """``embed_fused`` for many graphs of one domain at once -> [len(graphs) × d]."""
    alpha = ckpt.config.alpha if alpha is None else alpha
    prop = Propagator.batch(graphs)
    X = Tensor(np.concatenate([g.features for g in graphs], axis=0))
    tokens = ckpt.structure.for_domain(domain_index)
    h_feat = encode_feature_path(prop, apply_fal(domain_index, X, ckpt.features), ckpt.encoder)
    h_struct = encode(prop, X, tokens, ckpt.encoder)
    return segment_readout(fuse(h_feat, h_struct, alpha), prop.segments)


def contrastive_loss(h_anchor: Tensor, h_cand: Tensor, pos_mask: np.ndarray, neg_mask: np.ndarray,
                     tau: float) -> Tensor:
    """``-sum_o ln( sum_pos exp(cos/tau) / sum_neg exp(cos/tau) )``.

    ``pos_mask``/``neg_mask`` are [num_anchors × num_candidates] 0/1 arrays.
    """
    pos_mask = np.asarray(pos_mask, dtype=np.float64)
    neg_mask = np.asarray(neg_mask, dtype=np.float64)
    if np.any(pos_mask.sum(axis=1) == 0) or np.any(neg_mask.sum(axis=1) == 0):
        raise ValueError("every anchor needs at least one positive and one negative")
    if np.any(pos_mask * neg_mask):
        raise ValueError("a candidate cannot be both positive and negative for the same anchor")
    logits = T.scalar_mul(T.cosine_matrix(h_anchor, h_cand), 1.0 / tau)
    # a per-row shift cancels in the ratio; it only guards exp against overflow
    E = T.exp(T.sub(logits, Tensor(logits.data.max(axis=1, keepdims=True))))
    num = T.sum_rows(T.mul(E, Tensor(pos_mask)))
    den = T.sum_rows(T.mul(E, Tensor(neg_mask)))
    return T.scalar_mul(T.sum_all(T.sub(T.log(num), T.log(den))), -1.0)


def view_masks(num_anchors: int, views_per_anchor: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Candidate layout: views of anchor ``i`` occupy rows ``i*v .. i*v+v-1``."""
    owner = np.repeat(np.arange(num_anchors), views_per_anchor)
    pos = (owner[None, :] == np.arange(num_anchors)[:, None]).astype(np.float64)
    return pos, 1.0 - pos


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def align_domains(domains: Sequence[GraphBundle], dim: int) -> list[GraphBundle]:
    """Replace every domain's raw features by its ``fit_dal`` projection."""
    return [g.with_features(fit_dal(g.features, dim)) for g in domains]


def draw_batch(domains: Sequence[GraphBundle], config: PretrainConfig, step: int) -> list[list[GraphBundle]]:
    """Per domain: ``[anchor, view_a, view_b]`` for each of the sampled ego-subgraphs, flattened."""
    batch = []
    for i, g in enumerate(domains):
        centers = sample_centers(g.num_nodes, config.subgraphs_per_domain, stream(config.seed, step, i))
        graphs = []
        for slot, c in enumerate(centers):
            sub = ego_network(g, int(c), config.subgraph_radius)
            rng = stream(config.seed, step, i, slot + 1)
            graphs += [sub, augment_edge_drop(sub, config.edge_drop_ratio, rng),
                       augment_edge_drop(sub, config.edge_drop_ratio, rng)]
        batch.append(graphs)
    return batch


def loss_on_batch(batch: Sequence[Sequence[GraphBundle]], ckpt: Checkpoint) -> Tensor:
    """Contrastive loss of a drawn batch, divided by its anchor count.

    Anchors are ordered slot-major so domains interleave round-robin.
    """
    per_domain = [embed_fused_batch(graphs, i, ckpt) for i, graphs in enumerate(batch)]
    offsets = np.cumsum([0] + [len(graphs) for graphs in batch])
    rows_o, rows_v = [], []
    for slot in range(max(len(graphs) // 3 for graphs in batch)):
        for i, graphs in enumerate(batch):
            if 3 * slot < len(graphs):
                rows_o.append(offsets[i] + 3 * slot)
                rows_v += [offsets[i] + 3 * slot + 1, offsets[i] + 3 * slot + 2]
    emb = T.concat_rows(per_domain)
    h_o = T.take_rows(emb, rows_o)
    h_v = T.take_rows(emb, rows_v)
    pos, neg = view_masks(len(rows_o))
    loss = contrastive_loss(h_o, h_v, pos, neg, ckpt.config.tau)
    return T.scalar_mul(loss, 1.0 / len(rows_o))


def batch_loss(domains: Sequence[GraphBundle], ckpt: Checkpoint, step: int) -> Tensor:
    """Loss of the batch drawn at ``step``."""
    return loss_on_batch(draw_batch(domains, ckpt.config, step), ckpt)


def domain_visits(num_domains: int, steps: int, per_domain: int) -> np.ndarray:
    """How often each domain has contributed anchors after ``steps`` batches."""
    return np.full(num_domains, steps * per_domain, dtype=np.int64)


def pretrain_run(domains: Sequence[GraphBundle], config: PretrainConfig,
                 on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Optimise Theta, structure tokens and feature tokens on the source domains.

    ``domains`` must already carry ``config.feature_dim``-wide aligned features.
    """
    if not domains:
        raise ValueError("pre-training needs at least one source domain")
    for g in domains:
        if g.feature_dim != config.feature_dim:
            raise ValueError(f"domain {g.domain_name} has feature width {g.feature_dim}, "
                             f"expected aligned width {config.feature_dim}")
    ckpt = Checkpoint.init([g.domain_name for g in domains], config)
    opt = Adam(ckpt.parameters(), lr=config.learning_rate)
    for step in range(1, config.steps + 1):
        opt.zero_grad()
        loss = batch_loss(domains, ckpt, step)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite pre-training loss at step {step}: {value}")
        T.backward(loss)
        opt.step()
        ckpt.loss_log.append((step, value))
        if on_step is not None:
            on_step(step, value)
        log.debug("step %d loss %.6f", step, value)
    return ckpt
