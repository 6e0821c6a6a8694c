"""Per-domain graph bundles: on-disk format, validation, statistics, ego-networks.

A bundle directory holds::

    meta.json     {"domain_name", "num_nodes", "feature_dim", "num_classes"}
    edges.tsv     "u<TAB>v" per line, 0-based, undirected
    features.tsv  num_nodes lines of feature_dim tab-separated floats
    labels.tsv    one integer class per line
"""
from __future__ import annotations

import csv
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path


class LoadError(ValueError):
    """Raised when a bundle (or converter input) is malformed."""


class MissingFileError(LoadError, FileNotFoundError):
    pass


@dataclass
class GraphBundle:
    domain_name: str
    num_nodes: int
    edges: np.ndarray  # [E_u, 2] int64, u < v, lexicographically sorted
    features: np.ndarray  # [num_nodes, d] float64
    labels: np.ndarray  # [num_nodes] int64
    num_classes: int
    graph_label: int | None = None
    origin: np.ndarray | None = None  # node index in the parent graph, for subgraphs
    _adj: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.edges = canonical_edges(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(self.num_nodes, -1)
        self.validate()

    def validate(self) -> None:
        n = self.num_nodes
        if self.features.shape[0] != n:
            raise LoadError(f"{self.domain_name}: {self.features.shape[0]} feature rows for {n} nodes")
        if self.labels.shape != (n,):
            raise LoadError(f"{self.domain_name}: {self.labels.shape[0]} labels for {n} nodes")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise LoadError(f"{self.domain_name}: edge endpoint out of range [0, {n})")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LoadError(f"{self.domain_name}: label out of range [0, {self.num_classes})")

    @property
    def num_undirected_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_directed_edges(self) -> int:
        return 2 * self.num_undirected_edges

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency in CSR form with sorted column indices."""
        if self._adj is None:
            n = self.num_nodes
            u, v = self.edges[:, 0], self.edges[:, 1]
            rows = np.concatenate([u, v])
            cols = np.concatenate([v, u])
            adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
            adj.sort_indices()
            self._adj = adj
        return self._adj

    def neighbors(self, v: int) -> np.ndarray:
        adj = self.adjacency()
        return adj.indices[adj.indptr[v]:adj.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency().indptr)

    def with_edges(self, edges: np.ndarray) -> "GraphBundle":
        return GraphBundle(self.domain_name, self.num_nodes, edges, self.features, self.labels,
                           self.num_classes, self.graph_label, self.origin)

    def with_features(self, features: np.ndarray) -> "GraphBundle":
        out = GraphBundle(self.domain_name, self.num_nodes, self.edges, features, self.labels,
                          self.num_classes, self.graph_label, self.origin)
        out._adj = self._adj
        return out


def canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Drop self loops and duplicates; orient u < v; sort."""
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    pairs = np.stack([lo[keep], hi[keep]], axis=1)
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


# ---------------------------------------------------------------------------
# disk format


def _read_rows(path: Path, sep: str | None):
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                yield lineno, line.split(sep)


def load_bundle(dir_path: str | Path) -> GraphBundle:
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise MissingFileError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    n, fdim, ncls = int(meta["num_nodes"]), int(meta["feature_dim"]), int(meta["num_classes"])

    edges = []
    for lineno, parts in _read_rows(d / "edges.tsv", "\t"):
        try:
            u, v = (int(p) for p in parts)
        except ValueError:
            raise LoadError(f"{d / 'edges.tsv'}:{lineno}: expected two integer node ids") from None
        if not (0 <= u < n and 0 <= v < n):
            raise LoadError(f"{d / 'edges.tsv'}:{lineno}: node index out of range for num_nodes={n}")
        edges.append((u, v))

    feats = np.empty((n, fdim))
    count = 0
    for lineno, parts in _read_rows(d / "features.tsv", "\t"):
        if count >= n:
            raise LoadError(f"{d / 'features.tsv'}:{lineno}: more rows than num_nodes={n}")
        if len(parts) != fdim:
            raise LoadError(f"{d / 'features.tsv'}:{lineno}: {len(parts)} columns, meta says {fdim}")
        try:
            feats[count] = [float(p) for p in parts]
        except ValueError:
            raise LoadError(f"{d / 'features.tsv'}:{lineno}: non-numeric feature value") from None
        count += 1
    if count != n:
        raise LoadError(f"{d / 'features.tsv'}: {count} rows, meta says {n}")

    labels = []
    for lineno, parts in _read_rows(d / "labels.tsv", None):
        try:
            y = int(parts[0])
        except ValueError:
            raise LoadError(f"{d / 'labels.tsv'}:{lineno}: non-integer label") from None
        if not 0 <= y < ncls:
            raise LoadError(f"{d / 'labels.tsv'}:{lineno}: label {y} out of range for num_classes={ncls}")
        labels.append(y)
    if len(labels) != n:
        raise LoadError(f"{d / 'labels.tsv'}: {len(labels)} labels, meta says {n}")

    return GraphBundle(meta["domain_name"], n, np.array(edges, dtype=np.int64).reshape(-1, 2),
                       feats, np.array(labels, dtype=np.int64), ncls)


def save_bundle(g: GraphBundle, dir_path: str | Path) -> Path:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"domain_name": g.domain_name, "num_nodes": g.num_nodes,
            "feature_dim": g.feature_dim, "num_classes": g.num_classes}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    with open(d / "edges.tsv", "w") as fh:
        fh.writelines(f"{u}\t{v}\n" for u, v in g.edges)
    with open(d / "features.tsv", "w") as fh:
        for row in g.features:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(d / "labels.tsv", "w") as fh:
        fh.writelines(f"{int(y)}\n" for y in g.labels)
    return d


def bundle_hash(g: GraphBundle) -> str:
    h = hashlib.sha256()
    h.update(g.domain_name.encode())
    for arr in (g.edges, g.features, g.labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# converters


def convert(edge_list: str | Path, features_csv: str | Path, labels: str | Path, out: str | Path,
            domain_name: str | None = None) -> GraphBundle:
    """Ingest a generic edge list + feature CSV + label file into bundle layout.

    The edge list holds one pair per line separated by whitespace or a comma.
    The feature CSV has one comma-separated row per node, no header.
    """
    feats = []
    with open(features_csv, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                feats.append([float(x) for x in row])
            except ValueError:
                raise LoadError(f"{features_csv}:{lineno}: non-numeric feature value") from None
            if len(feats[-1]) != len(feats[0]):
                raise LoadError(f"{features_csv}:{lineno}: ragged row ({len(feats[-1])} vs {len(feats[0])} columns)")
    n = len(feats)
    ys = []
    for lineno, parts in _read_rows(Path(labels), None):
        try:
            ys.append(int(parts[0]))
        except ValueError:
            raise LoadError(f"{labels}:{lineno}: non-integer label") from None
    if len(ys) != n:
        raise LoadError(f"{labels}: {len(ys)} labels for {n} feature rows")
    edges = []
    for lineno, parts in _read_rows(Path(edge_list), None):
        parts = [p for tok in parts for p in tok.split(",") if p]
        try:
            u, v = int(parts[0]), int(parts[1])
        except (ValueError, IndexError):
            raise LoadError(f"{edge_list}:{lineno}: expected two integer node ids") from None
        if not (0 <= u < n and 0 <= v < n):
            raise LoadError(f"{edge_list}:{lineno}: node index out of range for {n} nodes")
        edges.append((u, v))
    ys = np.array(ys, dtype=np.int64)
    g = GraphBundle(domain_name or Path(out).name, n, np.array(edges, dtype=np.int64).reshape(-1, 2),
                    np.array(feats, dtype=np.float64).reshape(n, -1), ys, int(ys.max()) + 1 if n else 0)
    save_bundle(g, out)
    return g


def import_npz(path: str | Path, out: str | Path | None = None, domain_name: str | None = None,
               largest_component: bool = False) -> GraphBundle:
    """Read the CSR ``.npz`` layout used by common citation/co-purchase dumps.

    Recognised keys: ``adj_data/adj_indices/adj_indptr/adj_shape``,
    ``attr_data/attr_indices/attr_indptr/attr_shape`` (or dense ``attr_matrix``/
    ``features``), ``labels``; alternatively ``edges`` + ``features`` + ``target``.
    """
    z = np.load(path, allow_pickle=True)
    keys = set(z.files)
    if "adj_data" in keys:
        adj = sp.csr_matrix((z["adj_data"], z["adj_indices"], z["adj_indptr"]), shape=tuple(z["adj_shape"]))
        coo = adj.tocoo()
        edges = np.stack([coo.row, coo.col], axis=1)
    elif "edges" in keys:
        edges = np.asarray(z["edges"]).reshape(-1, 2)
    else:
        raise LoadError(f"{path}: no adjacency arrays found (keys: {sorted(keys)})")
    if "attr_data" in keys:
        feats = sp.csr_matrix((z["attr_data"], z["attr_indices"], z["attr_indptr"]),
                              shape=tuple(z["attr_shape"])).toarray()
    elif "attr_matrix" in keys:
        feats = np.asarray(z["attr_matrix"])
    elif "features" in keys:
        feats = np.asarray(z["features"])
    else:
        raise LoadError(f"{path}: no feature arrays found")
    labels = np.asarray(z["labels"] if "labels" in keys else z["target"]).astype(np.int64)
    _, labels = np.unique(labels, return_inverse=True)
    n = feats.shape[0]
    g = GraphBundle(domain_name or Path(path).stem, n, edges, feats, labels, int(labels.max()) + 1)
    if largest_component:
        g = largest_connected_component(g)
    if out is not None:
        save_bundle(g, out)
    return g


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class DomainStats:
    num_nodes: int
    num_edges: int  # directed count
    avg_node_degree: float
    avg_shortest_path_length: float
    avg_clustering_coefficient: float
    spl_sources: int

    def as_tsv(self) -> str:
        head = "nodes\tedges\tavg_nd\tavg_spl\tavg_cc\tspl_sources"
        row = (f"{self.num_nodes}\t{self.num_edges}\t{self.avg_node_degree:.4f}\t"
               f"{self.avg_shortest_path_length:.4f}\t{self.avg_clustering_coefficient:.4f}\t{self.spl_sources}")
        return head + "\n" + row + "\n"


def clustering_coefficients(g: GraphBundle) -> np.ndarray:
    """Local clustering per node; nodes of degree < 2 get 0."""
    adj = g.adjacency()
    deg = g.degrees().astype(np.float64)
    tri2 = np.asarray((adj @ adj).multiply(adj).sum(axis=1)).ravel()  # 2 x triangles
    denom = deg * (deg - 1)
    cc = np.zeros(g.num_nodes)
    ok = deg >= 2
    cc[ok] = tri2[ok] / denom[ok]
    return cc


def sample_spl_sources(num_nodes: int, spl_sample_size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    k = min(spl_sample_size, num_nodes)
    if k == num_nodes:
        return np.arange(num_nodes)
    return np.sort(rng.choice(num_nodes, size=k, replace=False))


def compute_stats(g: GraphBundle, spl_sample_size: int = 512, seed: int = 0,
                  sources: np.ndarray | None = None) -> DomainStats:
    if g.num_nodes == 0:
        raise ValueError("cannot compute statistics of an empty graph")
    if spl_sample_size < 1:
        raise ValueError("spl_sample_size must be >= 1")
    if sources is None:
        sources = sample_spl_sources(g.num_nodes, spl_sample_size, seed)
    dist = shortest_path(g.adjacency(), method="D", unweighted=True, directed=False, indices=sources)
    finite = np.isfinite(dist) & (dist > 0)
    spl = float(dist[finite].mean()) if finite.any() else 0.0
    return DomainStats(
        num_nodes=g.num_nodes,
        num_edges=g.num_directed_edges,
        avg_node_degree=g.num_directed_edges / g.num_nodes,
        avg_shortest_path_length=spl,
        avg_clustering_coefficient=float(clustering_coefficients(g).mean()),
        spl_sources=len(sources),
    )


# ---------------------------------------------------------------------------
# subgraphs


def khop_nodes(g: GraphBundle, center: int, radius: int) -> list[int]:
    """BFS order: center first, then by hop distance, ties by node index."""
    adj = g.adjacency()
    dist = {center: 0}
    order = [center]
    frontier = deque([center])
    while frontier:
        v = frontier.popleft()
        if dist[v] == radius:
            continue
        for u in adj.indices[adj.indptr[v]:adj.indptr[v + 1]]:
            u = int(u)
            if u not in dist:
                dist[u] = dist[v] + 1
                order.append(u)
                frontier.append(u)
    return order


def induced_subgraph(g: GraphBundle, nodes: list[int] | np.ndarray, graph_label: int | None = None) -> GraphBundle:
    nodes = np.asarray(nodes, dtype=np.int64)
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size)
    e = g.edges
    keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0) if e.size else np.zeros(0, bool)
    sub_edges = remap[e[keep]] if e.size else np.zeros((0, 2), dtype=np.int64)
    origin = nodes if g.origin is None else g.origin[nodes]
    return GraphBundle(g.domain_name, int(nodes.size), sub_edges, g.features[nodes], g.labels[nodes],
                       g.num_classes, graph_label, origin)


def ego_network(g: GraphBundle, center: int, radius: int = 2) -> GraphBundle:
    """Induced subgraph within ``radius`` hops; node 0 is the center."""
    if not 0 <= center < g.num_nodes:
        raise IndexError(f"center {center} out of range")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return induced_subgraph(g, khop_nodes(g, center, radius), graph_label=int(g.labels[center]))


def largest_connected_component(g: GraphBundle) -> GraphBundle:
    _, comp = connected_components(g.adjacency(), directed=False)
    biggest = np.argmax(np.bincount(comp))
    keep = np.flatnonzero(comp == biggest)
    sub = induced_subgraph(g, keep)
    sub.origin = None
    return sub


def subsample_nodes(g: GraphBundle, max_nodes: int, seed: int = 0) -> GraphBundle:
    """Keep at most ``max_nodes`` nodes by BFS-growing from random seeds (keeps locality)."""
    if g.num_nodes <= max_nodes:
        return g
    rng = np.random.default_rng(seed)
    adj = g.adjacency()
    chosen: list[int] = []
    taken = np.zeros(g.num_nodes, dtype=bool)
    order = rng.permutation(g.num_nodes)
    for start in order:
        if len(chosen) >= max_nodes:
            break
        if taken[start]:
            continue
        queue = deque([int(start)])
        taken[start] = True
        while queue and len(chosen) < max_nodes:
            v = queue.popleft()
            chosen.append(v)
            for u in adj.indices[adj.indptr[v]:adj.indptr[v + 1]]:
                if not taken[u]:
                    taken[u] = True
                    queue.append(int(u))
    sub = induced_subgraph(g, np.sort(np.array(chosen[:max_nodes])))
    sub.origin = None
    # relabel classes densely; some may vanish
    _, dense = np.unique(sub.labels, return_inverse=True)
    return GraphBundle(g.domain_name, sub.num_nodes, sub.edges, sub.features, dense, int(dense.max()) + 1)


def synthetic_bundle(domain_name: str, num_nodes: int, num_classes: int, feature_dim: int,
                     avg_degree: float = 4.0, homophily: float = 0.8, signal: float = 1.0,
                     seed: int = 0) -> GraphBundle:
    """Planted-partition graph with class-dependent sparse nonnegative features.

    Roughly ``homophily`` of each node's edges stay inside its class. Features
    are Poisson counts whose rates are raised on a class-specific block of
    columns by ``signal``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=num_nodes)
    m = int(round(avg_degree * num_nodes / 2))
    u = rng.integers(0, num_nodes, size=m)
    same = rng.random(m) < homophily
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    v = rng.integers(0, num_nodes, size=m)
    for i in np.flatnonzero(same):
        pool = members[labels[u[i]]]
        v[i] = pool[rng.integers(0, pool.size)]
    block = max(1, feature_dim // num_classes)
    rates = np.full((num_classes, feature_dim), 0.05)
    for c in range(num_classes):
        rates[c, (c * block) % feature_dim:(c * block) % feature_dim + block] += 0.05 + 0.25 * signal
    feats = rng.poisson(rates[labels]).astype(np.float64)
    return GraphBundle(domain_name, num_nodes, np.stack([u, v], axis=1), feats, labels, num_classes)
