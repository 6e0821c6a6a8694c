"""Episodic few-shot evaluation: episode generation, plan execution, ablations and sweeps.

Every (seed, episode index) pair owns its own random stream, so episodes are
identical across runs, variants and grid points, and results are gathered in
episode order regardless of how the worker pool schedules them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import AdaptConfig, ego_instances, embed_adapted, node_instances, predict, prompt_tune
from .align import fit_dal
from .encoder import Propagator
from .graphstore import GraphBundle
from .pretrain import Checkpoint

log = logging.getLogger(__name__)

QUERY_CAP = 200
VARIANT_TWO_NOTE = ("v2 reading: structure tokens trained during pre-training, "
                    "downstream holistic prompts frozen at all-ones, specific prompts on")


class CrossDomainViolation(ValueError):
    """The target domain appears in the checkpoint's source roster."""


class EpisodeError(ValueError):
    pass


@dataclass
class TaskEpisode:
    kind: str  # "node" or "graph"
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    num_classes: int
    seed: int
    index: int

    @property
    def shots(self) -> int:
        return int(np.bincount(self.support_labels, minlength=self.num_classes).min())

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.kind}/{self.seed}/{self.index}".encode())
        for a in (self.support, self.support_labels, self.query, self.query_labels):
            h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def _stratified_counts(pool_sizes: np.ndarray, cap: int) -> np.ndarray:
    """Largest-remainder allocation of ``cap`` queries proportional to pool sizes."""
    total = int(pool_sizes.sum())
    if total <= cap:
        return pool_sizes.copy()
    exact = pool_sizes * cap / total
    counts = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: cap - counts.sum()]] += 1
    return np.minimum(counts, pool_sizes)


def make_episodes(g: GraphBundle, kind: str, shots: int, episodes: int = 100, seeds: Sequence[int] | int = 5,
                  query_cap: int = QUERY_CAP, base_seed: int = 0) -> list[TaskEpisode]:
    """Class-balanced m-shot episodes, ordered by (seed, episode index).

    ``seeds`` is either a count (seeds 0..n-1) or an explicit list.
    """
    if kind not in ("node", "graph"):
        raise ValueError(f"task kind must be 'node' or 'graph', got {kind!r}")
    if shots < 1 or episodes < 1:
        raise ValueError("shots and episodes must be >= 1")
    seeds = list(range(seeds)) if isinstance(seeds, (int, np.integer)) else list(seeds)
    counts = np.bincount(g.labels, minlength=g.num_classes)
    small = [(c, int(n)) for c, n in enumerate(counts) if n < shots + 1]
    if small:
        listing = ", ".join(f"class {c} has {n}" for c, n in small)
        raise EpisodeError(f"{g.domain_name}: {shots}-shot episodes need >= {shots + 1} nodes per class; {listing}")
    members = [np.flatnonzero(g.labels == c) for c in range(g.num_classes)]
    out = []
    for seed in seeds:
        for idx in range(episodes):
            rng = np.random.default_rng([base_seed, seed, idx])
            perms = [rng.permutation(m) for m in members]
            support = np.concatenate([p[:shots] for p in perms])
            pools = [p[shots:] for p in perms]
            take = _stratified_counts(np.array([len(p) for p in pools]), query_cap)
            query = np.concatenate([p[:k] for p, k in zip(pools, take)])
            out.append(TaskEpisode(kind, support, g.labels[support].copy(), query, g.labels[query].copy(),
                                   g.num_classes, int(seed), idx))
    return out


def accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("accuracy needs equal-length, non-empty prediction and label arrays")
    return float(np.count_nonzero(pred == truth)) / pred.size


# ---------------------------------------------------------------------------
# plans and results


@dataclass
class BenchmarkPlan:
    target: str
    sources: list[str]
    kind: str = "node"
    shots: int = 1
    episodes: int = 100
    seeds: int = 5
    variant: str = "full"
    alphas: list[float] = field(default_factory=list)
    betas: list[float] = field(default_factory=list)
    beta: float = 1.0
    alpha: float | None = None
    tune_steps: int = 100
    tune_lr: float = 1e-2
    ego_radius: int = 2
    query_cap: int = QUERY_CAP
    base_seed: int = 0

    @property
    def total_outcomes(self) -> int:
        return self.episodes * self.seeds

    def adapt_config(self, **overrides) -> AdaptConfig:
        kw = dict(beta=self.beta, alpha=self.alpha, tune_steps=self.tune_steps, tune_lr=self.tune_lr,
                  ego_radius=self.ego_radius, variant=self.variant)
        kw.update(overrides)
        return AdaptConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPlan":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ValueError(f"unknown plan keys: {extra}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "BenchmarkPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ResultRow:
    label: str
    settings: dict
    seeds: np.ndarray
    episodes: np.ndarray
    accuracies: np.ndarray  # fractions in [0, 1]

    @property
    def mean(self) -> float:
        return 100.0 * float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Population standard deviation over all outcomes, in percent."""
        return 100.0 * float(np.std(self.accuracies))


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    episode_digest: str = ""

    def row(self, label: str) -> ResultRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def results_tsv(self) -> str:
        lines = ["config\tseed\tepisode\taccuracy"]
        for r in self.rows:
            lines += [f"{r.label}\t{s}\t{e}\t{a!r}" for s, e, a in
                      zip(r.seeds.tolist(), r.episodes.tolist(), r.accuracies.tolist())]
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        lines = ["config\tmean\tstd\toutcomes"]
        lines += [f"{r.label}\t{r.mean:.2f}\t{r.std:.2f}\t{r.accuracies.size}" for r in self.rows]
        return "\n".join(lines) + "\n"


def paired_difference(a: ResultRow, b: ResultRow) -> tuple[float, float]:
    """Mean and standard error (percent) of ``a - b`` over matched episodes."""
    if not (np.array_equal(a.seeds, b.seeds) and np.array_equal(a.episodes, b.episodes)):
        raise ValueError("rows are not paired on the same episodes")
    d = 100.0 * (a.accuracies - b.accuracies)
    se = float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


def episodes_digest(episodes: Sequence[TaskEpisode]) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(ep.digest().encode())
    return h.hexdigest()[:16]


def worker_count() -> int:
    raw = os.environ.get("SAMGPT_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"SAMGPT_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# execution


def prepare_target(g: GraphBundle, ckpt: Checkpoint) -> GraphBundle:
    """Dimension-align the target's raw features to the checkpoint's width."""
    return g.with_features(fit_dal(g.features, ckpt.config.feature_dim))


def check_roster(target_name: str, ckpt: Checkpoint) -> None:
    if target_name in ckpt.roster:
        raise CrossDomainViolation(f"cross-domain violation: target {target_name!r} is in the source "
                                   f"roster {ckpt.roster}")


def run_episode(ep: TaskEpisode, g: GraphBundle, ckpt: Checkpoint, config: AdaptConfig,
                prop: Propagator | None = None) -> float:
    """Tune prompts on the support set, then score cosine-nearest-prototype predictions on the queries."""
    if ep.kind == "node":
        prop = prop or Propagator.from_bundle(g)
        support = node_instances(g, ep.support, prop)
        query = node_instances(g, ep.query, prop)
    else:
        support = ego_instances(g, ep.support, config.ego_radius)
        query = ego_instances(g, ep.query, config.ego_radius)
    result = prompt_tune(support, ep.support_labels, ep.num_classes, ckpt, config)
    h_query = embed_adapted(query, ckpt, result.prompts)
    return accuracy(predict(h_query, result.prototypes), ep.query_labels)


def run_episodes(episodes: Sequence[TaskEpisode], g: GraphBundle, ckpt: Checkpoint, config: AdaptConfig,
                 label: str = "", settings: dict | None = None) -> ResultRow:
    check_roster(g.domain_name, ckpt)
    ckpt.freeze()
    prop = Propagator.from_bundle(g)
    workers = min(worker_count(), max(1, len(episodes)))

    def one(ep):
        return run_episode(ep, g, ckpt, config, prop)

    if workers == 1:
        accs = [one(ep) for ep in episodes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(one, episodes))  # map keeps episode order
    return ResultRow(label or config.variant, settings or {"variant": config.variant},
                     np.array([ep.seed for ep in episodes], dtype=np.int64),
                     np.array([ep.index for ep in episodes], dtype=np.int64),
                     np.array(accs, dtype=np.float64))


def plan_episodes(plan: BenchmarkPlan, g: GraphBundle) -> list[TaskEpisode]:
    return make_episodes(g, plan.kind, plan.shots, plan.episodes, plan.seeds, plan.query_cap, plan.base_seed)


def run_plan(plan: BenchmarkPlan, ckpt: Checkpoint, target: GraphBundle,
             episodes: Sequence[TaskEpisode] | None = None) -> ResultTable:
    """One variant on one target; ``target`` must already be dimension-aligned."""
    check_roster(target.domain_name, ckpt)
    episodes = list(episodes) if episodes is not None else plan_episodes(plan, target)
    cfg = plan.adapt_config()
    row = run_episodes(episodes, target, ckpt, cfg, plan.variant, _settings(cfg, ckpt))
    return ResultTable([row], episodes_digest(episodes))


def _settings(cfg: AdaptConfig, ckpt: Checkpoint) -> dict:
    return {"variant": cfg.variant, "alpha": ckpt.config.alpha if cfg.alpha is None else cfg.alpha,
            "beta": cfg.beta, "structure_tokens": ckpt.config.use_structure_tokens}


def ablation_matrix(plan: BenchmarkPlan, ckpt: Checkpoint, plain_ckpt: Checkpoint, target: GraphBundle,
                    variants: Sequence[str] = ("v1", "v2", "v3", "v4", "full")) -> ResultTable:
    """Every variant on shared episodes. ``plain_ckpt`` (trained without structure tokens) serves v1."""
    if plain_ckpt.config.use_structure_tokens:
        raise ValueError("v1 needs a checkpoint pre-trained without structure tokens")
    if not ckpt.config.use_structure_tokens:
        raise ValueError("variants v2-v4 and full need a checkpoint with trained structure tokens")
    episodes = plan_episodes(plan, target)
    rows = []
    for v in variants:
        source = plain_ckpt if v == "v1" else ckpt
        cfg = plan.adapt_config(variant=v)
        rows.append(run_episodes(episodes, target, source, cfg, v, _settings(cfg, source)))
    return ResultTable(rows, episodes_digest(episodes))


def sensitivity_sweep(plan: BenchmarkPlan, ckpt: Checkpoint, target: GraphBundle, param: str,
                      grid: Sequence[float]) -> ResultTable:
    """One row per grid value of ``alpha`` or ``beta``; all rows share episodes."""
    if param not in ("alpha", "beta"):
        raise ValueError(f"sweep parameter must be 'alpha' or 'beta', got {param!r}")
    if not grid:
        raise ValueError("sweep grid is empty")
    episodes = plan_episodes(plan, target)
    rows = []
    for value in grid:
        cfg = plan.adapt_config(**{param: float(value)})
        rows.append(run_episodes(episodes, target, ckpt, cfg, f"{param}={float(value)!r}", _settings(cfg, ckpt)))
    return ResultTable(rows, episodes_digest(episodes))


# ---------------------------------------------------------------------------
# reports


def code_version() -> str:
    """Hash of this package's source files."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_report(plan: BenchmarkPlan, ckpt: Checkpoint, table: ResultTable, extra: dict | None = None) -> dict:
    hp = ckpt.hyperparameters()
    report = {
        "plan": plan.to_dict(),
        "roster": hp["roster"],
        "alpha": hp["alpha"] if plan.alpha is None else plan.alpha,
        "beta": plan.beta,
        "tau": hp["tau"],
        "feature_dim": hp["feature_dim"],
        "num_layers": hp["num_layers"],
        "widths": hp["widths"],
        "variant": plan.variant,
        "seed": plan.base_seed,
        "pretrain_config": hp["config"],
        "pretrain_config_hash": hp["config_hash"],
        "checkpoint_hash": ckpt.content_hash(),
        "feature_alignment": hp["feature_alignment"],
        "query_cap": plan.query_cap,
        "variant_two_reading": VARIANT_TWO_NOTE,
        "episode_digest": table.episode_digest,
        "code_version": code_version(),
        "summary": [{"config": r.label, "settings": r.settings, "mean": r.mean, "std": r.std,
                     "outcomes": int(r.accuracies.size)} for r in table.rows],
    }
    if extra:
        report.update(extra)
    return report


def write_outputs(out_dir: str | Path, table: ResultTable, report: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.tsv").write_text(table.results_tsv())
    (out / "summary.tsv").write_text(table.summary_tsv())
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return out
