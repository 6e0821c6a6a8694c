"""Command-line entry point: ``samgpt <subcommand> ...``.

Option values resolve as flags > ``--config`` JSON file > built-in defaults,
and every run that writes a report echoes the resolved values. Failures print
one line ``error: <category>: <message>`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import graphstore as gs
from . import taskbench as tb
from .adapt import VARIANTS
from .align import cached_fit_dal
from .pretrain import Checkpoint, PretrainConfig, pretrain_run
from .tensor import load_tensors

log = logging.getLogger("samgpt")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CROSS_DOMAIN = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_MISSING = 66
EXIT_NUMERIC = 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config resolution


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return json.loads(p.read_text())


def resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """Merge with precedence flags > file > defaults; ``None`` flags count as unset."""
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if k in defaults and v is not None})
    return out


def _split(arg: str) -> list[str]:
    return [s for s in arg.split(",") if s]


def _floats(arg: str) -> list[float]:
    return [float(s) for s in _split(arg)]


def _load_sources(paths: list[str], max_nodes: int | None, seed: int) -> list[gs.GraphBundle]:
    out = []
    for i, p in enumerate(paths):
        g = gs.load_bundle(p)
        if max_nodes:
            g = gs.subsample_nodes(g, max_nodes, seed=seed + i)
        out.append(g)
    names = [g.domain_name for g in out]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate source domain names: {names}")
    return out


def _align(graphs, dim: int, cache_dir: str | None):
    return [g.with_features(cached_fit_dal(g.features, dim, cache_dir, gs.bundle_hash(g))) for g in graphs]


def _load_checkpoint(path: str) -> Checkpoint:
    if not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_convert(args) -> int:
    if args.npz:
        g = gs.import_npz(args.npz, args.out, args.name, largest_component=args.largest_component)
    else:
        missing = [f for f in ("edges", "features", "labels") if getattr(args, f) is None]
        if missing:
            raise UsageError(f"convert needs --{' --'.join(missing)} (or --npz)")
        g = gs.convert(args.edges, args.features, args.labels, args.out, args.name)
    print(f"{g.domain_name}\t{g.num_nodes}\t{g.num_directed_edges}\t{g.feature_dim}\t{g.num_classes}")
    return EXIT_OK


def cmd_stats(args) -> int:
    g = gs.load_bundle(args.bundle)
    st = gs.compute_stats(g, spl_sample_size=args.spl_samples, seed=args.seed)
    sys.stdout.write(st.as_tsv())
    return EXIT_OK


PRETRAIN_FLAGS = {"alpha": "alpha", "tau": "tau", "steps": "steps", "lr": "learning_rate", "seed": "seed",
                  "edge_drop": "edge_drop_ratio", "batch_per_domain": "subgraphs_per_domain",
                  "radius": "subgraph_radius", "feature_dim": "feature_dim", "hidden": "hidden_dim",
                  "layers": "num_layers"}


def cmd_pretrain(args) -> int:
    defaults = asdict(PretrainConfig())
    flags = {field: getattr(args, flag) for flag, field in PRETRAIN_FLAGS.items()}
    if args.no_structure_tokens:
        flags["use_structure_tokens"] = False
    cfg = PretrainConfig(**resolve(defaults, _load_config(args.config), flags))
    domains = _align(_load_sources(_split(args.sources), args.max_nodes, cfg.seed), cfg.feature_dim, args.cache_dir)

    def progress(step, loss):
        if step % max(1, cfg.steps // 10) == 0 or step == cfg.steps:
            log.info("step %d/%d loss %.5f", step, cfg.steps, loss)

    ckpt = pretrain_run(domains, cfg, on_step=progress)
    ckpt.save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "checkpoint_hash": ckpt.content_hash(),
                      "roster": ckpt.roster, "config": asdict(cfg)}, sort_keys=True))
    return EXIT_OK


def _plan_from_args(args, base: dict | None = None) -> tb.BenchmarkPlan:
    defaults = {f.name: f.default for f in fields(tb.BenchmarkPlan) if f.name not in ("target", "sources")}
    defaults.update(alphas=[], betas=[])
    base = dict(base or {})
    target = base.pop("target", None)
    sources = base.pop("sources", None)
    flags = {"kind": args.task, "shots": args.shots, "episodes": args.episodes, "seeds": args.seeds,
             "variant": args.variant, "beta": args.beta, "alpha": args.alpha, "tune_steps": args.tune_steps,
             "tune_lr": args.tune_lr, "ego_radius": args.ego_radius, "query_cap": args.query_cap,
             "base_seed": args.seed}
    merged = resolve(defaults, base, flags)
    return tb.BenchmarkPlan(target=target or "", sources=sources or [], **merged)


def _prepare(args, plan_file: dict):
    ckpt_path = args.ckpt or plan_file.get("checkpoint")
    target_path = args.target or plan_file.get("target_bundle")
    if not ckpt_path or not target_path:
        raise UsageError("a checkpoint (--ckpt) and a target bundle (--target) are required")
    ckpt = _load_checkpoint(ckpt_path)
    target_raw = gs.load_bundle(target_path)
    tb.check_roster(target_raw.domain_name, ckpt)
    plan = _plan_from_args(args, {k: v for k, v in plan_file.items()
                                  if k not in ("checkpoint", "plain_checkpoint", "target_bundle")})
    plan.target = target_raw.domain_name
    plan.sources = list(ckpt.roster)
    return ckpt, tb.prepare_target(target_raw, ckpt), plan


def cmd_adapt(args) -> int:
    ckpt, target, plan = _prepare(args, _load_config(args.config))
    table = tb.run_plan(plan, ckpt, target)
    row = table.rows[0]
    out = sys.stdout
    out.write("seed\tepisode\taccuracy\n")
    for s, e, a in zip(row.seeds.tolist(), row.episodes.tolist(), row.accuracies.tolist()):
        out.write(f"{s}\t{e}\t{a!r}\n")
    out.write(f"mean\tstd\n{row.mean:.2f}\t{row.std:.2f}\n")
    if args.out:
        tb.write_outputs(args.out, table, tb.run_report(plan, ckpt, table))
    return EXIT_OK


def cmd_bench(args) -> int:
    plan_file = _load_config(args.plan)
    ckpt, target, plan = _prepare(args, plan_file)
    if args.ablation:
        plain_path = args.plain_ckpt or plan_file.get("plain_checkpoint")
        if not plain_path:
            raise UsageError("--ablation needs --plain-ckpt (a checkpoint pre-trained without structure tokens)")
        plain = _load_checkpoint(plain_path)
        tb.check_roster(target.domain_name, plain)
        table = tb.ablation_matrix(plan, ckpt, plain, target)
        extra = {"plain_checkpoint_hash": plain.content_hash()}
    else:
        table = tb.run_plan(plan, ckpt, target)
        extra = {}
    tb.write_outputs(args.out, table, tb.run_report(plan, ckpt, table, extra))
    sys.stdout.write(table.summary_tsv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    plan_file = _load_config(args.plan)
    ckpt, target, plan = _prepare(args, plan_file)
    grid = _floats(args.grid) if args.grid else (plan.alphas if args.param == "alpha" else plan.betas)
    if not grid:
        raise UsageError(f"empty {args.param} grid (use --grid or the plan's {args.param}s list)")
    table = tb.sensitivity_sweep(plan, ckpt, target, args.param, grid)
    tb.write_outputs(args.out, table, tb.run_report(plan, ckpt, table, {"sweep": {args.param: list(grid)}}))
    sys.stdout.write(table.summary_tsv())
    return EXIT_OK


def cmd_inspect(args) -> int:
    _, manifest = load_tensors(args.ckpt)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _episode_flags(p):
    p.add_argument("--ckpt")
    p.add_argument("--target", help="target bundle directory")
    p.add_argument("--task", choices=["node", "graph"])
    p.add_argument("--shots", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tune-steps", type=int)
    p.add_argument("--tune-lr", type=float)
    p.add_argument("--ego-radius", type=int)
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--query-cap", type=int)
    p.add_argument("--seed", type=int, help="base seed for episode sampling")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="samgpt", description="Multi-domain graph pre-training and dual-prompt adaptation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="edge list + feature CSV + labels (or an .npz dump) -> bundle")
    p.add_argument("--edges")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--npz")
    p.add_argument("--largest-component", action="store_true")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("stats", help="structural statistics of a bundle as TSV")
    p.add_argument("--bundle", required=True)
    p.add_argument("--spl-samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="contrastive pre-training on source bundles")
    p.add_argument("--sources", required=True, help="comma-separated bundle directories, in roster order")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--edge-drop", type=float)
    p.add_argument("--batch-per-domain", type=int)
    p.add_argument("--radius", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--no-structure-tokens", action="store_true")
    p.add_argument("--max-nodes", type=int, help="subsample each source to at most this many nodes")
    p.add_argument("--cache-dir", help="directory for cached aligned features")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="prompt-tune and evaluate episodes on a target bundle")
    _episode_flags(p)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("bench", help="run a benchmark plan and write results/summary/report")
    p.add_argument("--plan")
    _episode_flags(p)
    p.add_argument("--ablation", action="store_true", help="run every variant on shared episodes")
    p.add_argument("--plain-ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="alpha or beta sensitivity sweep")
    p.add_argument("--plan")
    _episode_flags(p)
    p.add_argument("--param", choices=["alpha", "beta"], required=True)
    p.add_argument("--grid", help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint manifest")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    if not message.startswith(f"{category}:"):
        message = f"{category}: {message}"
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except tb.CrossDomainViolation as exc:
        return _fail("cross-domain violation", exc, EXIT_CROSS_DOMAIN)
    except FileNotFoundError as exc:
        return _fail("missing artifact", exc, EXIT_MISSING)
    except FloatingPointError as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except (gs.LoadError, tb.EpisodeError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail("invalid input", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
