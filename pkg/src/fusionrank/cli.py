"""Command-line operator surface for the full pipeline.

Stages compose over one run directory:

    fusionrank datagen --out runs/demo
    fusionrank ingest --out runs/demo
    fusionrank train-retriever --out runs/demo
    fusionrank rerank --out runs/demo
    fusionrank train-reader --out runs/demo
    fusionrank evaluate --out runs/demo

plus `cost-report` (analytic table + instrumented toy run) and `sweep`
(cross-product grid over config fields, CSV summary). Errors print a
machine-readable JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, resolve_grid_key, set_by_path
from .pipeline import PIPELINE_STAGES, STAGE_FNS, run_all

DATA_ROOT_ENV = "FUSIONRANK_DATA_ROOT"


def _resolve_out(out: str) -> Path:
    path = Path(out)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _load(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.world.seed = args.seed
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="RunConfig JSON path")
    parser.add_argument("--out", type=str, required=True, help="run directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--force", action="store_true",
                        help="allow overwriting existing stage outputs")


def _parse_grid(specs: list[str]) -> dict[str, list[str]]:
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"bad --grid entry (want KEY=V1,V2,...): {spec!r}")
        key, values = spec.split("=", 1)
        values = [v for v in values.split(",") if v != ""]
        if not values:
            raise ConfigError(f"--grid entry has no values: {spec!r}")
        grid[resolve_grid_key(key.strip())] = values
    return grid


def cmd_stage(stage: str, args) -> int:
    cfg = _load(args)
    out = _resolve_out(args.out)
    manifest = STAGE_FNS[stage](cfg, out, force=args.force)
    print(f"[{stage}] out={out}")
    for key, value in manifest["metrics"].items():
        if not isinstance(value, (dict, list)):
            print(f"  {key}: {value}")
    if stage == "cost-report":
        print((out / "cost-table.txt").read_text().rstrip())
    if stage == "rerank":
        metrics = manifest["metrics"]
        for system in ("unreranked", "reranked"):
            table = metrics.get("test", {}).get(system, {})
            cells = " ".join(f"H@{k}={v:.4f}" for k, v in sorted(table.items(), key=lambda kv: int(kv[0])))
            print(f"  test {system}: {cells}")
    return 0


def cmd_run_all(args) -> int:
    cfg = _load(args)
    out = _resolve_out(args.out)
    results = run_all(cfg, out, force=args.force)
    for stage in PIPELINE_STAGES:
        print(f"[{stage}] done in {results[stage]['seconds']}s")
    em = results["evaluate"]["metrics"].get("em")
    print(f"test EM: {em}")
    return 0


def cmd_sweep(args) -> int:
    cfg_base = _load(args)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _parse_grid(args.grid)
    if not grid:
        raise ConfigError("sweep needs at least one --grid KEY=V1,V2")
    until = args.until
    if until not in PIPELINE_STAGES:
        raise ConfigError(f"--until must be one of {PIPELINE_STAGES}")
    stages = PIPELINE_STAGES[: PIPELINE_STAGES.index(until) + 1]

    keys = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = load_config(getattr(args, "config", None))
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.world.seed = args.seed
        for key, value in zip(keys, combo):
            set_by_path(cfg, key, value)
        tag = "-".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
        point_dir = out / f"grid-{tag}"
        print(f"[sweep] {tag}")
        manifests = {s: STAGE_FNS[s](cfg, point_dir, force=args.force) for s in stages}
        row = dict(zip(keys, combo))
        rerank_metrics = manifests.get("rerank", {}).get("metrics", {})
        for k, v in rerank_metrics.get("test", {}).get("reranked", {}).items():
            row[f"hits@{k}"] = v
        if "evaluate" in manifests:
            row["em"] = manifests["evaluate"]["metrics"]["em"]
        rows.append(row)

    extras = {c for r in rows for c in r} - set(keys)
    hits_cols = sorted((c for c in extras if c.startswith("hits@")),
                       key=lambda c: int(c.split("@")[1]))
    columns = keys + hits_cols + sorted(extras - set(hits_cols))
    sweep_csv = out / "sweep.csv"
    with open(sweep_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    print(f"[sweep] wrote {sweep_csv} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionrank",
        description="graph-reranked retrieval + fusion reading pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in (*PIPELINE_STAGES, "cost-report"):
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p)
        p.set_defaults(func=lambda a, s=stage: cmd_stage(s, a))
    p = sub.add_parser("run-all", help="run every stage in order")
    _add_common(p)
    p.set_defaults(func=cmd_run_all)
    p = sub.add_parser("sweep", help="cross-product grid over config fields")
    _add_common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="config field and values; repeatable")
    p.add_argument("--until", default="evaluate",
                   help=f"last stage per grid point (default evaluate; one of {PIPELINE_STAGES})")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (FileNotFoundError, FileExistsError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # surface anything else as machine-readable too
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
