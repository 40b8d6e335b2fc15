"""Command-line entry point: run, compare, ablate, schema.

Exit codes are a stable contract: 0 success, 1 configuration error,
2 runtime failure. All artifacts land inside the configured output
directory; reruns with the same config and seed produce byte-identical
reports (stage timings go to a separate, non-deterministic file).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, manifest_text, schema_text
from .data_stream import DataError, generate_synthetic_stream, load_interactions
from .engine import ABLATION_FLAGS, run_stream, trace_to_tsv
from .evaluation import reports_to_table, reports_to_tsv, timings_to_tsv

log = logging.getLogger(__name__)

_METHOD_ALIASES = {"ccd": "ccd", "finetune": "finetune", "fine-tune": "finetune",
                   "fullbatch": "fullbatch", "full-batch": "fullbatch"}


def _records_for(cfg: RunConfig):
    if cfg.source == "file":
        return load_interactions(cfg.path, delimiter=cfg.delimiter_char, columns=cfg.columns)
    return generate_synthetic_stream(cfg.synth, seed=cfg.seed)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _execute(cfg: RunConfig, method: str, out_dir: Path, records=None):
    records = _records_for(cfg) if records is None else records
    trace: list = []
    reports = run_stream(records, cfg, method, trace=trace)
    _write(out_dir / "manifest.cfg", manifest_text(cfg))
    _write(out_dir / "reports.tsv", reports_to_tsv(reports))
    _write(out_dir / "reports.txt", reports_to_table(reports, key=f"recall@{max(cfg.k_values)}"))
    _write(out_dir / "trace.tsv", trace_to_tsv(trace))
    _write(out_dir / "timings.tsv", timings_to_tsv(reports))
    return reports


def cmd_run(args) -> int:
    cfg = _load_with_overrides(args)
    reports = _execute(cfg, "ccd", Path(cfg.out_dir))
    sys.stdout.write(reports_to_table(reports, key=f"recall@{max(cfg.k_values)}"))
    return 0


def cmd_compare(args) -> int:
    cfg = _load_with_overrides(args)
    methods = []
    for name in args.methods.split(","):
        canon = _METHOD_ALIASES.get(name.strip().lower())
        if canon is None:
            raise ConfigError(f"unknown method name: {name.strip()!r} "
                              f"(expected one of {', '.join(sorted(set(_METHOD_ALIASES)))})")
        if canon not in methods:
            methods.append(canon)
    records = _records_for(cfg)
    out_root = Path(cfg.out_dir)
    by_method = {}
    for method in methods:
        by_method[method] = _execute(cfg, method, out_root / method, records=records)
    key = f"recall@{max(cfg.k_values)}"
    table = []
    for method in methods:
        table.append(f"== {method} ==")
        table.append(reports_to_table(by_method[method], key=key).rstrip("\n"))
    _write(out_root / "compare.txt", "\n".join(table) + "\n")
    baselines = [m for m in methods if m != "ccd"]
    if "ccd" in methods and baselines:
        lines = ["block\tmodel\thmean_gain_" + key]
        for b in range(cfg.num_blocks):
            for model in ("student", "teacher"):
                ccd_h = by_method["ccd"][b].metrics[model].hmean[key]
                best = max(by_method[m][b].metrics[model].hmean[key] for m in baselines)
                lines.append(f"{b}\t{model}\t{ccd_h - best:.10f}")
        _write(out_root / "gains.tsv", "\n".join(lines) + "\n")
    sys.stdout.write("\n".join(table) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_with_overrides(args)
    flags = [f.strip() for f in args.flags.split(",") if f.strip()] if args.flags else []
    for flag in flags:
        if flag not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag: {flag!r} "
                              f"(expected one of {', '.join(sorted(ABLATION_FLAGS))})")
    records = _records_for(cfg)
    out_root = Path(cfg.out_dir)
    runs = [("full", cfg)]
    for flag in flags:
        cycle = dataclasses.replace(cfg.cycle, **{flag: True})
        runs.append((flag, dataclasses.replace(cfg, cycle=cycle)))
    key = f"recall@{max(cfg.k_values)}"
    results = {}
    for name, run_cfg in runs:
        results[name] = _execute(run_cfg, "ccd", out_root / name, records=records)
    lines = ["run\tlabel\tmodel\thmean_" + key + "\tdelta_vs_full"]
    final = cfg.num_blocks - 1
    for name, _ in runs:
        label = "full" if name == "full" else ABLATION_FLAGS[name]
        for model in ("student", "teacher"):
            h = results[name][final].metrics[model].hmean[key]
            base = results["full"][final].metrics[model].hmean[key]
            lines.append(f"{name}\t{label}\t{model}\t{h:.10f}\t{h - base:.10f}")
    text = "\n".join(lines) + "\n"
    _write(out_root / "ablate.tsv", text)
    sys.stdout.write(text)
    return 0


def cmd_schema(_args) -> int:
    sys.stdout.write(schema_text())
    return 0


def _load_with_overrides(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccdrec",
                                     description="continual teacher-student recommender runs")
    parser.add_argument("--version", action="version", version=f"ccdrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full method on the configured stream")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several methods on shared data")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--methods", required=True, help="comma list: ccd,finetune,fullbatch")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--out", default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_abl = sub.add_parser("ablate", help="full run plus one run per disabled component")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--flags", default="", help=f"comma list of {', '.join(ABLATION_FLAGS)}")
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--out", default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_schema = sub.add_parser("schema", help="print the documented config schema")
    p_schema.set_defaults(func=cmd_schema)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CCDREC_LOG_LEVEL", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - exit code 2 is part of the contract
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
