"""Command-line front end.

Exit codes: 0 success, 1 sweep finished with failed cells (or verify found a
failing check), 2 configuration error, 3 runtime error. Summaries go to
stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import traceback
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError

EXIT_OK, EXIT_CELL_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides += [f"seeds.data={args.seed}", f"seeds.model={args.seed}", f"seeds.run={args.seed}"]
    if args.deterministic:
        overrides.append("deterministic=true")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _summary_line(row: dict) -> str:
    pcc = "UNDEFINED" if row["pcc"] is None else f"{row['pcc']:.4f}"
    return (f"{row['method']:<16} {row['eval_point']:<18} loss={row['loss']:.4f} rmse={row['rmse']:.4f} "
            f"pcc={pcc} payload={row['payload_bytes']:.0f}B")


def cmd_run(args) -> int:
    from .harness import run_experiment
    from .metrics import emit_report

    cfg = resolve_config(args)
    out = Path(args.out)
    log_dir = out / "rounds" if args.log_rounds else None
    result = run_experiment(cfg, log_dir)
    emit_report(result, out, deterministic=cfg.deterministic)
    for row in result.table:
        print(_summary_line(row))
    return EXIT_OK


SWEEP_KEYS = {"strategies", "scopes", "cl_methods", "clients", "augment", "overrides"}


def load_sweep(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"sweep file not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(spec) - SWEEP_KEYS
    if unknown:
        raise ConfigError(f"unknown sweep key: {sorted(unknown)[0]}")
    return spec


def sweep_cells(base: ExperimentConfig, spec: dict) -> list[tuple[str, list[str]]]:
    """Cross product of the sweep axes as (label, overrides). LGR pairs only with AVG/ROOT."""
    strategies = spec.get("strategies", [base.strategy.name])
    scopes = spec.get("scopes", [base.strategy.scope])
    methods = spec.get("cl_methods", [base.cl.method])
    clients = spec.get("clients", [base.n_clients])
    augment = spec.get("augment", [base.augment])
    cells = []
    for s, sc, m, n, a in itertools.product(strategies, scopes, methods, clients, augment):
        if m == "LGR" and (s, sc) != ("AVG", "ROOT"):
            continue
        ov = [f'strategy.name="{s}"', f'strategy.scope="{sc}"', f'cl.method="{m}"', f"n_clients={n}",
              f"augment={json.dumps(bool(a))}"] + list(spec.get("overrides", []))
        cells.append((f"{s}-{sc}-{m}-c{n}-{'aug' if a else 'noaug'}", ov))
    return cells


def cmd_sweep(args) -> int:
    from .harness import run_experiment
    from .metrics import emit_report, report_csv, table_rows

    base = resolve_config(args)
    spec = load_sweep(args.sweep)
    out = Path(args.out)
    rows, failures = [], []
    for label, ov in sweep_cells(base, spec):
        try:
            cfg = apply_overrides(base, ov)
            result = run_experiment(cfg)
            emit_report(result, out / "cells" / label, deterministic=cfg.deterministic)
            rows.extend(table_rows(result, cfg.deterministic))
            for row in result.table:
                print(_summary_line(row))
        except Exception as exc:  # record and continue with the next cell
            failures.append({"cell": label, "error": f"{type(exc).__name__}: {exc}"})
            _err(f"cell {label} failed: {type(exc).__name__}: {exc}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(report_csv(rows), encoding="utf-8")
    (out / "sweep_config.json").write_text(json.dumps({"base": base.to_dict(), "sweep": spec}, sort_keys=True,
                                                      indent=2) + "\n", encoding="utf-8")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n", encoding="utf-8")
        return EXIT_CELL_FAILED
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .dataset import export_csv, generate_dataset, write_dataset

    if args.n_scenes < 8:
        raise ConfigError("--n-scenes must be >= 8")
    if args.image_size % 8:
        raise ConfigError("--image-size must be a multiple of 8")
    data = generate_dataset(args.n_scenes, args.image_size, args.seed)
    path = write_dataset(data, args.out, args.seed, args.n_scenes, args.image_size)
    if args.csv:
        export_csv(data, Path(args.out) / "scenes.csv")
    print(f"wrote {len(data)} scenes to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import report_csv

    path = Path(args.input)
    if not path.is_file():
        raise ConfigError(f"result file not found: {path}")
    doc = json.loads(path.read_text())
    if "table" not in doc:
        raise ConfigError(f"{path}: not a result file (no table)")
    text = report_csv(doc["table"])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(fault=args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_CELL_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedscape", description="Federated and federated-continual learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_flags(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--override", action="append", metavar="K=V", help="dotted config override, repeatable")
        sp.add_argument("--seed", type=int, help="set data, model and run seeds")
        sp.add_argument("--deterministic", action="store_true", help="withhold timings from result files")

    sp = sub.add_parser("run", help="run one experiment")
    experiment_flags(sp)
    sp.add_argument("--log-rounds", action="store_true", help="write per-round update logs for replay")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a strategy x method grid")
    experiment_flags(sp)
    sp.add_argument("--sweep", required=True, help="sweep spec JSON")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-scenes", type=int, default=2000)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", action="store_true", help="also export CSV + tensor files")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("report", help="render a stored result.json as CSV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("verify", help="run the oracle suite")
    sp.add_argument("--inject-fault", choices=["unweighted-mean"], help="seed a known fault")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:
        _err(f"runtime error: {type(exc).__name__}: {exc}")
        _err(traceback.format_exc())
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
