"""Command-line surface: gradcheck, train, sweep, report.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from statistics import median
from typing import Any, Optional

import numpy as np

from .config import TrainConfig, load_config
from .gradcheck import DEFAULT_KINDS, run_gradcheck
from .metrics import (
    DEFAULT_THRESHOLDS,
    GroupReport,
    emit_report,
    group_accuracy,
    overfit_fit,
)
from .trainer import NumericalDivergence, train

ENV_SEED = "LLL_SEED"


def _print_group_table(report: GroupReport, train_acc: Optional[float] = None) -> None:
    def cell(v: Optional[float]) -> str:
        return "-" if v is None else f"{v:.4f}"

    header = ["Many", "Medium", "Few", "All"]
    values = [cell(report.many), cell(report.medium), cell(report.few), cell(report.all)]
    if train_acc is not None:
        header.append("Train")
        values.append(cell(train_acc))
    print("  ".join(f"{h:>8}" for h in header))
    print("  ".join(f"{v:>8}" for v in values))


def _resolve_seed(cfg: TrainConfig, flag_seed: Optional[int]) -> None:
    """Precedence: --seed flag, then the LLL_SEED variable, then the config."""
    if flag_seed is not None:
        cfg.run.seed = flag_seed
    elif os.environ.get(ENV_SEED):
        try:
            cfg.run.seed = int(os.environ[ENV_SEED])
        except ValueError:
            raise ValueError(
                f"{ENV_SEED} must be an integer, got {os.environ[ENV_SEED]!r}"
            ) from None


def _default_out() -> Path:
    return Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def cmd_gradcheck(args: argparse.Namespace) -> int:
    kinds = tuple(args.losses.split(",")) if args.losses else DEFAULT_KINDS
    try:
        report = run_gradcheck(
            kinds=kinds, trials=args.trials, tol=args.tol, seed=args.seed
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for kr in report.kinds:
        status = "PASS" if kr.passed else "FAIL"
        detail = (
            f"max rel err {kr.max_rel_err:.3e} "
            f"(trial {kr.worst_trial}, input {kr.worst_input})"
            if kr.trials
            else "no trials"
        )
        print(f"{status}  {kr.kind:<12} trials={kr.trials:<3d} {detail}")
    if report.vacuous:
        print("warning: 0 trials requested; result is a vacuous pass")
        return 0
    if not report.passed:
        print(f"gradient check FAILED at tolerance {report.tolerance}")
        return 3
    print(f"all gradient checks passed at tolerance {report.tolerance}")
    return 0


def _run_and_emit(cfg: TrainConfig, out_dir: Path) -> dict[str, Any]:
    log = train(cfg)
    final = log.final
    report = group_accuracy(final.test_per_class, log.profile)
    fit = overfit_fit(log, log.profile)
    emit_report(log, report, fit, out_dir, config_echo=cfg.to_dict())
    return {
        "many": report.many,
        "medium": report.medium,
        "few": report.few,
        "all": report.all,
        "train_acc": float(np.mean(final.train_per_class)),
        "fit_slope": fit.slope,
        "fit_intercept": fit.intercept,
        "report": report,
    }


def cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        _resolve_seed(cfg, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out is not None:
        cfg.run.output_dir = args.out
    out_dir = Path(cfg.run.output_dir) if cfg.run.output_dir else _default_out()

    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        print(f"output dir: {out_dir}")
        return 0
    try:
        summary = _run_and_emit(cfg, out_dir)
    except NumericalDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print_group_table(summary["report"], summary["train_acc"])
    print(f"report written to {out_dir}")
    return 0


def _sweep_cell(payload: tuple[dict, str, Any, int, str]) -> dict[str, Any]:
    """One sweep cell in a worker process; never raises."""
    from .config import from_dict  # re-import inside the worker

    raw, parameter, value, seed, out_dir = payload
    cfg = from_dict(raw)
    cfg.set_by_path(parameter, value)
    cfg.run.seed = seed
    try:
        result = _run_and_emit(cfg, Path(out_dir))
        result.pop("report")
        return {"value": value, "seed": seed, "ok": True, **result}
    except Exception as exc:  # recorded, sweep continues
        return {"value": value, "seed": seed, "ok": False, "error": str(exc)}


def _median_or_none(values: list[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return median(present) if present else None


def cmd_sweep(args: argparse.Namespace) -> int:
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib

    spec_path = Path(args.spec)
    try:
        with open(spec_path, "rb") as fh:
            spec = tomllib.load(fh)
    except FileNotFoundError:
        print(f"error: sweep spec not found: {spec_path}", file=sys.stderr)
        return 1
    except tomllib.TOMLDecodeError as exc:
        print(f"error: {spec_path}: {exc}", file=sys.stderr)
        return 1

    try:
        parameter = spec["parameter"]
        values = list(spec["values"])
        seeds = [int(s) for s in spec["seeds"]]
        base_path = spec_path.parent / spec["base_config"]
        cfg = load_config(base_path)
    except KeyError as exc:
        print(f"error: sweep spec missing key {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not values or not seeds:
        print("error: sweep needs non-empty values and seeds", file=sys.stderr)
        return 1

    out_base = Path(spec.get("output_dir") or _default_out() / "sweep")
    raw = cfg.to_dict()
    jobs = []
    for value in values:
        for seed in seeds:
            cell_dir = out_base / f"{parameter.split('.')[-1]}={value}" / f"seed{seed}"
            jobs.append((raw, parameter, value, seed, str(cell_dir)))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(job) for job in jobs]

    failures = [r for r in results if not r["ok"]]
    for f in failures:
        print(
            f"cell failed: {parameter}={f['value']} seed={f['seed']}: {f['error']}",
            file=sys.stderr,
        )

    rows = []
    for value in sorted(values):
        cells = [r for r in results if r["ok"] and r["value"] == value]
        if not cells:
            continue
        rows.append(
            {
                "value": value,
                "many": _median_or_none([c["many"] for c in cells]),
                "medium": _median_or_none([c["medium"] for c in cells]),
                "few": _median_or_none([c["few"] for c in cells]),
                "all": _median_or_none([c["all"] for c in cells]),
                "train_acc": _median_or_none([c["train_acc"] for c in cells]),
            }
        )

    out_base.mkdir(parents=True, exist_ok=True)
    csv_path = out_base / "sweep.csv"
    def cell_str(v: Optional[float]) -> str:
        return "" if v is None else f"{v:.6f}"

    lines = ["value,many,medium,few,all,train_acc"]
    for r in rows:
        lines.append(
            f"{r['value']},{cell_str(r['many'])},{cell_str(r['medium'])},"
            f"{cell_str(r['few'])},{cell_str(r['all'])},{cell_str(r['train_acc'])}"
        )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(f"{'value':>10}  {'Many':>8}  {'Medium':>8}  {'Few':>8}  {'All':>8}  {'Train':>8}")
    for r in rows:
        print(
            f"{r['value']!s:>10}  "
            + "  ".join(
                f"{cell_str(r[k]) or '-':>8}"
                for k in ("many", "medium", "few", "all", "train_acc")
            )
        )
    print(f"sweep table written to {csv_path}")
    if not rows:
        return 2
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    log_dir = Path(args.log)
    summary_path = log_dir / "summary.json"
    if not summary_path.exists():
        print(f"error: no run summary under {log_dir}", file=sys.stderr)
        return 1
    with open(summary_path, encoding="utf-8") as fh:
        summary = json.load(fh)
    report = GroupReport(
        many=summary.get("many"),
        medium=summary.get("medium"),
        few=summary.get("few"),
        all=summary["all"],
        membership=[],
    )
    _print_group_table(report, summary.get("final_train_acc"))
    print(
        f"gap fit: slope {summary['fit_slope']:.6f}, "
        f"intercept {summary['fit_intercept']:.6f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltlab",
        description="Long-tailed loss laboratory: gradient checks, training "
        "runs, parameter sweeps and reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="verify analytic gradients")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--losses", type=str, default="", help="comma-separated kinds")
    g.set_defaults(fn=cmd_gradcheck)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", type=str, default=None)
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="run a value x seed grid")
    s.add_argument("--spec", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("report", help="re-print the summary of a finished run")
    r.add_argument("--log", required=True)
    r.set_defaults(fn=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
