"""Command-line interface: register, benchmark, analyze.

Exit codes: 0 success (including a registration that merely hit the
iteration cap), 1 usage/I-O/config errors, 2 a registration that failed
outright. Diagnostics go to stderr; stdout stays clean for piped CSV.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation
from .cloud import load_cloud
from .errors import ConfigError, MissingBaseline, RobustIcpError
from .icp import IcpConfig, StopReason, export_trace_csv, register
from .minimizer import ConvergenceSpec
from .robust import FilterKind, FilterSpec, parse_filter_spec
from .se3 import RigidTransform, load_transform, save_transform, transform_to_text

# Per-kind fallback tunings for `--filters all` (empirically reasonable
# mid-valley values); sweeps override them.
DEFAULT_PARAMS: dict[FilterKind, FilterSpec] = {
    FilterKind.L2: FilterSpec(FilterKind.L2),
    FilterKind.L1: FilterSpec(FilterKind.L1),
    FilterKind.HUBER: FilterSpec(FilterKind.HUBER, k=0.33),
    FilterKind.CAUCHY: FilterSpec(FilterKind.CAUCHY, k=0.2),
    FilterKind.GM: FilterSpec(FilterKind.GM, k=4.52),
    FilterKind.SC: FilterSpec(FilterKind.SC, k=1.0),
    FilterKind.WELSCH: FilterSpec(FilterKind.WELSCH, k=1.59),
    FilterKind.TUKEY: FilterSpec(FilterKind.TUKEY, k=3.18),
    FilterKind.STUDENT: FilterSpec(FilterKind.STUDENT, k=0.16),
    FilterKind.MAX_DISTANCE: FilterSpec(FilterKind.MAX_DISTANCE, k=0.4),
    FilterKind.TRIMMED: FilterSpec(FilterKind.TRIMMED, f=0.68),
    FilterKind.MEDIAN: FilterSpec(FilterKind.MEDIAN),
    FilterKind.VAR_TRIMMED: FilterSpec(FilterKind.VAR_TRIMMED, lam=1.91),
}

_CONFIG_KEYS = {
    "filter",
    "knn",
    "normals_k",
    "max_density",
    "keep_ratio",
    "trans_eps",
    "rot_eps",
    "max_iter",
    "seed",
}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value config; '#' starts a comment; unknown keys rejected."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{path}: line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def build_icp_config(file_values: dict[str, str], filter_flag: str | None) -> IcpConfig:
    """Merge config-file values under a default IcpConfig; a --filter flag
    beats the file's filter entry."""
    config = IcpConfig()
    conv = config.convergence
    try:
        if "knn" in file_values:
            config = replace(config, knn=int(file_values["knn"]))
        if "normals_k" in file_values:
            config = replace(config, normals_k=int(file_values["normals_k"]))
        if "max_density" in file_values:
            raw = file_values["max_density"]
            config = replace(config, max_density=None if raw == "none" else float(raw))
        if "keep_ratio" in file_values:
            config = replace(config, keep_ratio=float(file_values["keep_ratio"]))
        if "seed" in file_values:
            config = replace(config, seed=int(file_values["seed"]))
        conv = ConvergenceSpec(
            trans_eps=float(file_values.get("trans_eps", conv.trans_eps)),
            rot_eps=float(file_values.get("rot_eps", conv.rot_eps)),
            max_iter=int(file_values.get("max_iter", conv.max_iter)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    config = replace(config, convergence=conv)

    filter_text = filter_flag if filter_flag is not None else file_values.get("filter")
    if filter_text is not None:
        config = replace(config, filter=parse_filter_spec(filter_text))
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_register(args: argparse.Namespace) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    config = build_icp_config(file_values, args.filter)

    reading = load_cloud(args.reading)
    reference = load_cloud(args.reference)
    t0 = RigidTransform.identity() if args.t0 == "identity" else load_transform(args.t0)

    result = register(reading, reference, t0, config)
    if args.out:
        save_transform(result.final_transform, args.out)
    else:
        sys.stdout.write(transform_to_text(result.final_transform))
    if args.trace:
        export_trace_csv(result, args.trace)
    print(
        f"stop={result.stop_reason.value} iterations={result.iterations}",
        file=sys.stderr,
    )
    return 2 if result.stop_reason is StopReason.FAILED else 0


def _parse_filter_list(text: str) -> list[FilterSpec]:
    if text == "all":
        return list(DEFAULT_PARAMS.values())
    specs = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        if "," in item and "=" not in item:
            # convenience: bare kinds may be comma-separated ("l2,l1")
            specs.extend(_parse_filter_list(item.replace(",", ";")))
        else:
            specs.append(parse_filter_spec(item))
    if not specs:
        raise ConfigError("empty --filters list")
    return specs


def cmd_benchmark(args: argparse.Namespace) -> int:
    entries = evaluation.load_pair_manifest(args.pairs)
    pairs = evaluation.load_pairs(entries)
    base_specs = _parse_filter_list(args.filters)

    specs: list[FilterSpec] = []
    if args.sweep:
        for spec in base_specs:
            if spec.parameter() is None:
                specs.append(spec)
            else:
                specs.extend(evaluation.expand_sweep(spec))
    else:
        specs = base_specs

    perturbation = evaluation.PerturbationSpec(count=args.perturbations, seed=args.seed)
    config = IcpConfig()

    out_file = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        import csv as _csv

        writer = _csv.writer(out_file)
        writer.writerow(evaluation.RECORD_FIELDS)
        records = evaluation.run_benchmark(
            pairs,
            specs,
            perturbation,
            config,
            jobs=args.jobs,
            on_record=lambda rec: writer.writerow(rec.row()),
        )
    finally:
        if args.out:
            out_file.close()

    summary_dst = sys.stdout if args.out else sys.stderr
    print("filter,scale_mode,param,n,median_trans_err_m,median_rot_err_rad", file=summary_dst)
    for row in evaluation.aggregate_median(records):
        param = "" if row["param"] is None else format(row["param"], "g")
        print(
            f"{row['filter']},{row['scale_mode']},{param},{row['n']},"
            f"{row['median_trans_err']:.6g},{row['median_rot_err']:.6g}",
            file=summary_dst,
        )
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    records = evaluation.read_records_csv(args.records)
    if not records:
        raise RobustIcpError(f"{args.records}: no records")
    out = sys.stdout

    if args.table or not args.valley:
        rows = evaluation.aggregate_median(records)
        # Best parameter per (filter, scale_mode) = smallest median translation error.
        best: dict[tuple, dict] = {}
        for row in rows:
            key = (row["filter"], row["scale_mode"])
            if key not in best or row["median_trans_err"] < best[key]["median_trans_err"]:
                best[key] = row
        print("filter,scale_mode,best_param,n,median_trans_err_m,median_rot_err_rad", file=out)
        for key in sorted(best):
            row = best[key]
            param = "" if row["param"] is None else format(row["param"], "g")
            print(
                f"{row['filter']},{row['scale_mode']},{param},{row['n']},"
                f"{row['median_trans_err']:.6g},{row['median_rot_err']:.6g}",
                file=out,
            )

    if args.valley:
        swept = sorted(
            {
                (r.filter, r.scale_mode)
                for r in records
                if r.param is not None
            }
        )
        print("filter,scale_mode,valley_low,valley_high", file=out)
        for kind_value, scale_mode in swept:
            interval = evaluation.flat_valley(records, kind_value, scale_mode)
            if interval is None:
                print(f"{kind_value},{scale_mode},,", file=out)
            else:
                print(f"{kind_value},{scale_mode},{interval[0]:g},{interval[1]:g}", file=out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    kinds = ", ".join(k.value for k in FilterKind)
    parser = argparse.ArgumentParser(
        prog="robusticp",
        description=(
            "Robust 3D point-cloud registration and benchmarking. "
            f"Filter kinds: {kinds}. Filter spec grammar: kind:key=val,... "
            "(keys: k, f, lambda, fmin, fmax, scale; scale is fixed:<s>, mad, "
            "or berg:<sigma*>:<xi>)."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_reg = sub.add_parser("register", help="register a reading cloud onto a reference cloud")
    p_reg.add_argument("reading", help="reading cloud (CSV or ascii PLY)")
    p_reg.add_argument("reference", help="reference cloud (CSV or ascii PLY)")
    p_reg.add_argument("--t0", default="identity", help="prior transform file or 'identity'")
    p_reg.add_argument("--filter", default=None, help=f"filter spec, e.g. cauchy:k=0.2 ({kinds})")
    p_reg.add_argument("--config", default=None, help="key=value config file")
    p_reg.add_argument("--out", default=None, help="write final 4x4 transform here (default stdout)")
    p_reg.add_argument("--trace", default=None, help="write per-iteration trace CSV here")
    p_reg.set_defaults(func=cmd_register)

    p_bench = sub.add_parser("benchmark", help="run the pairs x filters x perturbations factorial")
    p_bench.add_argument("--pairs", required=True, help="pair manifest CSV")
    p_bench.add_argument(
        "--filters",
        default="all",
        help=f"semicolon/comma list of filter specs, or 'all' ({kinds})",
    )
    p_bench.add_argument("--sweep", action="store_true", help="sweep each filter's parameter grid")
    p_bench.add_argument("--perturbations", type=int, default=128, help="perturbations per cell")
    p_bench.add_argument("--seed", type=int, default=0, help="master seed")
    p_bench.add_argument("--jobs", type=int, default=1, help="parallel benchmark cells")
    p_bench.add_argument("--out", default=None, help="records CSV (default stdout)")
    p_bench.set_defaults(func=cmd_benchmark)

    p_an = sub.add_parser("analyze", help="summarize a records CSV")
    p_an.add_argument("--records", required=True, help="records CSV from 'benchmark'")
    p_an.add_argument("--table", action="store_true", help="best-parameter median table")
    p_an.add_argument("--valley", action="store_true", help="parameter ranges beating the l1 baseline")
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingBaseline as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RobustIcpError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
