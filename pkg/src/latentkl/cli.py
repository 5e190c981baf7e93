"""Command-line runner: ``latentkl coeffs | simulate | verify``.

Exit codes: 0 success, 1 configuration error, 2 non-regular model,
3 too few sample sizes to fit, 4 verdicts contradict the expected ordering.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from collections import defaultdict

from .config import ConfigError, load_config
from .fisher import coefficient_report
from .model import NonRegularError
from .montecarlo import (
    PAIRED,
    TARGETS,
    ErrorEstimate,
    compare_methods,
    fit_leading_coefficient,
    run_sweep,
    theory_coefficient,
)
from .estimators import BAYES, ML

EXIT_OK, EXIT_CONFIG, EXIT_NONREGULAR, EXIT_GRID, EXIT_ORDER = 0, 1, 2, 3, 4
CSV_COLUMNS = ("target", "method", "n", "alpha", "mean", "stderr", "reps", "flags", "seed")


class InsufficientData(Exception):
    pass


# -- coeffs -------------------------------------------------------------------


def coeffs_report(cfg) -> dict:
    bundle = cfg.fisher()
    alphas = cfg.alphas or (0.25, 0.5, 1.0)
    report = coefficient_report(bundle, alphas).as_dict()
    report.update(
        {
            "method": bundle.method,
            "error_bound": bundle.error_bound,
            "i_x": bundle.i_x.tolist(),
            "i_xy": bundle.i_xy.tolist(),
            "i_y_given_x": bundle.i_y_given_x.tolist(),
            "k_xy": {format(a, "g"): bundle.k_xy(a).tolist() for a in alphas},
        }
    )
    if bundle.stderr:
        report["stderr"] = {k: v.tolist() for k, v in bundle.stderr.items()}
    return report


def cmd_coeffs(cfg, out) -> int:
    text = json.dumps(coeffs_report(cfg), indent=2) + "\n"
    _emit(text, out)
    return EXIT_OK


# -- simulate -----------------------------------------------------------------


def _fmt_alpha(alpha):
    return "" if alpha is None else repr(float(alpha))


def write_estimates(estimates, seed, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for e in estimates:
        writer.writerow([e.target, e.method, e.n, _fmt_alpha(e.alpha), repr(e.mean), repr(e.stderr),
                         e.reps, e.flags, seed])


def read_estimates(path) -> list[ErrorEstimate]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != list(CSV_COLUMNS):
            raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                out.append(
                    ErrorEstimate(
                        row["target"], row["method"], int(row["n"]),
                        float(row["alpha"]) if row["alpha"] else None,
                        float(row["mean"]), float(row["stderr"]), int(row["reps"]), int(row["flags"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}, line {line}: {exc}") from None
    return out


def paired_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".paired.csv"


def cmd_simulate(cfg, out, seed, threads) -> int:
    exp = cfg.experiment()
    start = time.monotonic()

    def progress(n):
        print(f"n={n} done ({time.monotonic() - start:.1f}s)", file=sys.stderr, flush=True)

    result = run_sweep(exp, cfg.n_grid, cfg.reps, seed, cfg.targets, cfg.alphas, threads, progress)
    estimates = result.estimates()
    buf = io.StringIO()
    write_estimates(estimates, seed, buf)
    _emit(buf.getvalue(), out)
    if out:
        paired = io.StringIO()
        write_estimates(result.paired(), seed, paired)
        _emit(paired.getvalue(), paired_path(out))
    invalid = [e for e in estimates if not e.valid]
    for e in invalid:
        print(f"warning: {e.target}/{e.method} n={e.n} alpha={e.alpha}: {e.flags} of {e.reps} "
              "replications flagged; run marked invalid", file=sys.stderr)
    return EXIT_OK


# -- verify -------------------------------------------------------------------


def _series(estimates):
    groups = defaultdict(list)
    for e in estimates:
        groups[(e.target, e.method, e.alpha)].append(e)
    return groups


def _consistent(paired, ml, bayes) -> bool:
    """Whether the paired series agrees with the difference of the two method series."""
    ml_by_n = {e.n: e for e in ml}
    b_by_n = {e.n: e for e in bayes}
    if {e.n for e in paired} != set(ml_by_n) or set(ml_by_n) != set(b_by_n):
        return False
    for p in paired:
        b, m = b_by_n[p.n], ml_by_n[p.n]
        if abs(p.mean - (b.mean - m.mean)) > 1e-9 * (abs(b.mean) + abs(m.mean)) + 1e-12:
            return False
    return True


def verify(report, estimates, paired=()):
    """Fit every series and classify every target present under both methods.

    Returns ``(fit_rows, verdicts)``; raises ``InsufficientData`` when any
    series has fewer than three sample sizes or no target can be compared.
    """
    groups = _series(e for e in estimates if e.method in (ML, BAYES))
    paired_groups = _series(e for e in paired if e.method == PAIRED)
    order = {t: i for i, t in enumerate(TARGETS)}
    keys = sorted(groups, key=lambda k: (order.get(k[0], 99), k[1] != ML, k[2] or 0.0))
    rows = []
    for key in keys:
        target, method, alpha = key
        if target not in order:
            raise ValueError(f"unknown target {target!r} in CSV")
        if len({e.n for e in groups[key]}) < 3:
            raise InsufficientData(f"{target}/{method} alpha={alpha}: fewer than three sample sizes")
        fit = fit_leading_coefficient(groups[key])
        theory = theory_coefficient(report, target, method, alpha)
        rows.append((key, fit, theory))

    verdicts = []
    for target, method, alpha in keys:
        if method != BAYES or (target, ML, alpha) not in groups:
            continue
        ml, bayes = groups[(target, ML, alpha)], groups[(target, BAYES, alpha)]
        pair = paired_groups.get((target, PAIRED, alpha))
        if pair and not _consistent(pair, ml, bayes):
            print(f"warning: paired series for {target} alpha={alpha} disagrees with the method "
                  "series; using unpaired differences", file=sys.stderr)
            pair = None
        verdicts.append(compare_methods(target, ml, bayes, pair, alpha))
    if not verdicts:
        raise InsufficientData("no target is present under both ML and Bayes")
    return rows, verdicts


def format_verify(rows, verdicts) -> str:
    lines = [f"{'target':<9} {'method':<6} {'alpha':>5} {'c_fit':>9} {'se':>8} {'c_theory':>9} {'z':>6}"]
    for (target, method, alpha), fit, theory in rows:
        z = (fit.c_hat - theory) / fit.c_se if fit.c_se > 0 else (0.0 if fit.c_hat == theory else math.inf)
        lines.append(f"{target:<9} {method:<6} {'' if alpha is None else format(alpha, 'g'):>5} "
                     f"{fit.c_hat:9.4f} {fit.c_se:8.4f} {theory:9.4f} {z:6.2f}")
    lines.append("")
    lines.append(f"{'target':<9} {'alpha':>5} {'Bayes-ML':>9} {'se':>8} {'verdict':<13} {'expected':<13} ok")
    for v in verdicts:
        alpha = "" if v.alpha is None else format(v.alpha, "g")
        lines.append(f"{v.target:<9} {alpha:>5} {v.diff:9.4f} {v.diff_se:8.4f} {v.verdict:<13} "
                     f"{v.expected:<13} {'yes' if v.ok else 'NO'}")
    return "\n".join(lines) + "\n"


def cmd_verify(cfg, csv_path, out) -> int:
    report = coefficient_report(cfg.fisher(), _alphas_in(csv_path, cfg))
    estimates = read_estimates(csv_path)
    side = paired_path(csv_path)
    paired = read_estimates(side) if os.path.exists(side) else []
    rows, verdicts = verify(report, estimates, paired)
    text = format_verify(rows, verdicts)
    bad = [v for v in verdicts if not v.ok]
    if bad:
        names = ", ".join(v.target + ("" if v.alpha is None else f"(alpha={v.alpha:g})") for v in bad)
        text += f"ordering violated: {names}\n"
    else:
        text += "all verdicts match the expected ordering\n"
    _emit(text, out)
    return EXIT_ORDER if bad else EXIT_OK


def _alphas_in(csv_path, cfg):
    alphas = {e.alpha for e in read_estimates(csv_path) if e.alpha is not None}
    return tuple(sorted(alphas | set(cfg.alphas))) or (1.0,)


# -- entry point --------------------------------------------------------------


def _emit(text, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentkl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment configuration")
    common.add_argument("--out", help="output path (default: config output block, else stdout)")
    sub.add_parser("coeffs", parents=[common], help="Fisher matrices and theoretical coefficients as JSON")
    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo sweep written as CSV")
    sim.add_argument("--seed", type=int, help="root seed, overrides the config")
    sim.add_argument("--threads", type=int, help="worker processes, overrides the config")
    ver = sub.add_parser("verify", parents=[common], help="fit coefficients from a sweep CSV and check verdicts")
    ver.add_argument("--csv", help="sweep CSV (default: output.csv from the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "coeffs":
            return cmd_coeffs(cfg, args.out or cfg.output.get("coeffs"))
        if args.command == "simulate":
            seed = cfg.seed if args.seed is None else args.seed
            threads = cfg.threads if args.threads is None else args.threads
            if not 0 <= seed < 2**64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            if threads < 1:
                raise ConfigError("--threads", "must be at least 1")
            return cmd_simulate(cfg, args.out or cfg.output.get("csv"), seed, threads)
        csv_path = args.csv or cfg.output.get("csv")
        if not csv_path:
            raise ConfigError("--csv", "no sweep CSV given and output.csv is not set")
        return cmd_verify(cfg, csv_path, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonRegularError as exc:
        print(f"non-regular model: {exc}", file=sys.stderr)
        return EXIT_NONREGULAR
    except InsufficientData as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_GRID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
