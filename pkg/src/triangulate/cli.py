"""Command-line entry point: ``triangulate <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import secrets
import sys
import warnings
from pathlib import Path

from . import __version__
from .cohort import BINARY, CONTINUOUS, build_preference_iv, first_stage_f_statistic, load_cohort, load_history, write_cohort
from .errors import TriangulateError, WeakInstrumentWarning
from .estimators import EstimatorOptions, canonical_method, estimate
from .heterogeneity import all_subsets, bootstrap_ensemble, pairwise_similarity_study, q_statistic, write_q_tests
from .matching import balance_report, default_covariates, match_cohort
from .simulation import PRESETS, run_monte_carlo, run_poa_study, simulate_cohort

log = logging.getLogger("triangulate")

COMMANDS = ("estimate", "match", "het", "simulate", "poa-study", "iv-build")
FORMATS = ("csv", "json")
# keys left out of the manifest so that it only depends on what changes results
_VOLATILE = ("threads", "out", "config")

_NEEDS_Z = {"IV_ratio", "IV_TSLS", "POA_IV", "CaT_with_Z", "DiD_with_Z"}
_NEEDS_Y0 = {"POA_IV", "DiD", "DiD_with_Z"}


class ConfigError(Exception):
    """Invalid or inconsistent command-line configuration (exit status 2)."""


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triangulate", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file supplying option defaults")
        p.add_argument("--input", help="cohort CSV")
        p.add_argument("--history", help="prescription history CSV (iv-build)")
        p.add_argument("--methods", help="comma-separated method list")
        p.add_argument("--preset", help="scenario preset id, or a comma-separated list")
        p.add_argument("--nsim", type=int, help="number of simulation runs")
        p.add_argument("--bootstrap", type=int, help="bootstrap replicates (default 500)")
        p.add_argument("--seed", type=int, help="master seed; drawn at random and logged when absent")
        p.add_argument("--alpha", type=float, help="test level (default 0.05)")
        p.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", help="comma-separated subset of csv,json")
        p.add_argument("--with-z", action="store_true", default=None, help="add the Z-adjusted CaT and DiD")
        p.add_argument("--iv-mode", choices=("static", "dynamic"), help="preference instrument rule")
        p.add_argument("--burn-in-end", type=int, help="static instrument cutoff (date ordinal)")
        p.add_argument("--outcome", choices=(BINARY, CONTINUOUS), help="outcome type of --input")
        p.add_argument("--caliper", type=float, help="maximum logit-score distance (match)")
        p.add_argument("--covariates", help="propensity covariates (match, PSM)")
        p.add_argument("--q-test", action="store_true", default=None, help="also run the similarity test")
        if name == "simulate":
            p.add_argument("--dump-cohort", action="store_true", default=None, help="also write the run-0 cohort of each preset")
    return parser


DEFAULTS = {
    "bootstrap": 500,
    "alpha": 0.05,
    "threads": 1,
    "out": ".",
    "format": "csv",
    "with_z": False,
    "iv_mode": "static",
    "outcome": BINARY,
    "q_test": False,
    "dump_cohort": False,
}

_TYPES = {"nsim": int, "bootstrap": int, "seed": int, "threads": int, "burn_in_end": int, "alpha": float, "caliper": float}
_FLAGS = {"with_z", "q_test", "dump_cohort"}


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        try:
            if key in _FLAGS:
                out[key] = value.lower() in ("1", "true", "yes", "on")
            elif key in _TYPES:
                out[key] = _TYPES[key](value)
            else:
                out[key] = value
        except ValueError:
            raise ConfigError(f"{path}:{no}: bad value for {key}: {value!r}") from None
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (flags win)."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    cfg.update({k: v for k, v in vars(args).items() if v is not None})
    formats = _csv_list(str(cfg["format"]))
    bad = [f for f in formats if f not in FORMATS]
    if bad or not formats:
        raise ConfigError(f"--format must be a subset of csv,json (got {cfg['format']!r})")
    cfg["format"] = ",".join(f for f in FORMATS if f in formats)
    if cfg["threads"] < 1:
        raise ConfigError("--threads must be at least 1")
    if cfg["bootstrap"] < 2:
        raise ConfigError("--bootstrap must be at least 2")
    if not 0.0 < cfg["alpha"] < 1.0:
        raise ConfigError("--alpha must lie in (0, 1)")
    if cfg.get("nsim") is not None and cfg["nsim"] < 2:
        raise ConfigError("--nsim must be at least 2")
    if cfg.get("seed") is None:
        cfg["seed"] = secrets.randbits(32)
        log.warning("no --seed given; using seed %d", cfg["seed"])
    return cfg


def _methods(cfg, default) -> list[str]:
    names = _csv_list(cfg["methods"]) if cfg.get("methods") else list(default)
    try:
        methods = [canonical_method(m) for m in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["with_z"]:
        for base, zvar in (("CaT", "CaT_with_Z"), ("DiD", "DiD_with_Z")):
            if base in methods and zvar not in methods:
                methods.append(zvar)
    return methods


def _formats(cfg) -> set[str]:
    return set(cfg["format"].split(","))


def _require(cfg, key, flag):
    if not cfg.get(key):
        raise ConfigError(f"{cfg['command']} needs {flag}")
    return cfg[key]


def _load(cfg):
    path = _require(cfg, "input", "--input")
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    return load_cohort(path, outcome_kind=cfg["outcome"])


def _check_columns(cohort, methods):
    for m in methods:
        if m in _NEEDS_Z and cohort.z is None:
            raise ConfigError(f"method {m} needs the instrument column 'z', which the input lacks")
        if m in _NEEDS_Y0 and cohort.y0 is None:
            raise ConfigError(f"method {m} needs the prior-period outcome column 'y0', which the input lacks")


def _presets(cfg, default) -> list[str]:
    ids = _csv_list(cfg["preset"]) if cfg.get("preset") else [default]
    for p in ids:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}; choose from {', '.join(PRESETS)}")
    return ids


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pct(v: float) -> str:
    return f"{100.0 * v:.6g}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_estimate(cfg, out: Path) -> dict:
    cohort = _load(cfg)
    methods = _methods(cfg, ("CaT", "IV_TSLS", "DiD"))
    _check_columns(cohort, methods)
    cov = tuple(_csv_list(cfg["covariates"])) if cfg.get("covariates") else None
    opts = EstimatorOptions(
        n_boot=cfg["bootstrap"], seed=cfg["seed"], threads=cfg["threads"], psm_covariates=cov
    )
    results = [estimate(m, cohort, opts) for m in methods]
    rows = [
        [r.method, _pct(r.estimate), _pct(r.ci_low), _pct(r.ci_high), _pct(r.se), f"{r.p_value:.6g}"]
        for r in results
    ]
    fmts = _formats(cfg)
    if "csv" in fmts:
        _write_rows(
            out / "estimates.csv",
            ["method", "estimate_pct", "ci_low_pct", "ci_high_pct", "se_pct", "p_value"],
            rows,
        )
        _write_rows(
            out / "forest.csv",
            ["position", "method", "estimate_pct", "ci_low_pct", "ci_high_pct"],
            [[len(rows) - i, *r[:4]] for i, r in enumerate(rows)],
        )
    if "json" in fmts:
        _write_json(
            out / "estimates.json",
            [
                {
                    "method": r.method,
                    "estimate": r.estimate,
                    "se": r.se,
                    "ci_low": r.ci_low,
                    "ci_high": r.ci_high,
                    "p_value": r.p_value,
                    "n_used": r.n_used,
                    "diagnostics": r.diagnostics,
                }
                for r in results
            ],
        )
    for r in results:
        print(f"{r.method:12s} {100 * r.estimate:8.3f}% [{100 * r.ci_low:.3f}, {100 * r.ci_high:.3f}]")
    if cfg["q_test"]:
        if len(methods) < 2:
            raise ConfigError("--q-test needs at least two methods")
        _run_q_tests(cohort, methods, opts, cfg, out)
    return {"n_patients": cohort.n}


def _run_q_tests(cohort, methods, opts, cfg, out):
    ens = bootstrap_ensemble(cohort, methods, cfg["bootstrap"], cfg["seed"], opts, cfg["threads"])
    results = [q_statistic(ens.subset(s), cfg["alpha"]) for s in all_subsets(ens.methods)]
    fmts = _formats(cfg)
    write_q_tests(
        results,
        csv_path=out / "q_tests.csv" if "csv" in fmts else None,
        json_path=out / "q_tests.json" if "json" in fmts else None,
    )
    ens.write_correlation_csv(out / "correlation.csv")
    for r in results:
        print(f"Q[{', '.join(r.methods)}] = {r.q:.3f} (critical {r.critical_value:.3f}, df {r.df}): {r.decision}")
    return results


def cmd_het(cfg, out: Path) -> dict:
    if cfg.get("input"):
        cohort = _load(cfg)
        methods = _methods(cfg, ("CaT", "IV_TSLS", "DiD"))
        _check_columns(cohort, methods)
        opts = EstimatorOptions(n_boot=cfg["bootstrap"], seed=cfg["seed"])
        _run_q_tests(cohort, methods, opts, cfg, out)
        return {"n_patients": cohort.n}
    presets = _presets(cfg, "S2")
    methods = _methods(cfg, ("CaT", "IV_TSLS", "DiD"))
    nsim = cfg.get("nsim") or 200
    tables = [
        pairwise_similarity_study(
            p, n_sim=nsim, B=cfg["bootstrap"], seed=cfg["seed"], methods=methods,
            alpha=cfg["alpha"], threads=cfg["threads"],
        )
        for p in presets
    ]
    rows = [r for t in tables for r in t.rows()]
    fmts = _formats(cfg)
    if "csv" in fmts:
        _write_rows(
            out / "similarity.csv",
            ["scenario", "set", "rejected_pct", "retained_pct", "n_sim", "n_failed"],
            [
                [r["scenario"], r["set"], f"{r['rejected_pct']:.6g}", f"{r['retained_pct']:.6g}", r["n_sim"], r["n_failed"]]
                for r in rows
            ],
        )
    if "json" in fmts:
        _write_json(out / "similarity.json", rows)
    for r in rows:
        print(f"{r['scenario']} {{{r['set']}}}: rejected {r['rejected_pct']:.1f}%")
    return {}


def cmd_match(cfg, out: Path) -> dict:
    cohort = _load(cfg)
    names = tuple(_csv_list(cfg["covariates"])) if cfg.get("covariates") else default_covariates(cohort)
    if not names:
        raise ConfigError("no covariates to match on; pass --covariates")
    result = match_cohort(cohort, names, cfg.get("caliper"))
    report = balance_report(cohort, result, names)
    fmts = _formats(cfg)
    if "csv" in fmts:
        result.write_csv(out / "pairs.csv")
        report.write_csv(out / "balance.csv")
    if "json" in fmts:
        _write_json(
            out / "balance.json",
            [{"covariate": r.name, "smd_before": r.smd_before, "smd_after": r.smd_after} for r in report.rows],
        )
    before, after = report.mean_abs()
    print(f"matched {len(result.pairs)} pairs, {result.discard_count} treated unmatched")
    print(f"mean |SMD| before {before:.4f}, after {after:.4f}")
    return {"pairs": len(result.pairs), "unmatched_treated": result.discard_count}


def _write_summaries(summaries, cfg, out: Path):
    fmts = _formats(cfg)
    if "csv" in fmts:
        for fname, metrics in (("summary.csv", "SUMMARY_METRICS"), ("mcse.csv", "MCSE_METRICS")):
            _write_long_table(out / fname, summaries, metrics)
        rows = []
        for s in summaries:
            for j, m in enumerate(s.methods):
                for r in range(s.estimates.shape[0]):
                    rows.append([s.scenario, m, r, f"{s.estimates[r, j]:.10g}"])
        _write_rows(out / "estimates_long.csv", ["scenario", "method", "run", "estimate"], rows)
    if "json" in fmts:
        _write_json(out / "summary.json", [s.to_json() for s in summaries])
    for s in summaries:
        print(f"{s.scenario} (n_sim = {s.n_sim})")
        for m in s.methods:
            p = s.performance[m]
            flag = "biased" if p.biased else "unbiased"
            print(
                f"  {m:12s} bias {100 * p.bias:8.3f}  SD {100 * p.empirical_sd:6.3f}  "
                f"coverage {p.coverage:5.1f}  T1E {p.t1e:5.1f}  {flag}"
            )


def _write_long_table(path, summaries, metrics):
    methods = []
    for s in summaries:
        methods += [m for m in s.methods if m not in methods]
    rows = []
    for s in summaries:
        for name, get in getattr(s, metrics):
            vals = []
            for m in methods:
                p = s.performance.get(m)
                vals.append("" if p is None else _fmt_metric(get(p)))
            rows.append([s.scenario, name, *vals])
    _write_rows(path, ["scenario", "metric", *methods], rows)


def _fmt_metric(v) -> str:
    if isinstance(v, (bool, int)):
        return str(int(v))
    return "nan" if v != v else f"{v:.6g}"


def cmd_simulate(cfg, out: Path) -> dict:
    presets = _presets(cfg, "S1")
    methods = _methods({**cfg, "with_z": False}, ("CaT", "IV_TSLS", "DiD"))
    nsim = cfg.get("nsim") or 1000
    summaries = [
        run_monte_carlo(p, nsim, cfg["seed"], methods, with_z_variants=cfg["with_z"], threads=cfg["threads"])
        for p in presets
    ]
    _write_summaries(summaries, cfg, out)
    if cfg["dump_cohort"]:
        for p in presets:
            write_cohort(simulate_cohort(PRESETS[p], cfg["seed"], 0).cohort, out / f"cohort_{p}.csv")
    return {}


def cmd_poa_study(cfg, out: Path) -> dict:
    presets = _presets(cfg, "POA_basic")
    methods = _methods(cfg, ("POA_IV", "CaT", "CaT_with_Z", "IV_TSLS", "DiD", "DiD_with_Z"))
    nsim = cfg.get("nsim") or 1000
    summaries = [run_poa_study(p, nsim, cfg["seed"], methods, threads=cfg["threads"]) for p in presets]
    _write_summaries(summaries, cfg, out)
    return {}


def cmd_iv_build(cfg, out: Path) -> dict:
    cohort = _load(cfg)
    hist = _require(cfg, "history", "--history")
    if not os.path.exists(hist):
        raise ConfigError(f"history file not found: {hist}")
    built = build_preference_iv(load_history(hist), cohort, cfg["iv_mode"], cfg.get("burn_in_end"))
    if built.cohort is not None:
        write_cohort(built.cohort, out / "cohort_with_z.csv")
    _write_rows(out / "excluded_patients.csv", ["patient_id"], [[p] for p in built.excluded])
    info = {"retained": 0 if built.cohort is None else built.cohort.n, "excluded": len(built.excluded)}
    print(f"retained {info['retained']} patients, excluded {info['excluded']}")
    if built.cohort is not None:
        try:
            f = first_stage_f_statistic(built.cohort)
        except TriangulateError:
            f = float("nan")
        info["first_stage_f"] = f
        print(f"first-stage F = {f:.2f}")
    return info


_HANDLERS = {
    "estimate": cmd_estimate,
    "match": cmd_match,
    "het": cmd_het,
    "simulate": cmd_simulate,
    "poa-study": cmd_poa_study,
    "iv-build": cmd_iv_build,
}


def _manifest(cfg, status, message=None, extra=None) -> dict:
    resolved = {k: v for k, v in sorted(cfg.items()) if k not in _VOLATILE and v is not None}
    m = {"version": __version__, "status": status, "config": resolved}
    if message:
        m["message"] = message
    if extra:
        m["result"] = extra
    return m


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    status, message, extra, code = "ok", None, None, 0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", WeakInstrumentWarning)
            extra = _HANDLERS[cfg["command"]](cfg, out)
    except ConfigError as exc:
        status, message, code = "config_error", str(exc), 2
    except (TriangulateError, OSError) as exc:
        status, message, code = "error", f"{type(exc).__name__}: {exc}", 1
    if message:
        print(f"error: {message}", file=sys.stderr)
    _write_json(out / "manifest.json", _manifest(cfg, status, message, extra))
    return code


if __name__ == "__main__":
    sys.exit(main())
