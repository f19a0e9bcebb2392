"""Command line: ``mblr fit``, ``mblr describe`` and ``mblr simulate``.

Settings resolve as command-line flags, then the ``--config`` JSON file
(top-level keys or a section named after the command), then built-in
defaults.  Errors print one line to stderr,
``error: class=<kind> message=<text>``, and exit with the class's code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from .dataset import ColumnConfig, group_subjects, ingest_subjects, read_grouped_csv, spec_from_table
from .errors import MBLRError, ParseError
from .grid import build_discrete_posterior
from .posterior import bayes_factor_vs_rlr, estimate_table, fit_rlr, mix
from .report import (
    ESTIMATE_HEADER,
    bayes_factor_table,
    covariate_table,
    estimate_rows,
    grid_table,
    issue_table,
    simulation_tables,
    write_csv,
)

log = logging.getLogger("mblr")

USAGE_EXIT = 2

DEFAULTS = {
    "common": {
        "data": None, "grouped": False, "arm_col": "arm", "treatment_label": None, "id_col": None,
        "covariates": None, "issues": None, "out": ".", "seed": 0, "threads": 1,
    },
    "fit": {"d": 1.5, "delta0": 0.3, "level": 0.90, "plot_issue": None},
    "describe": {},
    "simulate": {
        "profile": "desk", "factorial": False, "responses": "frequent+rare", "means": "large", "psd": "small",
        "n_sim": None, "seed": 20240101, "d": 1.5, "delta0": 0.3, "level": 0.90,
    },
}


def _split(value):
    if value is None or isinstance(value, list):
        return value
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="mblr", description="Multivariate Bayesian logistic regression.")
    parser.add_argument("--config", help="JSON settings file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    data_opts = argparse.ArgumentParser(add_help=False, argument_default=S)
    data_opts.add_argument("--data", help="subject-level CSV (or stratum CSV with --grouped)")
    data_opts.add_argument("--grouped", action="store_true", help="data has one row per stratum: covariates, arm, n, issues")
    data_opts.add_argument("--arm-col", dest="arm_col", help="arm column name (default: arm)")
    data_opts.add_argument("--treatment-label", dest="treatment_label", help="arm label meaning treatment")
    data_opts.add_argument("--id-col", dest="id_col", help="subject identifier column")
    data_opts.add_argument("--covariates", help="comma-separated covariate columns")
    data_opts.add_argument("--issues", help="comma-separated binary issue columns")
    data_opts.add_argument("--out", help="output directory (default: current)")

    fit_opts = argparse.ArgumentParser(add_help=False, argument_default=S)
    fit_opts.add_argument("--d", type=float, help="upper bound of every prior SD (default 1.5)")
    fit_opts.add_argument("--delta0", type=float, help="initial design scale on the logit scale (default 0.3)")
    fit_opts.add_argument("--level", type=float, help="credible level for intervals (default 0.90)")
    fit_opts.add_argument("--seed", type=int, help="recorded for provenance; fitting is deterministic")
    fit_opts.add_argument("--threads", type=int, help="worker threads for grid evaluations")

    p_fit = sub.add_parser("fit", parents=[data_opts, fit_opts], help="fit MBLR and RLR, write reports and plots",
                           argument_default=S)
    p_fit.add_argument("--plot-issue", dest="plot_issue", help="issue for the subgroup plot (default: first)")

    sub.add_parser("describe", parents=[data_opts], help="descriptive counts and naive odds ratios",
                   argument_default=S)

    p_sim = sub.add_parser("simulate", help="simulation study of MBLR against RLR", argument_default=S)
    p_sim.add_argument("--profile", choices=("desk", "trial", "smoke"), help="layout and defaults (default desk)")
    p_sim.add_argument("--factorial", action="store_true", help="run all 8 factor combinations")
    p_sim.add_argument("--responses", choices=("frequent", "frequent+rare"))
    p_sim.add_argument("--means", choices=("zero", "large"))
    p_sim.add_argument("--psd", choices=("small", "large"))
    p_sim.add_argument("--n-sim", dest="n_sim", type=int, help="replications per cell")
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--threads", type=int)
    p_sim.add_argument("--d", type=float)
    p_sim.add_argument("--delta0", type=float)
    p_sim.add_argument("--level", type=float)
    p_sim.add_argument("--out")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    cmd = args.command
    cfg = {**DEFAULTS["common"], **DEFAULTS[cmd]}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read config {args.config}: {exc}") from None
        section = raw.get(cmd, {}) if isinstance(raw.get(cmd), dict) else {}
        flat = {k: v for k, v in raw.items() if k not in DEFAULTS}
        for source in (flat, section):
            for k, v in source.items():
                k = k.replace("-", "_")
                if k not in cfg:
                    raise ParseError(f"unknown config key {k!r} for {cmd}")
                cfg[k] = v
    cfg.update({k: v for k, v in vars(args).items() if k not in ("command", "config")})
    cfg["covariates"], cfg["issues"] = _split(cfg["covariates"]), _split(cfg["issues"])
    for key in ("d", "delta0"):
        if key in cfg and not cfg[key] > 0:
            raise ParseError(f"{key} must be positive")
    if "level" in cfg and not 0 < cfg["level"] < 1:
        raise ParseError("level must lie in (0, 1)")
    if cfg.get("threads", 1) < 1:
        raise ParseError("threads must be at least 1")
    return cfg


def load_data(cfg: dict):
    if not cfg["data"]:
        raise ParseError("--data is required")
    if not cfg["covariates"] or not cfg["issues"]:
        raise ParseError("--covariates and --issues are required")
    if cfg["grouped"]:
        return read_grouped_csv(cfg["data"], cfg["covariates"], cfg["issues"])
    columns = ColumnConfig(
        arm=cfg["arm_col"], covariates=cfg["covariates"], issues=cfg["issues"],
        treatment_label=cfg["treatment_label"], id_column=cfg["id_col"],
    )
    table = ingest_subjects(cfg["data"], columns)
    return group_subjects(table, spec_from_table(table))


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_") or "issue"


def cmd_fit(cfg: dict) -> int:
    from . import plotting

    data = load_data(cfg)
    issue = cfg["plot_issue"] or data.spec.issues[0]
    if issue not in data.spec.issues:
        raise ParseError(f"--plot-issue {issue!r} is not one of the issues")
    out = _outdir(cfg)
    level = cfg["level"]
    log.info("fitting %d strata, %d issues", data.m, data.spec.K)
    grid = build_discrete_posterior(data, cfg["d"], cfg["delta0"], threads=cfg["threads"])
    mblr = mix(grid)
    rlr = fit_rlr(data)
    bf = bayes_factor_vs_rlr(grid, rlr)

    write_csv(out / "grid.csv", *grid_table(grid))
    est = estimate_table(mblr, level) + estimate_table(rlr, level)
    write_csv(out / "estimates.csv", ESTIMATE_HEADER, estimate_rows(est))
    write_csv(out / "bayes_factors.csv", *bayes_factor_table(grid, rlr.fits[0], bf))

    plotting.treatment_by_issue(est, out / "forest_treatment.svg", level)
    plotting.prior_mean_effects(est, out / "forest_prior_means.svg", level)
    plotting.covariate_breakdown(est, issue, out / f"forest_subgroups_{_slug(issue)}.svg", level)

    summary = {
        "data_fingerprint": grid.data_fingerprint,
        "seed": cfg["seed"],
        "strata": data.m,
        "issues": list(data.spec.issues),
        "d": cfg["d"],
        "delta0": cfg["delta0"],
        "level": level,
        "dispersion": grid.dispersion,
        "variance_scale": grid.variance_scale,
        "log_g_evaluations": grid.evaluations,
        "newton_iterations": grid.newton_iterations,
        "log_bf_mblr_vs_rlr": bf.log_ratio,
    }
    (out / "fit_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"log Bayes factor (MBLR mixture vs RLR): {bf.log_ratio:.4f}")
    print(f"grid dispersion: {grid.dispersion:.4f}")
    print(f"wrote results to {out}")
    return 0


def cmd_describe(cfg: dict) -> int:
    data = load_data(cfg)
    out = _outdir(cfg)
    head, rows = issue_table(data)
    write_csv(out / "describe_issues.csv", head, rows)
    write_csv(out / "describe_covariates.csv", *covariate_table(data))
    w = max(len(r[0]) for r in rows) if rows else 5
    print(f"{'issue':<{w}}  {'trt':>10}  {'comp':>10}  {'OR':>7}  95% CI")
    for name, a, n1, c, n0, o, lo, hi in rows:
        print(f"{name:<{w}}  {a:>4}/{n1:<5}  {c:>4}/{n0:<5}  {o:7.3f}  ({lo:.3f}, {hi:.3f})")
    return 0


def cmd_simulate(cfg: dict) -> int:
    from .simulate import profile_configs, run_simulation

    out = _outdir(cfg)
    kw = {k: cfg[k] for k in ("responses", "means", "psd", "n_sim", "seed", "d", "delta0", "level", "threads")}
    if cfg["factorial"]:
        kw = {k: v for k, v in kw.items() if k not in ("responses", "means", "psd")}
    try:
        configs = profile_configs(cfg["profile"], cfg["factorial"], **kw)
    except ValueError as exc:
        raise ParseError(str(exc)) from None

    def progress(done, total):
        if done % max(1, total // 10) == 0 or done == total:
            log.info("replication %d/%d", done, total)

    report = run_simulation(configs, progress)
    for name, head, rows in simulation_tables(report):
        write_csv(out / name, head, rows)
    meta = {"profile": cfg["profile"], "factorial": cfg["factorial"], "seed": cfg["seed"], **report.metadata()}
    (out / "sim_metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"{sum(len(c.replications) for c in report.cells)} replications, "
          f"{meta['failure_count']} failed, {report.wall_time:.1f}s; wrote results to {out}")
    return 0


COMMANDS = {"fit": cmd_fit, "describe": cmd_describe, "simulate": cmd_simulate}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MBLR_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except MBLRError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: class={exc.kind} message={msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
