"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit did not
converge (artifacts are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import replace

import numpy as np
import scipy

from . import __version__
from .config import DEFAULTS_TOML, ConfigError, RunConfig, build_config, load_config
from .fit import FitError, fit
from .inference import pseudo_residuals, state_probs, viterbi
from .io import (
    DataError,
    csv_text,
    dwell_table,
    fmt,
    load_params,
    model_to_dict,
    read_dataset,
    write_csv,
    write_dataset,
    write_json,
)
from .kernels import BACKEND
from .penalty import PenaltyConfig
from .select import aic, candidate_table, cross_validate, effective_df
from .simulate import simulate

logger = logging.getLogger("pmlhsmm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4


def _versions():
    return {
        "pmlhsmm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "backend": BACKEND,
    }


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else build_config()
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads: must be >= 1")
        cfg = replace(cfg, fit_options=replace(cfg.fit_options, threads=threads))
    return cfg


def _read(args, cfg):
    return read_dataset(
        args.data, cfg.channels, cfg.spec.families,
        assume_regular=args.assume_regular, time_column=cfg.time_column, interval=cfg.interval,
    )


def _run_cv(data, cfg, out):
    report = cross_validate(data, cfg.spec, cfg.cv_plan, cfg.order, cfg.fit_options)
    N = cfg.n_states
    lam_cols = [f"lambda_{i + 1}" for i in range(N)]
    write_csv(
        os.path.join(out, "cv_trajectory.csv"),
        ["move", *lam_cols, "score", "valid"],
        ([m, *lam, s, v] for m, lam, s, v in report.trajectory),
    )
    write_csv(
        os.path.join(out, "cv_candidates.csv"),
        ["order", *lam_cols, "score", "valid", *[f"fold_{k + 1}" for k in range(cfg.cv_plan.n_folds)]],
        (
            [k + 1, *c.lam, c.score, c.valid, *(c.fold_scores or [np.nan] * cfg.cv_plan.n_folds)]
            for k, c in enumerate(report.candidates)
        ),
    )
    write_json(os.path.join(out, "cv_choice.json"), {"lambda": list(report.chosen), "order": cfg.order, "scoring": cfg.cv_plan.scoring})
    return report


def cmd_fit(args) -> int:
    cfg = _config(args)
    data = _read(args, cfg)
    out = args.out
    lam = cfg.lam
    if lam is None:
        lam = _run_cv(data, cfg, out).chosen
    penalty = PenaltyConfig(lam, cfg.order)
    res = fit(data, cfg.spec, penalty, cfg.fit_options)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dfrep = effective_df(res, data, details=True)
    for w in caught:
        logger.warning("%s", w.message)
    model = res.model
    N = model.n_states
    conv = cfg.spec.convention

    write_json(os.path.join(out, "params.json"), {
        "model": model_to_dict(model, cfg.channels),
        "working": {"labels": res.layout.labels(), "values": res.theta.tolist()},
    })
    header, rows = dwell_table(model, cfg.dwell_horizon)
    write_csv(os.path.join(out, "dwell.csv"), header, rows)

    path = viterbi(model, data, conv)
    probs = state_probs(model, data, conv)
    write_csv(
        os.path.join(out, "decoded.csv"),
        ["t", "viterbi", *[f"p_{i + 1}" for i in range(N)]],
        ([t + 1, int(path[t]) + 1, *probs[t]] for t in range(data.T)),
    )
    lin = [c for c, f in enumerate(cfg.spec.families) if f != "vonmises"]
    res_cols = [pseudo_residuals(model, data, c, conv, seed=cfg.residual_seed) for c in lin]
    write_csv(
        os.path.join(out, "residuals.csv"),
        ["t", *[cfg.channels[c] for c in lin]],
        ([t + 1, *[r[t] for r in res_cols]] for t in range(data.T)),
    )
    a = aic(res.loglik, dfrep.df)
    meta = {
        "command": "fit",
        "data": os.path.basename(args.data),
        "T": data.T,
        "n_states": N,
        "start_lengths": list(cfg.spec.start_lengths),
        "families": list(cfg.spec.families),
        "dwell_family": cfg.spec.dwell_family,
        "init": cfg.spec.init,
        "convention": conv,
        "lambda": list(lam),
        "lambda_source": "cv" if cfg.lam is None else "config",
        "order": cfg.order,
        "loglik": res.loglik,
        "penalised_loglik": res.penalised_loglik,
        "n_params": res.n_params,
        "df": dfrep.df,
        "df_condition_number": dfrep.condition_number,
        "aic": a,
        "converged": res.converged,
        "grad_norm": res.grad_norm,
        "starts": [{"start": s.start, "penalised_loglik": s.penalised_loglik, "converged": s.converged, "n_iter": s.n_iter} for s in res.starts],
        "optimizer": {k: getattr(cfg.fit_options, k) for k in ("n_starts", "jitter", "seed", "gtol", "ftol", "maxiter", "gradient")},
        "residual_seed": cfg.residual_seed,
        "versions": _versions(),
    }
    write_json(os.path.join(out, "metadata.json"), meta)

    lines = [f"loglik {res.loglik:.4f}  df {dfrep.df:.2f}  AIC {a:.2f}  converged {res.converged}"]
    for i in range(N):
        d = model.dwell[i]
        em = "  ".join(
            f"{cfg.channels[c]}(" + ", ".join(f"{k}={fmt(v)}" for k, v in model.emissions[i][c].to_dict().items() if k != "family") + ")"
            for c in range(model.n_channels)
        )
        lines.append(f"state {i + 1}: lambda {lam[i]:g}  mean dwell {d.mean():.3f}  tail mass {d.tail_mass:.4f}  {em}")
    print("\n".join(lines))
    if not res.converged:
        logger.error("optimizer did not converge (max |gradient| %.3g)", res.grad_norm)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _config(args)
    data = _read(args, cfg)
    report = _run_cv(data, cfg, args.out)
    print("chosen lambda: " + ", ".join(f"{v:g}" for v in report.chosen))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    params = args.params or cfg.sim_params
    if not params:
        raise ConfigError("simulate.params: a parameter file is required")
    if not args.params and args.config and not os.path.isabs(params):
        params = os.path.join(os.path.dirname(os.path.abspath(args.config)), params)
    model, channels = load_params(params)
    T = args.T if args.T is not None else cfg.sim_T
    seed = args.seed if args.seed is not None else cfg.sim_seed
    sim = simulate(model, T, seed=seed, channels=channels, convention=cfg.spec.convention)
    write_dataset(os.path.join(args.out, "data.csv"), sim.observations)
    write_csv(os.path.join(args.out, "truth.csv"), ["t", "state"], ([t + 1, int(s) + 1] for t, s in enumerate(sim.states)))
    write_json(os.path.join(args.out, "simulation.json"), {
        "command": "simulate", "params": os.path.basename(params), "T": T, "seed": seed,
        "convention": cfg.spec.convention, "n_sojourns": len(sim.sojourns), "versions": _versions(),
    })
    print(f"simulated {T} steps in {len(sim.sojourns)} sojourns (seed {seed})")
    return EXIT_OK


def _aic_inputs(paths):
    out = []
    for p in paths:
        meta = os.path.join(p, "metadata.json") if os.path.isdir(p) else p
        if meta.endswith(".json"):
            try:
                with open(meta) as fh:
                    m = json.load(fh)
                name = os.path.basename(os.path.normpath(p)) if os.path.isdir(p) else os.path.splitext(os.path.basename(p))[0]
                out.append((name, float(m["loglik"]), float(m["df"])))
            except (OSError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{meta}: not a fit metadata file ({exc})") from None
            continue
        try:
            with open(p, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from None
        for n, row in enumerate(rows, start=2):
            try:
                out.append((row["name"].strip(), float(row["loglik"]), float(row["df"])))
            except (KeyError, TypeError, ValueError, AttributeError):
                raise DataError(f"{p} line {n}: expected columns name, loglik, df") from None
    if not out:
        raise DataError("no models given")
    return out


def cmd_aic_table(args) -> int:
    table = candidate_table(_aic_inputs(args.inputs))
    header = ["model", "df", "loglik", "aic", "delta_aic", "best"]
    rows = [[r.name, r.df, r.loglik, r.aic, r.delta_aic, r.best] for r in table]
    text = csv_text(header, rows)
    if args.out:
        write_csv(args.out, header, rows)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_config(args) -> int:
    if not args.defaults:
        raise ConfigError("config: only --defaults is supported")
    sys.stdout.write(DEFAULTS_TOML)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmlhsmm", description="Penalised hidden semi-Markov models for time series.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("data", help="input CSV with a header row")
            sp.add_argument("--assume-regular", action="store_true", help="insert missing rows for skipped time stamps")
        sp.add_argument("-c", "--config", help="TOML configuration file")
        sp.add_argument("-o", "--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="worker threads for starts and folds")

    sp = sub.add_parser("fit", help="fit a model and write parameters, decoding and residuals")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("cv", help="choose smoothing parameters by cross-validation")
    common(sp)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("simulate", help="simulate a dataset from a parameter file")
    common(sp, data=False)
    sp.add_argument("--params", help="parameter file (overrides simulate.params)")
    sp.add_argument("-T", type=int, default=None, help="series length (overrides simulate.T)")
    sp.add_argument("--seed", type=int, default=None, help="overrides simulate.seed")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("aic-table", help="AIC comparison of fitted models")
    sp.add_argument("inputs", nargs="+", help="fit output directories, metadata.json files, or CSVs with name,loglik,df")
    sp.add_argument("-o", "--out", help="also write the table to this CSV")
    sp.set_defaults(func=cmd_aic_table)

    sp = sub.add_parser("config", help="print configuration defaults")
    sp.add_argument("--defaults", action="store_true")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    finally:
        logging.captureWarnings(False)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
