"""Command-line interface: fit, simulate, study, bootstrap, km."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import BaselineError
from .config import ConfigError, load_config
from .data import DataFormatError, LinkOverflowError, check_valid, read_csv, write_csv
from .fit import BootstrapConfig, BootstrapError, FitConfig, bootstrap, fit
from .simulate import CENSORING_FOR_CURE, NU_PRESETS, STRENGTHS, SimConfig, simulate_detailed
from .study import StudyDesign, kaplan_meier, parse_method, run_study

log = logging.getLogger("ptcure")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


def _version_text() -> str:
    import scipy
    return (f"ptcure {__version__} (python {platform.python_version()}, "
            f"numpy {np.__version__}, scipy {scipy.__version__})")


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


def _require_seed(args):
    if args.seed is None:
        raise InputError(f"'{args.command}' draws random numbers; pass --seed")


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# fit ------------------------------------------------------------------------

FIT_FLAGS = ("method", "family", "tau", "outer_tol", "outer_max_iter", "newton_tol", "newton_max_iter")


def _fit_config(args) -> FitConfig:
    mapping = load_config(args.config) if args.config else {}
    for key in FIT_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    try:
        return FitConfig.from_mapping(mapping)
    except (TypeError, ValueError) as exc:
        raise InputError(f"fit config: {exc}") from None


def _load_data(path):
    try:
        ds = read_csv(path)
    except DataFormatError as exc:
        where = f"{path}:{exc.line}: " if exc.line else f"{path}: "
        raise InputError(where + str(exc)) from None
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    try:
        check_valid(ds)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    return ds


def _covariate_names(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh))[3:]]


def cmd_fit(args) -> int:
    ds = _load_data(args.data)
    cfg = _fit_config(args)
    res = fit(ds, cfg)
    out = _outdir(args.out)
    names = _covariate_names(args.data)
    (out / "fit.json").write_text(res.to_json(names) + "\n", encoding="utf-8")
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "estimate", "se"])
        for term, est, se in res.table_rows(names):
            w.writerow([term, repr(est), "" if se is None else repr(se)])
    res.baseline.to_csv(out / "baseline.csv")
    for d in res.diagnostics:
        log.info("diagnostic: %s", d)
    if not res.converged:
        log.warning("fit did not converge; best iterate written")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# simulate -------------------------------------------------------------------

def _sim_config(args, mapping: dict) -> SimConfig:
    """Preset (strength, cure rate, structure) overlaid with explicit keys."""
    mapping = dict(mapping)
    try:
        strength = mapping.pop("strength", None) or args.strength
        cure = float(mapping.pop("cure_rate", None) or args.cure_rate)
        structure = mapping.pop("structure", None) or args.structure
        if cure not in NU_PRESETS and "nu" not in mapping:
            raise InputError(f"cure_rate must be one of {sorted(NU_PRESETS)} unless nu is given")
        if strength not in STRENGTHS:
            raise InputError(f"unknown strength {strength!r}; expected one of {sorted(STRENGTHS)}")
        merged = SimConfig.preset(strength, cure if cure in NU_PRESETS else 0.10).to_dict()
        if strength != "none":
            merged["structure"] = structure
        for key in ("K", "n"):
            if getattr(args, key, None) is not None:
                merged[key] = getattr(args, key)
        merged.update(mapping)
        merged["seed"] = args.seed
        return SimConfig.from_mapping(merged)
    except (TypeError, ValueError) as exc:
        raise InputError(f"simulation config: {exc}") from None


def cmd_simulate(args) -> int:
    _require_seed(args)
    cfg = _sim_config(args, load_config(args.config) if args.config else {})
    sim = simulate_detailed(cfg)
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out = _outdir(out) / "data.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(sim.dataset, out)
    out.with_suffix(".config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    for d in sim.diagnostics:
        log.info("diagnostic: %s", d)
    return EXIT_OK


# study ----------------------------------------------------------------------

STUDY_KEYS = {"replications", "confidence", "methods", "bootstrap_reps", "bootstrap_size"}


def cmd_study(args) -> int:
    _require_seed(args)
    mapping = load_config(args.config) if args.config else {}
    study_part = {k: mapping.pop(k) for k in list(mapping) if k in STUDY_KEYS}
    if args.full_scale:
        mapping.setdefault("K", 284)
        mapping.setdefault("n", 9)
        study_part.setdefault("replications", 1000)
    sim = _sim_config(args, mapping)
    try:
        methods = study_part.get("methods")
        if isinstance(methods, str):
            methods = [m for m in methods.split(",") if m.strip()]
        kw = {
            "replications": int(args.replications or study_part.get("replications", 200)),
            "confidence": float(study_part.get("confidence", 0.95)),
            "bootstrap_reps": int(args.bootstrap_reps if args.bootstrap_reps is not None
                                  else study_part.get("bootstrap_reps", 0)),
            "bootstrap_size": int(study_part.get("bootstrap_size", 100)),
            "seed": args.seed,
        }
        if methods:
            kw["methods"] = tuple(parse_method(m) if isinstance(m, str) else tuple(m) for m in methods)
        design = StudyDesign(sim=sim, **kw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"study config: {exc}") from None

    def progress(done, total):
        if done % max(1, total // 20) == 0 or done == total:
            log.info("replication %d/%d", done, total)

    result = run_study(design, n_jobs=_threads(args), progress=progress)
    paths = result.write(args.out)
    log.info("wrote %s", ", ".join(p.name for p in paths))
    return EXIT_OK


# bootstrap ------------------------------------------------------------------

def cmd_bootstrap(args) -> int:
    _require_seed(args)
    ds = _load_data(args.data)
    cfg = _fit_config(args)
    try:
        boot = BootstrapConfig(replicates=args.replicates, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    times = None
    if args.times:
        try:
            times = [float(t) for t in args.times.split(",")]
        except ValueError:
            raise InputError("--times must be a comma-separated list of numbers") from None
    try:
        res = bootstrap(ds, cfg, boot, times=times, n_jobs=_threads(args))
    except BootstrapError as exc:
        log.error("%s", exc)
        return EXIT_NOT_CONVERGED
    out = _outdir(args.out)
    (out / "bootstrap.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# km -------------------------------------------------------------------------

def cmd_km(args) -> int:
    ds = _load_data(args.data)
    km = kaplan_meier(ds)
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out = _outdir(out) / "km.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    km.to_csv(out)
    return EXIT_OK


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptcure", description="Marginal promotion time cure models for clustered data.")
    parser.add_argument("--version", action="version", version=_version_text())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", help="key=value or JSON config file")
        p.add_argument("--out", required=True, help="output directory (or .csv file where noted)")
        p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
        p.add_argument("--seed", type=int, default=None, help="master seed" + (" (required)" if seed else ""))

    def fit_flags(p):
        p.add_argument("--method", choices=["npm", "gee", "qif"])
        p.add_argument("--family", choices=["independence", "exchangeable", "ar1"])
        p.add_argument("--tau", type=float, help="cure threshold (default: largest uncensored time)")
        p.add_argument("--outer-tol", dest="outer_tol", type=float)
        p.add_argument("--outer-max-iter", dest="outer_max_iter", type=int)
        p.add_argument("--newton-tol", dest="newton_tol", type=float)
        p.add_argument("--newton-max-iter", dest="newton_max_iter", type=int)

    def sim_flags(p):
        p.add_argument("--strength", default="strong", choices=sorted(STRENGTHS))
        p.add_argument("--cure-rate", dest="cure_rate", type=float, default=0.10,
                       help=f"one of {sorted(NU_PRESETS)} (censoring {sorted(CENSORING_FOR_CURE.values())})")
        p.add_argument("--structure", default="exchangeable", choices=["exchangeable", "ar1", "independent"])
        p.add_argument("--K", type=int)
        p.add_argument("--n", type=int)

    p = sub.add_parser("fit", help="fit NPM / GEE / QIF to a clustered CSV")
    p.add_argument("data")
    common(p)
    fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate a clustered dataset")
    common(p, seed=True)
    sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="Monte Carlo study writing table CSVs")
    common(p, seed=True)
    sim_flags(p)
    p.add_argument("--replications", type=int)
    p.add_argument("--bootstrap-reps", dest="bootstrap_reps", type=int)
    p.add_argument("--full-scale", dest="full_scale", action="store_true",
                   help="K=284, n=9, 1000 replications")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("bootstrap", help="cluster bootstrap of phi, rho and the baseline CDF")
    p.add_argument("data")
    common(p, seed=True)
    fit_flags(p)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--times", help="comma-separated query times for the baseline CDF")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("km", help="Kaplan-Meier curve ignoring clustering")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_km, threads=None, seed=None, config=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (BaselineError, LinkOverflowError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
