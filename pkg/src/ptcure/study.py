"""Monte Carlo replication of the estimators and descriptive survival curves."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .data import ClusteredDataset, Family
from .fit import BootstrapConfig, BootstrapError, FitConfig, Method, bootstrap, fit
from .simulate import SimConfig, simulate_detailed

log = logging.getLogger(__name__)

NPM = (Method.NPM, Family.INDEPENDENCE)
DEFAULT_METHODS = (
    NPM,
    (Method.GEE, Family.EXCHANGEABLE),
    (Method.GEE, Family.AR1),
    (Method.QIF, Family.EXCHANGEABLE),
    (Method.QIF, Family.AR1),
)


def method_key(method, family) -> str:
    method, family = Method.parse(method), Family.parse(family)
    return "npm" if method is Method.NPM else f"{method.value}-{family.value}"


def parse_method(text: str):
    text = text.strip().lower()
    if text == "npm":
        return NPM
    method, _, family = text.partition("-")
    return Method.parse(method), Family.parse(family or "independence")


@dataclass(frozen=True)
class StudyDesign:
    sim: SimConfig = field(default_factory=SimConfig)
    methods: tuple = DEFAULT_METHODS
    replications: int = 200
    confidence: float = 0.95
    seed: int = 0
    bootstrap_reps: int = 0        # outer replications that also get a rho bootstrap
    bootstrap_size: int = 100      # R for each of those bootstraps
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("a study needs at least two replications")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        methods = tuple((Method.parse(m), Family.parse(f) if Method.parse(m) is not Method.NPM
                         else Family.INDEPENDENCE) for m, f in self.methods)
        object.__setattr__(self, "methods", methods)

    @property
    def keys(self) -> list[str]:
        return [method_key(m, f) for m, f in self.methods]

    @classmethod
    def scaled(cls, strength="strong", cure_rate=0.10, structure="exchangeable", **kw) -> "StudyDesign":
        sim = SimConfig.preset(strength, cure_rate, structure, K=100, n=5)
        return cls(sim=sim, **kw)

    @classmethod
    def full_scale(cls, strength="strong", cure_rate=0.10, structure="exchangeable", **kw) -> "StudyDesign":
        sim = SimConfig.preset(strength, cure_rate, structure, K=284, n=9)
        kw.setdefault("replications", 1000)
        return cls(sim=sim, **kw)


def replicate_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(r)]).generate_state(1)[0])


def _one(design: StudyDesign, r: int) -> dict:
    sim_cfg = replace(design.sim, seed=replicate_seed(design.seed, r))
    sim = simulate_detailed(sim_cfg)
    ds = sim.dataset
    rec = {"replication": r, "seed": sim_cfg.seed, "censoring": float(1 - ds.event.mean()),
           "sim_diagnostics": sim.diagnostics, "fits": {}}
    for method, family in design.methods:
        key = method_key(method, family)
        cfg = replace(design.fit, method=method, family=family)
        try:
            res = fit(ds, cfg)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            rec["fits"][key] = {"error": f"{type(exc).__name__}: {exc}", "converged": False}
            continue
        entry = {
            "beta": res.beta_hat.tolist(),
            "se": res.se.tolist(),
            "covariance": res.covariance.tolist(),
            "converged": bool(res.converged),
            "iterations": res.iterations,
            "rho": res.rho_hat,
            "phi": res.phi_hat,
            "total_mass": res.baseline.total_mass,
        }
        if r < design.bootstrap_reps and method is Method.GEE and family is not Family.INDEPENDENCE:
            try:
                b = bootstrap(ds, cfg, BootstrapConfig(design.bootstrap_size, seed=sim_cfg.seed))
                entry["rho_boot_var"] = b.rho_var
            except BootstrapError as exc:
                entry["rho_boot_error"] = str(exc)
        rec["fits"][key] = entry
    return rec


@dataclass(frozen=True)
class SummaryRow:
    method: str
    coefficient: int
    bias: float
    var: float
    var_star: float
    cp: float
    mse: float
    used: int
    excluded: int


@dataclass(eq=False)
class StudySummary:
    rows: list[SummaryRow]
    beta_true: tuple

    def get(self, method: str, coefficient: int) -> SummaryRow:
        for row in self.rows:
            if row.method == method and row.coefficient == coefficient:
                return row
        raise KeyError((method, coefficient))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))


@dataclass(eq=False)
class EfficiencyTable:
    vs_npm: dict        # method -> list of MSE ratios per coefficient
    cross: dict         # "RE1".."RE4" -> list per coefficient (absent if a method is missing)


@dataclass(eq=False)
class RhoSummary:
    rows: dict          # method -> {"mean", "var", "var_star", "n", "n_boot"}


@dataclass(eq=False)
class StudyResult:
    design: StudyDesign
    summary: StudySummary
    efficiency: EfficiencyTable
    rho: RhoSummary
    records: list

    def write(self, outdir) -> list[Path]:
        return write_tables(self, outdir)


CROSS_RATIOS = {
    "RE1": ("gee-exchangeable", "gee-ar1"),
    "RE2": ("qif-exchangeable", "qif-ar1"),
    "RE3": ("qif-exchangeable", "gee-ar1"),
    "RE4": ("qif-ar1", "gee-exchangeable"),
}


def summarize(design: StudyDesign, records: list) -> StudyResult:
    beta_true = np.asarray(design.sim.beta_true)
    z = norm.ppf(0.5 + design.confidence / 2)
    rows = []
    mse = {}
    for key in design.keys:
        fits = [rec["fits"][key] for rec in records]
        ok = [f for f in fits if f.get("converged")]
        excluded = len(fits) - len(ok)
        if len(ok) < 2:
            for c in range(beta_true.size):
                rows.append(SummaryRow(key, c, *([np.nan] * 5), len(ok), excluded))
            mse[key] = np.full(beta_true.size, np.nan)
            continue
        B = np.array([f["beta"] for f in ok])
        S = np.array([f["se"] for f in ok])
        err = B - beta_true
        hit = np.abs(err) <= z * S
        m = np.mean(err ** 2, axis=0)
        mse[key] = m
        for c in range(beta_true.size):
            rows.append(SummaryRow(
                method=key, coefficient=c, bias=float(err[:, c].mean()),
                var=float(B[:, c].var(ddof=1)), var_star=float(np.mean(S[:, c] ** 2)),
                cp=float(100 * hit[:, c].mean()), mse=float(m[c]), used=len(ok), excluded=excluded))
    vs_npm = {}
    if "npm" in mse:
        for key in design.keys:
            if key != "npm":
                vs_npm[key] = (mse[key] / mse["npm"]).tolist()
    cross = {name: (mse[a] / mse[b]).tolist() for name, (a, b) in CROSS_RATIOS.items()
             if a in mse and b in mse}
    rho_rows = {}
    for key in design.keys:
        vals = [rec["fits"][key].get("rho") for rec in records
                if rec["fits"][key].get("converged") and rec["fits"][key].get("rho") is not None]
        if not vals:
            continue
        boots = [rec["fits"][key]["rho_boot_var"] for rec in records
                 if rec["fits"][key].get("rho_boot_var") is not None]
        rho_rows[key] = {
            "mean": float(np.mean(vals)),
            "var": float(np.var(vals, ddof=1)) if len(vals) > 1 else np.nan,
            "se_mean": float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else np.nan,
            "var_star": float(np.mean(boots)) if boots else np.nan,
            "n": len(vals),
            "n_boot": len(boots),
        }
    return StudyResult(design, StudySummary(rows, tuple(beta_true)), EfficiencyTable(vs_npm, cross),
                       RhoSummary(rho_rows), records)


def run_study(design: StudyDesign, n_jobs: int = 1, progress=None) -> StudyResult:
    """Simulate ``design.replications`` datasets and fit every method on each.

    Replication r uses a simulation seed derived from (design.seed, r), so
    results do not depend on ``n_jobs``.
    """
    if n_jobs == 1:
        records = []
        for r in range(design.replications):
            records.append(_one(design, r))
            if progress:
                progress(r + 1, design.replications)
    else:
        from joblib import Parallel, delayed
        records = Parallel(n_jobs=n_jobs)(delayed(_one)(design, r) for r in range(design.replications))
    return summarize(design, records)


# output -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


TABLE_FILES = ("bias.csv", "var.csv", "var_star.csv", "cp.csv",
               "relative_efficiency.csv", "cross_efficiency.csv", "rho.csv")


def write_tables(result: StudyResult, outdir) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    p = len(result.summary.beta_true)
    coef_cols = [f"beta{c}" for c in range(p)]
    paths = []
    for fname, attr in zip(TABLE_FILES[:4], ("bias", "var", "var_star", "cp")):
        rows = []
        for key in result.summary.methods():
            r0 = result.summary.get(key, 0)
            rows.append([key, *(getattr(result.summary.get(key, c), attr) for c in range(p)),
                         r0.used, r0.excluded])
        path = out / fname
        _write_rows(path, ["method", *coef_cols, "used", "excluded"], rows)
        paths.append(path)
    path = out / "relative_efficiency.csv"
    _write_rows(path, ["method", *coef_cols], [[k, *v] for k, v in result.efficiency.vs_npm.items()])
    paths.append(path)
    path = out / "cross_efficiency.csv"
    _write_rows(path, ["ratio", "numerator", "denominator", *coef_cols],
                [[k, *CROSS_RATIOS[k], *v] for k, v in result.efficiency.cross.items()])
    paths.append(path)
    path = out / "rho.csv"
    _write_rows(path, ["method", "mean", "var", "var_star", "n", "n_boot"],
                [[k, d["mean"], d["var"], d["var_star"], d["n"], d["n_boot"]] for k, d in result.rho.rows.items()])
    paths.append(path)
    path = out / "records.json"
    bundle = {"design": {"sim": result.design.sim.to_dict(), "methods": result.design.keys,
                         "replications": result.design.replications, "seed": result.design.seed,
                         "confidence": result.design.confidence},
              "records": result.records}
    path.write_text(json.dumps(bundle, indent=1, default=_json_default), encoding="utf-8")
    paths.append(path)
    return paths


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# Kaplan-Meier -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KaplanMeier:
    times: np.ndarray        # distinct event times
    survival: np.ndarray     # S just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        k = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        s = np.concatenate([[1.0], self.survival])
        out = s[k]
        return out if out.ndim else float(out)

    def to_csv(self, dest) -> None:
        own = isinstance(dest, (str, Path))
        fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "survival", "at_risk", "events"])
            w.writerow([repr(0.0), repr(1.0), int(self.at_risk[0]) if self.at_risk.size else 0, 0])
            for row in zip(self.times, self.survival, self.at_risk, self.events):
                w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
        finally:
            if own:
                fh.close()


def kaplan_meier(dataset: ClusteredDataset) -> KaplanMeier:
    """Product-limit estimate of the marginal survival, ignoring clustering.
    Censorings tied with events are counted at risk at that time."""
    T, d = dataset.time, dataset.event
    times = np.unique(T[d == 1])
    if times.size == 0:
        return KaplanMeier(np.array([]), np.array([]), np.array([T.size]), np.array([]))
    Ts = np.sort(T)
    at_risk = T.size - np.searchsorted(Ts, times, side="left")
    events = np.bincount(np.searchsorted(times, T[d == 1]), minlength=times.size)
    surv = np.cumprod(1.0 - events / at_risk)
    return KaplanMeier(times, surv, at_risk, events)
