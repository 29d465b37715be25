"""Alternating estimation of beta and the baseline CDF.

Each outer iteration refreshes the baseline at the current beta, updates the
GEE nuisance parameters when needed, then solves the method's estimating
equation by damped Newton-Raphson with the baseline held fixed.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import gee, qif
from .baseline import BaselineError, StepCdf, default_tau, estimate_baseline
from .data import ClusteredDataset, Family, LinkOverflowError, check_valid

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    NPM = "npm"
    GEE = "gee"
    QIF = "qif"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected npm, gee or qif") from None


@dataclass(frozen=True)
class FitConfig:
    method: Method = Method.NPM
    family: Family = Family.INDEPENDENCE
    tau: float | None = None
    beta_init: tuple | None = None
    outer_tol: float = 1e-6
    outer_max_iter: int = 100
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    max_halvings: int = 30
    qif_equation: str = "objective"
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        fam = Family.parse(self.family)
        if self.method is Method.NPM:
            fam = Family.INDEPENDENCE
        object.__setattr__(self, "family", fam)
        if self.beta_init is not None:
            object.__setattr__(self, "beta_init", tuple(float(b) for b in self.beta_init))
        if not (self.outer_tol > 0 and self.newton_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.outer_max_iter < 1 or self.newton_max_iter < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.qif_equation not in ("score", "objective"):
            raise ValueError("qif_equation must be 'score' or 'objective'")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        conv = dict(mapping)
        for key in ("outer_tol", "newton_tol"):
            if key in conv:
                conv[key] = float(conv[key])
        for key in ("outer_max_iter", "newton_max_iter", "max_halvings"):
            if key in conv:
                conv[key] = int(conv[key])
        if conv.get("tau") is not None:
            conv["tau"] = float(conv["tau"])
        if conv.get("seed") is not None:
            conv["seed"] = int(conv["seed"])
        if isinstance(conv.get("beta_init"), str):
            conv["beta_init"] = tuple(float(v) for v in conv["beta_init"].replace(";", ",").split(",") if v.strip())
        return cls(**conv)


@dataclass(eq=False)
class FitResult:
    method: Method
    family: Family
    beta_hat: np.ndarray
    covariance: np.ndarray
    baseline: StepCdf
    tau: float
    iterations: int
    converged: bool
    phi_hat: float | None = None
    rho_hat: float | None = None
    qif_value: float | None = None
    score_norm: float = np.nan
    diagnostics: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def working(self) -> gee.WorkingCorrelation:
        if self.method is Method.GEE and self.family is not Family.INDEPENDENCE:
            return gee.WorkingCorrelation(self.family, self.rho_hat, self.phi_hat)
        return gee.WorkingCorrelation()

    def terms(self, names=None) -> list[str]:
        p = self.beta_hat.size
        if names is None:
            names = [f"x{k}" for k in range(1, p)]
        return ["intercept", *names]

    def to_dict(self, names=None) -> dict:
        return {
            "method": self.method.value,
            "family": self.family.value,
            "terms": self.terms(names),
            "beta_hat": self.beta_hat.tolist(),
            "se": self.se.tolist(),
            "covariance": self.covariance.tolist(),
            "phi_hat": self.phi_hat,
            "rho_hat": self.rho_hat,
            "qif_value": self.qif_value,
            "tau": self.tau,
            "iterations": self.iterations,
            "converged": self.converged,
            "score_norm": self.score_norm,
            "diagnostics": list(self.diagnostics),
            "baseline": {
                "time": self.baseline.jump_times.tolist(),
                "mass": self.baseline.jump_masses.tolist(),
            },
        }

    def to_json(self, names=None, **kw) -> str:
        return json.dumps(self.to_dict(names), indent=kw.pop("indent", 2), **kw)

    def table_rows(self, names=None) -> list[tuple[str, float, float | None]]:
        """(term, estimate, se) rows; GEE adds phi and rho rows (without SE)."""
        rows = [(t, float(b), float(s)) for t, b, s in zip(self.terms(names), self.beta_hat, self.se)]
        if self.method is Method.GEE and self.family is not Family.INDEPENDENCE:
            rows.append(("rho", float(self.rho_hat), None))
            rows.append(("phi", float(self.phi_hat), None))
        return rows


class _Problem:
    """Estimating equation for one method at a fixed baseline and nuisance."""

    FD_STEP = 1e-6

    def __init__(self, dataset: ClusteredDataset, config: FitConfig, baseline: StepCdf,
                 corr: gee.WorkingCorrelation):
        self.ds = dataset
        self.cfg = config
        self.baseline = baseline
        self.corr = corr
        self.ridged = False

    def score(self, beta) -> np.ndarray:
        if self.cfg.method is Method.QIF:
            if self.cfg.qif_equation == "objective":
                U, _, ridged = qif.objective_gradient(beta, self.ds, self.baseline, self.cfg.family)
            else:
                es = qif.extended_score(beta, self.ds, self.baseline, self.cfg.family)
                U, _, ridged = qif.score_from(es)
            self.ridged |= ridged
            return U
        return gee.score_gee(beta, self.ds, self.baseline, self.corr)

    def jacobian(self, beta) -> np.ndarray:
        if self.cfg.method is not Method.QIF:
            return gee.jacobian_gee(beta, self.ds, self.baseline, self.corr)
        # U^Q depends on beta through Gdot and C as well as G; the product
        # Gdot' C^-1 Gdot drops those terms and is not a descent direction
        # for ||U^Q|| away from the root, so differentiate numerically.
        beta = np.asarray(beta, dtype=float)
        h = self.FD_STEP * np.maximum(1.0, np.abs(beta))
        cols = []
        for k in range(beta.size):
            e = np.zeros_like(beta)
            e[k] = h[k]
            cols.append((self.score(beta + e) - self.score(beta - e)) / (2 * h[k]))
        return np.column_stack(cols)


@dataclass
class NewtonTrace:
    iterations: int = 0
    halvings: int = 0
    stalled: bool = False
    norms: list = field(default_factory=list)


def newton_solve(problem: _Problem, beta, tol: float, max_iter: int, max_halvings: int = 30):
    """Damped Newton-Raphson; every accepted step lowers ||U||_2.

    Returns (beta, U(beta), trace)."""
    beta = np.asarray(beta, dtype=float).copy()
    U = problem.score(beta)
    trace = NewtonTrace(norms=[float(np.linalg.norm(U))])
    for _ in range(max_iter):
        if np.max(np.abs(U)) < tol:
            break
        J = problem.jacobian(beta)
        try:
            step = -np.linalg.solve(J, U)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(J, U, rcond=None)[0]
        norm0 = np.linalg.norm(U)
        accepted = False
        for h in range(max_halvings + 1):
            trial = beta + step
            try:
                # overshooting trials may overflow; they are rejected below
                with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                    U_t = problem.score(trial)
            except (LinkOverflowError, np.linalg.LinAlgError, FloatingPointError):
                U_t = None
            if U_t is not None and np.all(np.isfinite(U_t)) and np.linalg.norm(U_t) < norm0:
                accepted = True
                trace.halvings += h
                break
            step = 0.5 * step
        trace.iterations += 1
        if not accepted:
            trace.stalled = True
            break
        beta, U = trial, U_t
        trace.norms.append(float(np.linalg.norm(U)))
    return beta, U, trace


def _nuisance(beta, dataset, baseline, family, diagnostics, iteration):
    resid = gee.pearson_residuals(beta, dataset, baseline)
    phi = max(gee.estimate_phi(resid, dataset.n_obs, dataset.p_x), gee.PHI_FLOOR)
    groups = gee.split_by_cluster(resid, dataset)
    raw = gee.estimate_rho(groups, family, phi, dataset.n_obs, dataset.p_x, clip=False)
    lo, hi = gee.rho_bounds(family, int(dataset.cluster_sizes.max()))
    rho = min(max(raw, lo), hi)
    if rho != raw:
        diagnostics.append(f"rho_clipped: iteration {iteration}, raw {raw:.6g} -> {rho:.6g}")
    return gee.WorkingCorrelation(family, rho, phi)


def fit(dataset: ClusteredDataset, config: FitConfig | None = None, **overrides) -> FitResult:
    """Fit the marginal promotion time cure model.

    Non-convergence is not an error: the iterate with the smallest
    fixed-point score norm is returned with ``converged=False``.
    """
    config = config or FitConfig()
    if overrides:
        config = replace(config, **overrides)
    check_valid(dataset)
    tau = default_tau(dataset) if config.tau is None else float(config.tau)
    p = dataset.n_params
    diagnostics: list[str] = []
    if config.beta_init is not None:
        beta = np.asarray(config.beta_init, dtype=float)
    elif config.method is Method.QIF:
        # At beta = 0 every mu is 1, and with equal cluster sizes the basis
        # blocks become proportional, so C_K is exactly singular there; the
        # objective is also far from convex out there.  Start from the
        # independence estimate, which is already the answer when m = 1.
        start = fit(dataset, replace(config, method=Method.NPM, family=Family.INDEPENDENCE))
        beta = start.beta_hat.copy()
        diagnostics.append("qif_start: independence estimate")
    else:
        beta = np.zeros(p)
    if beta.size != p:
        raise ValueError(f"beta_init has length {beta.size}, expected {p}")
    use_gee_nuisance = config.method is Method.GEE and config.family is not Family.INDEPENDENCE
    if use_gee_nuisance:
        gee.WorkingCorrelation(config.family, 0.0).check_positive_definite(dataset.cluster_sizes)

    best = None
    converged = False
    halvings = 0
    stalls = 0
    ridged = False
    it = 0
    state = None
    for it in range(1, config.outer_max_iter + 1):
        baseline = estimate_baseline(beta, dataset, tau)
        corr = (_nuisance(beta, dataset, baseline, config.family, diagnostics, it)
                if use_gee_nuisance else gee.WorkingCorrelation())
        problem = _Problem(dataset, config, baseline, corr)
        beta_new, U_new, trace = newton_solve(problem, beta, config.newton_tol,
                                              config.newton_max_iter, config.max_halvings)
        start_norm = trace.norms[0]
        if best is None or start_norm < best[0]:
            best = (start_norm, beta.copy(), baseline, corr)
        halvings += trace.halvings
        stalls += trace.stalled
        ridged |= problem.ridged
        delta = float(np.max(np.abs(beta_new - beta)))
        beta = beta_new
        state = (beta.copy(), baseline, corr, float(np.max(np.abs(U_new))))
        if delta < config.outer_tol and np.max(np.abs(U_new)) < config.newton_tol:
            converged = True
            break

    if converged:
        beta_hat, baseline, corr, score_norm = state
    else:
        _, beta_hat, baseline, corr = best
        problem = _Problem(dataset, config, baseline, corr)
        score_norm = float(np.max(np.abs(problem.score(beta_hat))))
        diagnostics.append(f"not_converged: {config.outer_max_iter} outer iterations")
    if halvings:
        diagnostics.append(f"newton_halvings: {halvings}")
    if stalls:
        diagnostics.append(f"newton_stalls: {stalls}")

    qif_value = None
    if config.method is Method.QIF:
        cov_q = qif.qif_covariance(beta_hat, dataset, baseline, config.family)
        covariance = cov_q.covariance
        es = qif.extended_score(beta_hat, dataset, baseline, config.family)
        qif_value = qif.objective_from(es)
        ridged |= cov_q.ridged
        diagnostics.append(f"qif_sandwich_gap: {cov_q.gap:.3g}")
    else:
        covariance = gee.sandwich_covariance(beta_hat, dataset, baseline, corr).covariance
    if ridged:
        diagnostics.append("ridge: weighting matrix regularized")

    return FitResult(
        method=config.method,
        family=config.family,
        beta_hat=np.asarray(beta_hat),
        covariance=covariance,
        baseline=baseline,
        tau=tau,
        iterations=it,
        converged=converged,
        phi_hat=corr.phi if use_gee_nuisance else None,
        rho_hat=corr.rho if use_gee_nuisance else None,
        qif_value=qif_value,
        score_norm=score_norm,
        diagnostics=diagnostics,
    )


# bootstrap -----------------------------------------------------------------

class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("at least two bootstrap replicates are required")


@dataclass(eq=False)
class BootstrapResult:
    times: np.ndarray
    phi: np.ndarray            # per replicate (nan when not estimated)
    rho: np.ndarray
    cdf: np.ndarray            # (R, len(times))
    beta: np.ndarray           # (R, p)
    converged: np.ndarray
    failed: int

    def _var(self, x):
        x = x[self.converged]
        return np.var(x, axis=0, ddof=1) if x.shape[0] > 1 else np.full(x.shape[1:], np.nan)

    @property
    def phi_var(self) -> float:
        return float(self._var(self.phi))

    @property
    def rho_var(self) -> float:
        return float(self._var(self.rho))

    @property
    def cdf_var(self) -> np.ndarray:
        return self._var(self.cdf)

    @property
    def beta_var(self) -> np.ndarray:
        return self._var(self.beta)

    def to_dict(self) -> dict:
        return {
            "replicates": int(self.converged.size),
            "failed": int(self.failed),
            "phi_var": _nan_to_none(self.phi_var),
            "rho_var": _nan_to_none(self.rho_var),
            "times": self.times.tolist(),
            "cdf_var": [_nan_to_none(v) for v in self.cdf_var],
            "beta_var": [_nan_to_none(v) for v in self.beta_var],
        }


def _nan_to_none(v):
    v = float(v)
    return None if np.isnan(v) else v


def _one_replicate(dataset, config, child, times):
    rng = np.random.Generator(np.random.Philox(child))
    idx = rng.integers(0, dataset.n_clusters, size=dataset.n_clusters)
    sample = dataset.subset(idx)
    try:
        res = fit(sample, config)
    except (BaselineError, LinkOverflowError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("bootstrap replicate failed: %s", exc)
        return None
    return (res.converged, res.phi_hat, res.rho_hat, res.baseline(times), res.beta_hat)


def bootstrap(dataset: ClusteredDataset, config: FitConfig, boot: BootstrapConfig,
              times=None, n_jobs: int = 1) -> BootstrapResult:
    """Cluster bootstrap of the nuisance estimates (phi, rho, baseline CDF)."""
    original = fit(dataset, config)
    if not original.converged:
        raise BootstrapError("fit does not converge on the original data")
    if times is None:
        times = np.quantile(dataset.time[dataset.event == 1], [0.25, 0.5, 0.75])
    times = np.atleast_1d(np.asarray(times, dtype=float))
    # the original tau may sit below a resample's largest event time, so each
    # replicate uses its own data-driven threshold unless tau was fixed
    children = np.random.SeedSequence(boot.seed).spawn(boot.replicates)
    if n_jobs == 1:
        out = [_one_replicate(dataset, config, c, times) for c in children]
    else:
        from joblib import Parallel, delayed
        out = Parallel(n_jobs=n_jobs)(delayed(_one_replicate)(dataset, config, c, times) for c in children)

    R, p = boot.replicates, dataset.n_params
    phi = np.full(R, np.nan)
    rho = np.full(R, np.nan)
    cdf = np.full((R, times.size), np.nan)
    beta = np.full((R, p), np.nan)
    conv = np.zeros(R, dtype=bool)
    for r, o in enumerate(out):
        if o is None:
            continue
        conv[r], ph, rh, cd, b = o
        phi[r] = np.nan if ph is None else ph
        rho[r] = np.nan if rh is None else rh
        cdf[r] = cd
        beta[r] = b
    failed = int(R - conv.sum())
    if failed > 0.2 * R:
        raise BootstrapError(f"{failed} of {R} bootstrap replicates failed to converge")
    return BootstrapResult(times=times, phi=phi, rho=rho, cdf=cdf, beta=beta, converged=conv, failed=failed)
