"""Nonparametric baseline CDF via the Lagrange-multiplier NPMLE.

Given beta, the jump at each uncensored time T is (1/N) / (R(T) - lambda),
where R is the covariate-weighted risk average and lambda is chosen so that
the jumps sum to one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .data import ClusteredDataset, linear_predictor


class BaselineError(ArithmeticError):
    """The Lagrange multiplier could not be found or produced bad masses."""


@dataclass(frozen=True, eq=False)
class StepCdf:
    """Right-continuous step CDF with jumps ``jump_masses`` at ``jump_times``."""

    jump_times: np.ndarray
    jump_masses: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float)
        m = np.asarray(self.jump_masses, dtype=float)
        if t.shape != m.shape or t.ndim != 1 or t.size == 0:
            raise ValueError("jump_times and jump_masses must be equal-length, nonempty 1-d arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "jump_masses", m)
        object.__setattr__(self, "_cdf", np.cumsum(m))

    @property
    def cdf_values(self) -> np.ndarray:
        return self._cdf

    @property
    def total_mass(self) -> float:
        return float(self._cdf[-1])

    def __call__(self, t):
        k = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        out = np.where(k > 0, self._cdf[np.maximum(k - 1, 0)], 0.0)
        return out if out.ndim else float(out)

    def to_csv(self, dest) -> None:
        own = isinstance(dest, (str, Path))
        fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "mass", "cdf"])
            for t, m, c in zip(self.jump_times, self.jump_masses, self._cdf):
                w.writerow([repr(float(t)), repr(float(m)), repr(float(c))])
        finally:
            if own:
                fh.close()


def default_tau(dataset: ClusteredDataset) -> float:
    """Smallest admissible cure threshold: the largest uncensored time."""
    return float(np.max(dataset.time[dataset.event == 1]))


def _check_tau(dataset: ClusteredDataset, tau: float | None) -> float:
    if tau is None:
        return default_tau(dataset)
    tau = float(tau)
    if not tau >= default_tau(dataset):
        raise ValueError(f"cure threshold {tau} is below the largest uncensored time {default_tau(dataset)}")
    return tau


def risk_weight(beta, dataset: ClusteredDataset, u, tau: float | None = None):
    """R(u) = (1/N) sum exp(beta'X) * [I(u <= T <= tau) + I(T > tau)]."""
    tau = _check_tau(dataset, tau)
    w = np.exp(linear_predictor(beta, dataset.design))
    T = dataset.time
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    beyond = w[T > tau].sum()
    inside = ((u_arr[:, None] <= T[None, :]) & (T[None, :] <= tau)) @ w
    out = (inside + beyond) / dataset.n_obs
    return out if np.ndim(u) else float(out[0])


def _risk_at_events(mu: np.ndarray, T: np.ndarray, event: np.ndarray) -> np.ndarray:
    """R evaluated at each uncensored time (event order preserved).

    Uncensored times never exceed tau, so for those u the two indicators
    together reduce to I(T >= u)."""
    order = np.argsort(T, kind="stable")
    Ts = T[order]
    tail = np.cumsum(mu[order][::-1])[::-1]
    tail = np.append(tail, 0.0)
    first = np.searchsorted(Ts, T[event == 1], side="left")
    return tail[first] / T.size


def _lambda_equation(R: np.ndarray, n: int):
    def h(lam):
        # at lam == min R (hi rounds onto it for huge risks) +inf is the right limit
        with np.errstate(divide="ignore"):
            return np.sum(1.0 / (R - lam)) / n - 1.0
    return h


def solve_lambda_from_risk(R: np.ndarray, n: int) -> float:
    """Root of (1/n) sum 1/(R_j - lam) = 1 on lam < min R_j.

    The left side increases from 0 to +inf on (-inf, min R); at the root each
    term is at most one, so lam lies in [min R - D/n, min R - 1/n]."""
    R = np.asarray(R, dtype=float)
    D = R.size
    if D == 0:
        raise BaselineError("no uncensored observation")
    m = R.min()
    if not np.isfinite(m) or m <= 0:
        raise BaselineError("risk weights must be positive and finite")
    lo, hi = m - D / n, m - 1.0 / n
    h = _lambda_equation(R, n)
    f_lo, f_hi = h(lo), h(hi)
    if f_lo > 0 or f_hi < 0:
        raise BaselineError("Lagrange multiplier is not bracketed")
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    lam = brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    # polish: Newton is quadratically convergent here and keeps lam < m
    for _ in range(3):
        r = h(lam)
        if abs(r) < 1e-14:
            break
        d = np.sum((R - lam) ** -2.0) / n
        step = r / d
        if lam - step < m:
            lam -= step
    return float(lam)


def solve_lambda(beta, dataset: ClusteredDataset, tau: float | None = None) -> float:
    tau = _check_tau(dataset, tau)
    mu = np.exp(linear_predictor(beta, dataset.design))
    R = _risk_at_events(mu, dataset.time, dataset.event)
    return solve_lambda_from_risk(R, dataset.n_obs)


def estimate_baseline(beta, dataset: ClusteredDataset, tau: float | None = None) -> StepCdf:
    """Baseline CDF estimate at the given coefficients.

    Tied uncensored times get the sum of their per-observation masses.
    """
    tau = _check_tau(dataset, tau)
    mu = np.exp(linear_predictor(beta, dataset.design))
    R = _risk_at_events(mu, dataset.time, dataset.event)
    n = dataset.n_obs
    lam = solve_lambda_from_risk(R, n)
    mass = (1.0 / n) / (R - lam)
    if np.any(~np.isfinite(mass)) or np.any(mass <= 0):
        raise BaselineError("nonpositive jump mass; Lagrange multiplier inadmissible")
    t_ev = dataset.time[dataset.event == 1]
    times, inv = np.unique(t_ev, return_inverse=True)
    merged = np.zeros(times.size)
    np.add.at(merged, inv, mass)
    return StepCdf(times, merged)
