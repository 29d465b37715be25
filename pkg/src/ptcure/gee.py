"""Weighted generalized estimating equations for the marginal cure model.

With mu = exp(beta'X), B = diag(mu), W = diag(F(t)) and kappa = delta / F(t),
cluster i contributes

    U_i = (d mu_i / d beta)' {B_i^1/2 Q_i(rho) B_i^1/2 phi}^-1 W_i (kappa_i - mu_i)

to the estimating function.  Under independence with phi = 1 this is the
likelihood score sum_ij X_ij (delta_ij - F(t_ij) mu_ij).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .baseline import StepCdf
from .data import ClusteredDataset, Family

RHO_MARGIN = 1e-6
PHI_FLOOR = 1e-8


@dataclass(frozen=True)
class WorkingCorrelation:
    family: Family = Family.INDEPENDENCE
    rho: float | None = None
    phi: float = 1.0

    def __post_init__(self):
        fam = Family.parse(self.family)
        object.__setattr__(self, "family", fam)
        if fam is Family.INDEPENDENCE:
            if self.rho not in (None, 0, 0.0):
                raise ValueError("independence has no correlation parameter")
            object.__setattr__(self, "rho", None)
            if self.phi != 1.0:
                raise ValueError("independence working structure fixes phi = 1")
        else:
            rho = 0.0 if self.rho is None else float(self.rho)
            if not -1.0 < rho < 1.0:
                raise ValueError(f"rho must lie in (-1, 1), got {rho}")
            object.__setattr__(self, "rho", rho)
        if not self.phi > 0:
            raise ValueError("phi must be positive")

    def matrix(self, n: int) -> np.ndarray:
        """Q(rho) for a cluster of size n."""
        if self.family is Family.INDEPENDENCE:
            return np.eye(n)
        if self.family is Family.EXCHANGEABLE:
            return (1 - self.rho) * np.eye(n) + self.rho * np.ones((n, n))
        idx = np.arange(n)
        return self.rho ** np.abs(idx[:, None] - idx[None, :])

    def inverse(self, n: int) -> np.ndarray:
        """Q(rho)^-1 in closed form."""
        if self.family is Family.INDEPENDENCE or n == 1:
            return np.eye(n)
        r = self.rho
        if self.family is Family.EXCHANGEABLE:
            denom = 1 + (n - 1) * r
            if denom <= 0:
                raise np.linalg.LinAlgError(f"exchangeable Q is singular for rho={r}, n={n}")
            return (np.eye(n) - (r / denom) * np.ones((n, n))) / (1 - r)
        # AR(1): tridiagonal inverse
        inv = np.diag(np.full(n, 1 + r * r))
        inv[0, 0] = inv[-1, -1] = 1.0
        k = np.arange(n - 1)
        inv[k, k + 1] = inv[k + 1, k] = -r
        return inv / (1 - r * r)

    def check_positive_definite(self, sizes) -> None:
        for n in np.unique(np.asarray(sizes)):
            if np.linalg.eigvalsh(self.matrix(int(n))).min() <= 0:
                raise np.linalg.LinAlgError(f"working correlation is not positive definite at n={n}")


@dataclass(frozen=True, eq=False)
class SandwichCovariance:
    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


def _gee_matrices(corr: WorkingCorrelation):
    cache: dict[int, np.ndarray] = {}

    def get(n: int) -> np.ndarray:
        if n not in cache:
            cache[n] = (corr.inverse(n) / corr.phi)[None]
        return cache[n]

    return get


def _independence(n: int) -> np.ndarray:
    return np.eye(n)[None]


def score_independent(beta, dataset: ClusteredDataset, baseline: StepCdf) -> np.ndarray:
    pc = _kernels.pieces(beta, dataset, baseline)
    return dataset.design.T @ pc.resid


def cluster_scores(beta, dataset, baseline, corr: WorkingCorrelation) -> np.ndarray:
    """(K, p) array of per-cluster U_i."""
    pc = _kernels.pieces(beta, dataset, baseline)
    s, _ = _kernels.weighted_scores(dataset, pc, _gee_matrices(corr), jacobian=False)
    return s[:, 0, :]


def score_gee(beta, dataset: ClusteredDataset, baseline: StepCdf, corr: WorkingCorrelation) -> np.ndarray:
    return cluster_scores(beta, dataset, baseline, corr).sum(axis=0)


def jacobian_gee(beta, dataset: ClusteredDataset, baseline: StepCdf, corr: WorkingCorrelation) -> np.ndarray:
    """dU/dbeta with F, rho and phi held fixed."""
    pc = _kernels.pieces(beta, dataset, baseline)
    _, jac = _kernels.weighted_scores(dataset, pc, _gee_matrices(corr), jacobian=True)
    return jac[0]


def score_and_jacobian(beta, dataset, baseline, corr):
    """Per-cluster scores and the summed Jacobian in one pass."""
    pc = _kernels.pieces(beta, dataset, baseline)
    s, jac = _kernels.weighted_scores(dataset, pc, _gee_matrices(corr), jacobian=True)
    return s[:, 0, :], jac[0]


def pearson_residuals(beta, dataset: ClusteredDataset, baseline: StepCdf) -> np.ndarray:
    """(kappa - mu) / sqrt(mu), with kappa = 0 for censored observations."""
    pc = _kernels.pieces(beta, dataset, baseline)
    kappa = np.zeros_like(pc.mu)
    ev = dataset.event == 1
    if np.any(pc.F[ev] <= 0):
        raise ValueError("baseline CDF vanishes at an uncensored time")
    kappa[ev] = 1.0 / pc.F[ev]
    return (kappa - pc.mu) / np.sqrt(pc.mu)


def estimate_phi(residuals, n_obs: int, p_x: int) -> float:
    """sum(e^2) / (N - p_X - 1).  May be 0; callers dividing by it floor it."""
    denom = n_obs - p_x - 1
    if denom <= 0:
        raise ValueError(f"dispersion needs N > p_X + 1 (N={n_obs}, p_X={p_x})")
    return float(np.sum(np.asarray(residuals, dtype=float) ** 2) / denom)


def rho_bounds(family: Family, n_max: int) -> tuple[float, float]:
    """Interval keeping Q(rho) positive definite, shrunk by RHO_MARGIN."""
    family = Family.parse(family)
    if family is Family.EXCHANGEABLE and n_max > 1:
        return -1.0 / (n_max - 1) + RHO_MARGIN, 1.0 - RHO_MARGIN
    return -1.0 + RHO_MARGIN, 1.0 - RHO_MARGIN


def estimate_rho(residuals_by_cluster, family, phi: float, n_obs: int, p_x: int, clip: bool = True) -> float:
    """Moment estimator of the working correlation parameter.

    Exchangeable: phi^-1 sum_i sum_{j!=k} e_ij e_ik / (sum_i n_i(n_i-1) - p_X - 1).
    AR(1): phi^-1 sum_i sum_j e_ij e_i,j+1 / (sum_i (n_i-1) - p_X - 1).
    """
    family = Family.parse(family)
    groups = [np.asarray(g, dtype=float) for g in residuals_by_cluster]
    sizes = np.array([g.size for g in groups])
    if family is Family.EXCHANGEABLE:
        num = sum(g.sum() ** 2 - np.sum(g * g) for g in groups)
        pairs = int(np.sum(sizes * (sizes - 1)))
    elif family is Family.AR1:
        num = sum(np.sum(g[:-1] * g[1:]) for g in groups)
        pairs = int(np.sum(sizes - 1))
    else:
        raise ValueError("independence has no correlation parameter")
    if pairs == 0:
        raise ValueError("no within-cluster pairs; every cluster is a singleton")
    denom = pairs - p_x - 1
    if denom <= 0:
        raise ValueError("too few within-cluster pairs for the correlation estimate")
    rho = float(num / (max(phi, PHI_FLOOR) * denom))
    if clip:
        lo, hi = rho_bounds(family, int(sizes.max()))
        rho = min(max(rho, lo), hi)
    return rho


def split_by_cluster(values, dataset: ClusteredDataset) -> list[np.ndarray]:
    return np.split(np.asarray(values), dataset.offsets[1:-1])


def sandwich_covariance(beta_hat, dataset: ClusteredDataset, baseline: StepCdf,
                        corr: WorkingCorrelation) -> SandwichCovariance:
    """bread^-1 meat bread^-T with bread = -dU/dbeta and meat = sum U_i U_i'.

    This is the finite-sample covariance of beta_hat (no 1/K rescaling).
    """
    scores, jac = score_and_jacobian(beta_hat, dataset, baseline, corr)
    bread = -jac
    meat = scores.T @ scores
    binv = np.linalg.inv(bread)
    cov = binv @ meat @ binv.T
    cov = 0.5 * (cov + cov.T)
    return SandwichCovariance(bread=bread, meat=meat, covariance=cov)
