"""Quadratic inference functions.

The inverse working correlation is expanded on 0/1 basis matrices M_1..M_m;
each cluster then yields a stacked score g_i whose blocks use one basis matrix
each.  beta is estimated by the GMM combination of these blocks weighted by
their empirical second moment, so no correlation parameter is estimated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .baseline import StepCdf
from .data import ClusteredDataset, Family

RIDGE_TRIGGER = 1e-10
RIDGE_SIZE = 1e-8


def n_basis(family) -> int:
    return {Family.INDEPENDENCE: 1, Family.EXCHANGEABLE: 2, Family.AR1: 3}[Family.parse(family)]


def basis_matrices(family, n: int) -> list[np.ndarray]:
    """Basis matrices for a cluster of size n.  A singleton cluster only has
    the identity; the other patterns are empty there."""
    family = Family.parse(family)
    if n < 1:
        raise ValueError("cluster size must be positive")
    eye = np.eye(n)
    if n == 1 or family is Family.INDEPENDENCE:
        return [eye]
    if family is Family.EXCHANGEABLE:
        return [eye, np.ones((n, n)) - eye]
    off = np.eye(n, k=1) + np.eye(n, k=-1)
    corners = np.zeros((n, n))
    corners[0, 0] = corners[-1, -1] = 1.0
    return [eye, off, corners]


def _stack(family):
    m = n_basis(family)
    cache: dict[int, np.ndarray] = {}

    def get(n: int) -> np.ndarray:
        if n not in cache:
            mats = basis_matrices(family, n)
            # keep block positions fixed when a pattern is empty at this size
            mats = mats + [np.zeros((n, n))] * (m - len(mats))
            cache[n] = np.stack(mats)
        return cache[n]

    return get


@dataclass(frozen=True, eq=False)
class ExtendedScore:
    """Stacked scores; block s occupies rows s*p .. (s+1)*p - 1.

    ``jacobian`` is dG_K/dbeta, i.e. the cluster average.
    """

    g: np.ndarray          # (K, m*p)
    mean: np.ndarray       # (m*p,)
    weight: np.ndarray     # (m*p, m*p)
    jacobian: np.ndarray   # (m*p, p)
    g_jacobian: np.ndarray | None = None   # (K, m*p, p) when requested

    @property
    def n_clusters(self) -> int:
        return self.g.shape[0]


def extended_score(beta, dataset: ClusteredDataset, baseline: StepCdf, family,
                   per_cluster: bool = False) -> ExtendedScore:
    """g_i, G_K, C_K and Gdot_K at beta.  With ``per_cluster`` the cluster
    Jacobians dg_i/dbeta are kept in ``g_jacobian`` (K, m*p, p)."""
    pc = _kernels.pieces(beta, dataset, baseline)
    blocks, jac = _kernels.weighted_scores(dataset, pc, _stack(family), jacobian=True,
                                           per_cluster=per_cluster)
    K, m, p = blocks.shape
    g = blocks.reshape(K, m * p)
    if per_cluster:
        g_jac = jac.reshape(K, m * p, p)
        mean_jac = g_jac.mean(axis=0)
    else:
        g_jac = None
        mean_jac = jac.reshape(m * p, p) / K
    return ExtendedScore(g=g, mean=g.mean(axis=0), weight=g.T @ g / K, jacobian=mean_jac, g_jacobian=g_jac)


def extended_score_jacobian(beta, dataset: ClusteredDataset, baseline: StepCdf, family) -> np.ndarray:
    """d(K G_K)/dbeta, the cluster sum of the block Jacobians."""
    pc = _kernels.pieces(beta, dataset, baseline)
    _, jac = _kernels.weighted_scores(dataset, pc, _stack(family), jacobian=True)
    m, p, _ = jac.shape
    return jac.reshape(m * p, p)


def regularized_weight(C: np.ndarray) -> tuple[np.ndarray, bool]:
    """C_K, with a small ridge added when it is numerically singular."""
    tr = float(np.trace(C))
    if tr <= 0:
        raise np.linalg.LinAlgError("weighting matrix is zero; the extended score vanishes")
    lam_min = float(np.linalg.eigvalsh(C)[0])
    if lam_min < RIDGE_TRIGGER * tr:
        return C + (RIDGE_SIZE * tr / C.shape[0]) * np.eye(C.shape[0]), True
    return C, False


def _weighted_solve(es: ExtendedScore, rhs: np.ndarray):
    C, ridged = regularized_weight(es.weight)
    return np.linalg.solve(C, rhs), ridged


def qif_objective(beta, dataset: ClusteredDataset, baseline: StepCdf, family) -> float:
    """G_K' C_K^-1 G_K."""
    es = extended_score(beta, dataset, baseline, family)
    return objective_from(es)


def objective_from(es: ExtendedScore) -> float:
    if not np.any(es.mean):
        return 0.0
    x, _ = _weighted_solve(es, es.mean)
    return float(max(es.mean @ x, 0.0))


def score_qif(beta, dataset: ClusteredDataset, baseline: StepCdf, family) -> np.ndarray:
    """U^Q = Gdot_K' C_K^-1 G_K."""
    es = extended_score(beta, dataset, baseline, family)
    return score_from(es)[0]


def score_from(es: ExtendedScore):
    """(U^Q, approximate Jacobian Gdot' C^-1 Gdot, ridge flag)."""
    if not np.any(es.mean):
        p = es.jacobian.shape[1]
        return np.zeros(p), None, False
    C, ridged = regularized_weight(es.weight)
    CinvG = np.linalg.solve(C, es.mean)
    CinvJ = np.linalg.solve(C, es.jacobian)
    return es.jacobian.T @ CinvG, es.jacobian.T @ CinvJ, ridged


def objective_gradient(beta, dataset: ClusteredDataset, baseline: StepCdf, family):
    """Half the exact gradient of Q(beta) = G' C^-1 G, including the change
    of C_K with beta:

        Gdot' a - (1/K) sum_i (g_i' a) (dg_i/dbeta)' a,   a = C^-1 G.

    Returns (gradient / 2, Gdot' C^-1 Gdot, ridge flag)."""
    es = extended_score(beta, dataset, baseline, family, per_cluster=True)
    p = es.jacobian.shape[1]
    if not np.any(es.mean):
        return np.zeros(p), None, False
    C, ridged = regularized_weight(es.weight)
    a = np.linalg.solve(C, es.mean)
    ga = es.g @ a                                    # (K,)
    correction = np.einsum("k,kjp,j->p", ga, es.g_jacobian, a) / es.n_clusters
    CinvJ = np.linalg.solve(C, es.jacobian)
    return es.jacobian.T @ a - correction, es.jacobian.T @ CinvJ, ridged


@dataclass(frozen=True, eq=False)
class QifCovariance:
    covariance: np.ndarray   # sandwich form, reported
    simplified: np.ndarray   # (1/K) [Gdot' C^-1 Gdot]^-1
    gap: float               # max elementwise relative difference between the two
    ridged: bool

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


def qif_covariance(beta_hat, dataset: ClusteredDataset, baseline: StepCdf, family) -> QifCovariance:
    """Sandwich covariance of beta_Q for the summed estimating function
    sum_i Gdot' C^-1 g_i, whose bread is K Gdot' C^-1 Gdot."""
    es = extended_score(beta_hat, dataset, baseline, family)
    K = es.n_clusters
    C, ridged = regularized_weight(es.weight)
    CinvJ = np.linalg.solve(C, es.jacobian)
    info = es.jacobian.T @ CinvJ
    u = es.g @ CinvJ                      # rows: U^Q_i = Gdot' C^-1 g_i
    bread_inv = np.linalg.inv(K * info)
    cov = bread_inv @ (u.T @ u) @ bread_inv.T
    cov = 0.5 * (cov + cov.T)
    simple = np.linalg.inv(info) / K
    simple = 0.5 * (simple + simple.T)
    scale = np.maximum(np.abs(simple), np.finfo(float).tiny)
    gap = float(np.max(np.abs(cov - simple) / scale))
    return QifCovariance(covariance=cov, simplified=simple, gap=gap, ridged=ridged)
