"""Per-cluster weighted scores shared by the GEE and QIF estimating functions.

Both estimators are built from terms of the form

    X_i' diag(a_i) M diag(1/a_i) r_i,      a = sqrt(mu),  r = delta - F(t) mu,

for a family of n_i x n_i weight matrices M (the scaled inverse working
correlation for GEE, the 0/1 basis matrices for QIF).  This module evaluates
them, and their beta-Jacobians with F held fixed, batched over clusters of
equal size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .baseline import StepCdf
from .data import ClusteredDataset, linear_predictor


@dataclass(frozen=True, eq=False)
class Pieces:
    """Observation-level quantities at (beta, F)."""

    mu: np.ndarray
    F: np.ndarray
    resid: np.ndarray  # delta - F * mu, i.e. W (kappa - mu) without the 0/0 hazard


def pieces(beta, dataset: ClusteredDataset, baseline: StepCdf) -> Pieces:
    mu = np.exp(linear_predictor(beta, dataset.design))
    F = np.asarray(baseline(dataset.time), dtype=float)
    return Pieces(mu=mu, F=F, resid=dataset.event - F * mu)


def weighted_scores(
    dataset: ClusteredDataset,
    pc: Pieces,
    matrices: Callable[[int], np.ndarray],
    jacobian: bool = True,
    per_cluster: bool = False,
):
    """Evaluate the weighted score blocks.

    Parameters
    ----------
    matrices : callable
        ``matrices(n)`` returns an (m, n, n) stack of weight matrices for
        clusters of size n.  m must not depend on n.

    Returns
    -------
    scores : (K, m, p) per-cluster score blocks, in cluster order
    jac : (m, p, p) summed Jacobian d(sum_i score_i)/d beta, or None;
        with ``per_cluster`` the unsummed (K, m, p, p) array instead
    """
    X = dataset.design
    p = X.shape[1]
    scores = None
    jac = None
    for n, pos, rows in dataset.size_groups:
        M = np.asarray(matrices(n), dtype=float)
        m = M.shape[0]
        if scores is None:
            scores = np.zeros((dataset.n_clusters, m, p))
            if jacobian:
                jac = np.zeros((dataset.n_clusters, m, p, p) if per_cluster else (m, p, p))
        Xg = X[rows]                      # (c, n, p)
        a = np.sqrt(pc.mu[rows])          # (c, n)
        s = pc.resid[rows] / a
        y = np.einsum("snk,ck->csn", M, s)
        A = Xg * a[..., None]
        scores[pos] = np.einsum("cnp,csn->csp", A, y)
        if jacobian:
            Fa = pc.F[rows] * a
            Z = Xg * (0.5 * s + Fa)[..., None]
            MZ = np.einsum("snk,ckq->csnq", M, Z)
            inner = 0.5 * y[..., None] * Xg[:, None, :, :] - MZ
            if per_cluster:
                jac[pos] = np.einsum("cnp,csnq->cspq", A, inner)
            else:
                jac += np.einsum("cnp,csnq->spq", A, inner)
    return scores, jac
