"""Bivariate normal CDF and the latent correlation for correlated binaries."""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)
_MAX_LEVEL = 12


def _panel_integral(h, k, hk2, upper, panels: int):
    """Composite Gauss-Legendre estimate of the angle integral with
    ``panels`` equal panels on [0, upper]."""
    width = upper / panels
    centers = (np.arange(panels) + 0.5)[:, None] * width[None, :]        # (P, M)
    theta = centers[None] + 0.5 * width[None, None, :] * _GL_NODES[:, None, None]
    s = np.sin(theta)
    c2 = np.cos(theta) ** 2
    f = np.exp(-(hk2 - 2.0 * h * k * s) / (2.0 * c2))
    return 0.5 * width * np.einsum("g,gpm->m", _GL_WEIGHTS, f)


def bvn_cdf(h, k, rho, tol: float = 1e-12):
    """P(X <= h, Y <= k) for standard bivariate normal with correlation rho.

    Uses Phi(h)Phi(k) + (1/2pi) int_0^{asin rho} exp(-(h^2+k^2-2hk sin t)/(2cos^2 t)) dt,
    integrated by adaptive composite Gauss-Legendre (panels doubled until two
    successive estimates agree to ``tol``).
    """
    h, k, rho = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (h, k, rho)))
    shape = h.shape
    h, k, rho = h.ravel(), k.ravel(), rho.ravel()
    if np.any(np.abs(rho) > 1):
        raise ValueError("correlation must lie in [-1, 1]")
    out = ndtr(h) * ndtr(k)
    upper = np.arcsin(rho)
    live = upper != 0
    # the integrand vanishes at theta = +-pi/2 unless h = k (rho = 1) or h = -k
    # (rho = -1); handle the exact endpoints in closed form
    at_one = rho == 1.0
    at_minus = rho == -1.0
    out[at_one] = ndtr(np.minimum(h[at_one], k[at_one]))
    out[at_minus] = np.maximum(ndtr(h[at_minus]) - ndtr(-k[at_minus]), 0.0)
    live &= ~(at_one | at_minus)
    if np.any(live):
        idx = np.flatnonzero(live)
        hh, kk, uu = h[idx], k[idx], upper[idx]
        hk2 = hh * hh + kk * kk
        prev = _panel_integral(hh, kk, hk2, uu, 1)
        result = prev.copy()
        todo = np.arange(idx.size)
        panels = 1
        for _ in range(_MAX_LEVEL):
            panels *= 2
            cur = _panel_integral(hh[todo], kk[todo], hk2[todo], uu[todo], panels)
            done = np.abs(cur - prev) <= tol
            result[todo] = cur
            todo, prev = todo[~done], cur[~done]
            if todo.size == 0:
                break
        out[idx] += result / (2.0 * np.pi)
    out = np.clip(out, 0.0, 1.0)
    return out.reshape(shape) if shape else float(out[0])


def binary_correlation(pi_j, pi_k, zeta):
    """Correlation of I(V_j > 0), I(V_k > 0) where V ~ N(h, [[1, zeta], [zeta, 1]])
    and Phi(h) = pi."""
    pi_j, pi_k, zeta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (pi_j, pi_k, zeta)))
    hj, hk = ndtri(pi_j), ndtri(pi_k)
    joint = bvn_cdf(hj, hk, zeta)
    return (joint - pi_j * pi_k) / np.sqrt(pi_j * pi_k * (1 - pi_j) * (1 - pi_k))


ZETA_EDGE = 1e-9


def correlation_range(pi_j, pi_k):
    """Binary correlations attainable by thresholding a bivariate normal."""
    lo = binary_correlation(pi_j, pi_k, -1 + ZETA_EDGE)
    hi = binary_correlation(pi_j, pi_k, 1 - ZETA_EDGE)
    return lo, hi


def solve_zeta(pi_j, pi_k, eta, tol: float = 1e-13, clip: bool = False):
    """Vectorized bisection for the normal correlation that yields binary
    correlation ``eta``.  Returns (zeta, unattainable_mask).

    With ``clip`` false an unattainable target raises ValueError; otherwise
    it is mapped to the nearest end of the zeta interval.
    """
    pi_j, pi_k, eta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (pi_j, pi_k, eta)))
    shape = eta.shape
    pi_j, pi_k, eta = pi_j.ravel(), pi_k.ravel(), eta.ravel()
    if np.any((pi_j <= 0) | (pi_j >= 1) | (pi_k <= 0) | (pi_k >= 1)):
        raise ValueError("marginal probabilities must lie in (0, 1)")
    lo_eta, hi_eta = correlation_range(pi_j, pi_k)
    slack = 1e-8
    bad = (eta > hi_eta + slack) | (eta < lo_eta - slack)
    if np.any(bad) and not clip:
        j = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"binary correlation {eta[j]:.6g} is not attainable for margins "
            f"({pi_j[j]:.6g}, {pi_k[j]:.6g}); range is [{lo_eta[j]:.6g}, {hi_eta[j]:.6g}]")
    lo = np.full(eta.shape, -1 + ZETA_EDGE)
    hi = np.full(eta.shape, 1 - ZETA_EDGE)
    zeta = np.zeros(eta.shape)
    zeta[eta >= hi_eta] = hi[eta >= hi_eta]
    zeta[eta <= lo_eta] = lo[eta <= lo_eta]
    todo = np.flatnonzero((eta < hi_eta) & (eta > lo_eta) & (eta != 0))
    while todo.size:
        mid = 0.5 * (lo[todo] + hi[todo])
        above = binary_correlation(pi_j[todo], pi_k[todo], mid) > eta[todo]
        hi[todo] = np.where(above, mid, hi[todo])
        lo[todo] = np.where(above, lo[todo], mid)
        zeta[todo] = 0.5 * (lo[todo] + hi[todo])
        todo = todo[(hi[todo] - lo[todo]) > tol]
    return zeta.reshape(shape), bad.reshape(shape)


def solve_emrich(pi_j: float, pi_k: float, eta_target: float) -> float:
    """Latent normal correlation giving binary correlation ``eta_target``
    between Bernoulli(pi_j) and Bernoulli(pi_k) thresholded at zero."""
    zeta, _ = solve_zeta(pi_j, pi_k, eta_target)
    return float(zeta)
