import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptcure.baseline import (
    BaselineError, StepCdf, default_tau, estimate_baseline, risk_weight,
    solve_lambda, solve_lambda_from_risk,
)
from ptcure.data import ClusteredDataset

from conftest import random_dataset


def ds_of(times, events, x=None, sizes=None):
    times = np.asarray(times, float)
    x = np.zeros((len(times), 0)) if x is None else np.asarray(x, float).reshape(len(times), -1)
    return ClusteredDataset(time=times, event=events, covariates=x,
                            cluster_sizes=sizes if sizes is not None else [len(times)])


def brute_risk(beta, ds, u, tau):
    """Literal double sum over clusters and their members."""
    total = 0.0
    for i, c in enumerate(ds.clusters):
        for o in c.observations:
            m = np.exp(beta[0] + np.dot(beta[1:], o.covariates))
            total += m * ((u <= o.time <= tau) + (o.time > tau))
    return total / ds.n_obs


def bisect_lambda(R, n, lo=-1e3):
    """Independent oracle: plain bisection on the multiplier equation."""
    hi = R.min() - 1e-15
    f = lambda lam: np.sum(1 / (R - lam)) / n - 1
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if f(mid) < 0 else (lo, mid)
    return 0.5 * (lo + hi)


# risk weight ------------------------------------------------------------------

def test_risk_weight_examples():
    assert risk_weight([0.0], ds_of([1.0], [1]), 0.5, tau=1.0) == pytest.approx(1.0)
    assert risk_weight([0.0], ds_of([1.0, 2.0], [1, 1]), 1.5, tau=2.0) == pytest.approx(0.5)
    assert risk_weight([0.0], ds_of([1.0, 2.0], [1, 1]), 2.5, tau=2.0) == 0.0


def test_risk_weight_matches_double_sum(rng):
    ds = random_dataset(rng, K=6, p_x=2)
    beta = np.array([0.2, -0.4, 0.3])
    tau = default_tau(ds)
    for u in np.linspace(0, tau, 7):
        assert risk_weight(beta, ds, u, tau) == pytest.approx(brute_risk(beta, ds, u, tau), rel=1e-12)


def test_risk_weight_nonincreasing(rng):
    ds = random_dataset(rng, K=8)
    tau = default_tau(ds)
    r = [risk_weight([0.1, 0.2, -0.3], ds, u, tau) for u in np.linspace(0, tau, 50)]
    assert np.all(np.diff(r) <= 1e-15)


def test_tau_below_largest_event_rejected():
    ds = ds_of([1.0, 2.0], [1, 1])
    with pytest.raises(ValueError):
        estimate_baseline([0.0], ds, tau=1.5)


# lambda -----------------------------------------------------------------------

def test_lambda_single_observation_is_zero():
    assert solve_lambda([0.0], ds_of([1.0], [1]), tau=1.0) == pytest.approx(0.0, abs=1e-14)


def test_lambda_two_point_correct_root():
    # 1/2 [1/(1-l) + 1/(0.5-l)] = 1  <=>  4 l^2 + 2 l - 1 = 0, admissible root below 0.5
    lam = solve_lambda([0.0], ds_of([1.0, 2.0], [1, 1]), tau=2.0)
    assert lam == pytest.approx((1 - np.sqrt(5)) / 4, abs=1e-12)
    assert lam == pytest.approx(bisect_lambda(np.array([1.0, 0.5]), 2), abs=1e-12)
    # the other candidate value does not solve the equation
    alt = (3 - np.sqrt(17)) / 4
    assert abs(0.5 * (1 / (1 - alt) + 1 / (0.5 - alt)) - 1) > 0.01


def test_lambda_under_intercept_shift_matches_recomputation(rng):
    ds = random_dataset(rng, K=6, p_x=1)
    beta = np.array([0.1, 0.5])
    c = 0.7
    ev = ds.event == 1
    tau = default_tau(ds)
    R = np.array([risk_weight(beta, ds, t, tau) for t in ds.time[ev]])
    lam_shift = solve_lambda(beta + np.array([c, 0.0]), ds, tau)
    assert lam_shift == pytest.approx(bisect_lambda(np.exp(c) * R, ds.n_obs), abs=1e-10)


def test_lambda_against_bisection_oracle(rng):
    for _ in range(10):
        ds = random_dataset(rng, K=7)
        beta = rng.normal(scale=0.5, size=3)
        tau = default_tau(ds)
        ev = ds.event == 1
        R = np.array([risk_weight(beta, ds, t, tau) for t in ds.time[ev]])
        assert solve_lambda(beta, ds, tau) == pytest.approx(bisect_lambda(R, ds.n_obs), abs=1e-10)


def test_lambda_unbracketable_raises():
    with pytest.raises(BaselineError):
        solve_lambda_from_risk(np.array([np.nan, 1.0]), 2)


# StepCdf / estimate_baseline --------------------------------------------------------

def test_single_uncensored_gives_unit_jump():
    F = estimate_baseline([0.0], ds_of([2.5], [1]))
    np.testing.assert_array_equal(F.jump_times, [2.5])
    assert F.jump_masses[0] == pytest.approx(1.0, abs=1e-14)


def test_two_point_masses():
    F = estimate_baseline([0.0], ds_of([1.0, 2.0], [1, 1]), tau=2.0)
    lam = (1 - np.sqrt(5)) / 4
    np.testing.assert_allclose(F.jump_masses, [0.5 / (1 - lam), 0.5 / (0.5 - lam)], atol=1e-12)
    np.testing.assert_allclose(F.jump_masses, [0.381966, 0.618034], atol=1e-6)


def test_masses_follow_formula_with_censored_beyond_tau():
    ds = ds_of([1.0, 2.0, 3.0], [1, 1, 0], x=[0.0, 1.0, 0.4])
    beta = [0.2, -0.3]
    F = estimate_baseline(beta, ds, tau=2.0)
    R = np.array([brute_risk(beta, ds, t, 2.0) for t in (1.0, 2.0)])
    lam = bisect_lambda(R, 3)
    np.testing.assert_allclose(F.jump_masses, (1 / 3) / (R - lam), atol=1e-10)
    # R changes, but a subject at risk at every jump shifts each risk sum by
    # the same amount, which the multiplier absorbs: the masses do not move
    small = ds_of([1.0, 2.0], [1, 1], x=[0.0, 1.0])
    R2 = np.array([brute_risk(beta, small, t, 2.0) for t in (1.0, 2.0)])
    assert not np.allclose(R, R2)
    np.testing.assert_allclose(F.jump_masses, estimate_baseline(beta, small, tau=2.0).jump_masses, atol=1e-12)


def test_late_event_changes_masses():
    a = estimate_baseline([0.0], ds_of([1.0, 2.0, 3.0], [1, 1, 0]))
    b = estimate_baseline([0.0], ds_of([1.0, 2.0, 3.0], [1, 1, 1]))
    assert not np.allclose(a(2.0), b(2.0))


def test_tau_beyond_largest_event_is_inert():
    ds = ds_of([1.0, 2.0, 3.0, 0.5], [1, 1, 0, 0])
    a = estimate_baseline([0.0], ds, tau=2.0).jump_masses
    b = estimate_baseline([0.0], ds, tau=2.9).jump_masses
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_tied_event_times_are_merged():
    ds = ds_of([1.0, 1.0, 2.0], [1, 1, 1])
    F = estimate_baseline([0.0], ds)
    assert F.jump_times.size == 2
    assert F.total_mass == pytest.approx(1.0, abs=1e-12)


def npmle_oracle(beta, ds):
    """Maximise sum_events log f_k - sum_ij mu_ij F(T_ij) over the simplex."""
    from scipy.optimize import minimize
    mu = np.exp(ds.design @ np.asarray(beta, float))
    jt = np.unique(ds.time[ds.event == 1])
    ev_idx = np.searchsorted(jt, ds.time[ds.event == 1])
    at = (jt[None, :] <= ds.time[:, None]).astype(float)       # I(t_k <= T_i)

    def nll(z):
        f = np.exp(z - z.max())
        f /= f.sum()
        return -(np.log(f[ev_idx]).sum() - mu @ (at @ f))

    z = minimize(nll, np.zeros(jt.size), method="BFGS", options={"gtol": 1e-12}).x
    f = np.exp(z - z.max())
    return jt, f / f.sum()


def test_no_censoring_is_constrained_npmle_not_ecdf(rng):
    t = np.sort(rng.exponential(size=12))
    ds = ds_of(rng.permutation(t), np.ones(12, int), sizes=[5, 7])
    F = estimate_baseline([0.0], ds)
    jt, f = npmle_oracle([0.0], ds)
    np.testing.assert_allclose(F.jump_times, jt)
    np.testing.assert_allclose(F.jump_masses, f, atol=1e-6)
    # the cure model pulls mass towards late times relative to the ECDF
    assert F(t[5]) < 6 / 12


def test_npmle_oracle_with_covariates_and_censoring(rng):
    ds = random_dataset(rng, K=5, p_x=1)
    beta = np.array([-0.2, 0.4])
    F = estimate_baseline(beta, ds)
    _, f = npmle_oracle(beta, ds)
    np.testing.assert_allclose(F.jump_masses, f, atol=1e-6)


def test_stepcdf_evaluation_semantics():
    F = StepCdf([1.0, 2.0], [0.25, 0.75])
    assert F(0.5) == 0.0
    assert F(1.0) == 0.25          # right-continuous
    assert F(1.999) == 0.25
    assert F(2.0) == 1.0
    assert F(10.0) == 1.0
    with pytest.raises(ValueError):
        StepCdf([2.0, 1.0], [0.5, 0.5])


def test_stepcdf_csv(tmp_path):
    F = StepCdf([1.0, 2.0], [0.25, 0.75])
    F.to_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "time,mass,cdf" and lines[-1].endswith(",1.0")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 8), scale=st.floats(0.0, 1.5))
def test_total_mass_is_one_and_monotone(seed, K, scale):
    r = np.random.default_rng(seed)
    ds = random_dataset(r, K=K)
    beta = r.normal(scale=scale, size=3)
    F = estimate_baseline(beta, ds)
    assert abs(F.total_mass - 1) < 1e-10
    assert np.all(F.jump_masses > 0)
    assert set(F.jump_times) <= set(ds.time[ds.event == 1])
