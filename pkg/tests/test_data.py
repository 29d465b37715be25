import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptcure.data import (
    Cluster, ClusteredDataset, DataFormatError, LinkOverflowError, Observation,
    cure_probability, design_row, mu, read_csv, validate, write_csv,
)


def gauss_rank(A, tol=1e-10):
    """Rank by plain Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=float)
    rows, cols = A.shape
    r = 0
    for c in range(cols):
        piv = r + np.argmax(np.abs(A[r:, c])) if r < rows else None
        if piv is None or abs(A[piv, c]) < tol:
            continue
        A[[r, piv]] = A[[piv, r]]
        A[r + 1:] -= np.outer(A[r + 1:, c] / A[r, c], A[r])
        r += 1
        if r == rows:
            break
    return r


def one_obs(t=1.0, d=1, x=(0.5,)):
    return ClusteredDataset.from_clusters([Cluster("a", (Observation(t, d, x),))])


def test_minimal_dataset_without_covariates_is_valid():
    assert validate(one_obs(x=())) == []


def test_single_row_with_covariate_is_rank_deficient():
    ds = one_obs()
    assert gauss_rank(ds.design) == 1
    assert [v.message for v in validate(ds) if "rank" in v.message]


def test_event_two_is_single_violation():
    rep = validate(one_obs(d=2))
    msgs = [v.message for v in rep if "binary" in v.message]
    assert len(msgs) == 1 and msgs[0] == "event not binary"


def test_rank_constant_zero_vs_constant_one():
    sizes = [3]
    base = dict(time=[1.0, 2.0, 3.0], event=[1, 0, 1], cluster_sizes=sizes)
    zero = ClusteredDataset(covariates=np.zeros((3, 1)), **base)
    ones = ClusteredDataset(covariates=np.ones((3, 1)), **base)
    # both columns collapse onto or vanish next to the intercept
    for ds in (zero, ones):
        assert gauss_rank(ds.design) == 1
        assert any("rank" in v.message for v in validate(ds))
    varied = ClusteredDataset(covariates=[[0.0], [0.0], [1.0]], **base)
    assert gauss_rank(varied.design) == 2 and validate(varied) == []


def test_rank_violation_for_duplicate_intercept():
    ds = ClusteredDataset(time=[1.0, 2.0, 3.0], event=[1, 0, 1],
                          covariates=np.column_stack([np.ones(3), [0.1, 0.2, 0.4]]),
                          cluster_sizes=[3])
    assert gauss_rank(ds.design) == 2
    assert any("rank" in v.message for v in validate(ds))


def test_rank_oracle_matches_on_random_designs(rng):
    for _ in range(20):
        X = rng.normal(size=(6, 3))
        if rng.random() < 0.5:
            X[:, 2] = X[:, 0] * 2 - X[:, 1]
        ds = ClusteredDataset(time=np.arange(1, 7.0), event=np.ones(6, int), covariates=X, cluster_sizes=[2, 4])
        deficient = any("rank" in v.message for v in validate(ds))
        assert deficient == (gauss_rank(ds.design) < 4)


def test_no_events_is_violation():
    ds = ClusteredDataset(time=[1.0, 2.0], event=[0, 0], covariates=[[0.0], [1.0]], cluster_sizes=[2])
    assert any("uncensored" in v.message for v in validate(ds))


def test_negative_time_reports_coordinates():
    ds = ClusteredDataset(time=[1.0, -2.0, 3.0], event=[1, 1, 0],
                          covariates=[[0.0], [1.0], [2.0]], cluster_sizes=[1, 2])
    (v,) = [v for v in validate(ds) if "time" in v.message]
    assert (v.cluster, v.observation) == (1, 0)


@pytest.mark.parametrize("cov, expected", [((), [1.0]), ((2.0, -1.0), [1.0, 2.0, -1.0]), ((0.3,), [1.0, 0.3])])
def test_design_row(cov, expected):
    np.testing.assert_array_equal(design_row(Observation(1.0, 1, cov)), expected)


def test_mu_examples():
    assert mu([0.0, 0.0, 0.0], Observation(1.0, 1, (0.3, 2.0))) == 1.0
    assert mu([-0.5, 1, 1], Observation(1.0, 1, (0.0, 0.0))) == pytest.approx(0.60653, abs=1e-5)
    assert mu([1.0], Observation(1.0, 1, ())) == pytest.approx(np.e, rel=1e-12)


def test_mu_overflow_is_reported():
    with pytest.raises(LinkOverflowError):
        mu([800.0], Observation(1.0, 1, ()))


def test_cure_probability_examples():
    assert cure_probability([0.0], Observation(1.0, 1, ())) == pytest.approx(np.exp(-1), abs=1e-12)
    assert cure_probability([-2.336, 0.0], Observation(1.0, 1, (0.0,))) == pytest.approx(0.9078, abs=5e-5)


def test_cure_probability_strictly_decreasing():
    grid = np.linspace(-5, 3, 100)
    p = [cure_probability([b], Observation(1.0, 1, ())) for b in grid]
    assert np.all(np.diff(p) < 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.data())
def test_survival_at_full_baseline_is_cure_probability(beta, data):
    x = data.draw(st.lists(st.floats(-2, 2), min_size=len(beta) - 1, max_size=len(beta) - 1))
    obs = Observation(1.0, 1, tuple(x))
    m = mu(beta, obs)
    assert len(design_row(obs)) == len(beta)
    assert np.exp(-m * 1.0) == pytest.approx(cure_probability(beta, obs), abs=1e-12)


def test_csv_round_trip(tmp_path, rng):
    from conftest import random_dataset
    ds = random_dataset(rng, K=6, n_max=3)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.time, ds.time)
    np.testing.assert_array_equal(back.event, ds.event)
    np.testing.assert_array_equal(back.covariates, ds.covariates)
    np.testing.assert_array_equal(back.cluster_sizes, ds.cluster_sizes)


def test_csv_keeps_file_order_within_cluster():
    text = "cluster,time,event,x1\nb,3,1,0.1\na,1,0,0.2\nb,2,1,0.3\n"
    ds = read_csv(io.StringIO(text))
    assert list(ds.cluster_ids) == ["b", "a"]
    np.testing.assert_array_equal(ds.time, [3.0, 2.0, 1.0])


@pytest.mark.parametrize("text, line", [
    ("cluster,time,event,x1\na,1,1,0.5\na,x,1,0.5\n", 3),
    ("cluster,time,event,x1\na,1,1\n", 2),
    ("cluster,time,evt,x1\na,1,1,0\n", 1),
])
def test_csv_errors_carry_line_numbers(text, line):
    with pytest.raises(DataFormatError) as exc:
        read_csv(io.StringIO(text))
    assert exc.value.line == line


def test_subset_repeats_clusters(rng):
    from conftest import random_dataset
    ds = random_dataset(rng, K=4)
    sub = ds.subset([1, 1, 3])
    n1, n3 = ds.cluster_sizes[1], ds.cluster_sizes[3]
    assert sub.n_obs == 2 * n1 + n3
    o = ds.offsets
    np.testing.assert_array_equal(sub.time[:n1], ds.time[o[1]:o[1] + n1])
