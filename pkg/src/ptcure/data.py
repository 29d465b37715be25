"""Clustered right-censored survival data and the promotion time cure link.

A dataset is stored as flat arrays with clusters laid out contiguously, which
keeps the per-cluster estimating-equation work vectorisable.  Observation and
Cluster objects are materialised on demand for callers that want them.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# |beta'x| beyond this makes exp() overflow or underflow to a useless value
MAX_LINEAR_PREDICTOR = 700.0


class LinkOverflowError(ArithmeticError):
    """Raised when a linear predictor leaves the representable range."""


class DataFormatError(ValueError):
    """Malformed clustered CSV input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Family(str, enum.Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("(", "").replace(")", "").replace("-", "")
        aliases = {"ind": "independence", "independent": "independence", "exch": "exchangeable",
                   "ar": "ar1", "ar_1": "ar1"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown correlation family {value!r}") from None


@dataclass(frozen=True)
class Observation:
    time: float
    event: int
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class Cluster:
    id: object
    observations: tuple[Observation, ...]


@dataclass(frozen=True)
class Violation:
    message: str
    cluster: int | None = None
    observation: int | None = None

    def __str__(self) -> str:
        where = []
        if self.cluster is not None:
            where.append(f"cluster {self.cluster}")
        if self.observation is not None:
            where.append(f"observation {self.observation}")
        return f"{', '.join(where)}: {self.message}" if where else self.message


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """K clusters of (time, event, covariates), flattened in cluster order.

    Parameters
    ----------
    time, event : (N,) arrays
    covariates : (N, p_X) array, intercept excluded
    cluster_sizes : (K,) positive integers; cluster i owns the next
        ``cluster_sizes[i]`` rows
    cluster_ids : optional labels, one per cluster
    """

    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    cluster_sizes: np.ndarray
    cluster_ids: tuple = field(default=())

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float).reshape(-1)
        event = np.asarray(self.event).reshape(-1)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(len(time), -1) if len(time) else cov.reshape(0, 0)
        sizes = np.asarray(self.cluster_sizes, dtype=int).reshape(-1)
        if cov.shape[0] != time.shape[0] or event.shape[0] != time.shape[0]:
            raise ValueError("time, event and covariates must have the same number of rows")
        if sizes.sum() != time.shape[0]:
            raise ValueError("cluster sizes must sum to the number of observations")
        ids = tuple(self.cluster_ids) if len(self.cluster_ids) else tuple(range(len(sizes)))
        if len(ids) != len(sizes):
            raise ValueError("one cluster id per cluster is required")
        for arr in (time, event, cov, sizes):
            arr.setflags(write=False)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "cluster_sizes", sizes)
        object.__setattr__(self, "cluster_ids", ids)

    # construction -----------------------------------------------------
    @classmethod
    def from_clusters(cls, clusters: Sequence[Cluster], p_x: int | None = None) -> "ClusteredDataset":
        obs = [o for c in clusters for o in c.observations]
        if p_x is None:
            p_x = len(obs[0].covariates) if obs else 0
        cov = np.full((len(obs), p_x), np.nan)
        for r, o in enumerate(obs):
            # ragged rows are kept as NaN so validate() can report them
            vals = list(o.covariates)[:p_x]
            cov[r, : len(vals)] = vals
        ds = cls(
            time=np.array([o.time for o in obs], dtype=float),
            event=np.array([o.event for o in obs]),
            covariates=cov,
            cluster_sizes=np.array([len(c.observations) for c in clusters], dtype=int),
            cluster_ids=tuple(c.id for c in clusters),
        )
        ragged = [
            (i, j) for i, c in enumerate(clusters) for j, o in enumerate(c.observations)
            if len(o.covariates) != p_x
        ]
        object.__setattr__(ds, "_ragged", tuple(ragged))
        return ds

    @classmethod
    def from_arrays(cls, cluster, time, event, covariates) -> "ClusteredDataset":
        """Group rows by cluster label, keeping first-appearance cluster order
        and file order within each cluster."""
        cluster = list(cluster)
        order: dict = {}
        for pos, lab in enumerate(cluster):
            order.setdefault(lab, []).append(pos)
        idx = np.array([p for rows in order.values() for p in rows], dtype=int)
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(len(cluster), -1)
        return cls(
            time=np.asarray(time, dtype=float)[idx],
            event=np.asarray(event)[idx],
            covariates=cov[idx],
            cluster_sizes=np.array([len(r) for r in order.values()], dtype=int),
            cluster_ids=tuple(order.keys()),
        )

    # shape ------------------------------------------------------------
    @property
    def n_obs(self) -> int:
        return int(self.time.shape[0])

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_sizes.shape[0])

    @property
    def p_x(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def n_params(self) -> int:
        return self.p_x + 1

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.cluster_sizes)])

    @cached_property
    def cluster_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), self.cluster_sizes)

    @cached_property
    def design(self) -> np.ndarray:
        """(N, p_X + 1) design matrix with the intercept column first."""
        X = np.hstack([np.ones((self.n_obs, 1)), self.covariates])
        X.setflags(write=False)
        return X

    @cached_property
    def size_groups(self) -> tuple[tuple[int, np.ndarray, np.ndarray], ...]:
        """Clusters bucketed by size: (n, cluster positions, (K_n, n) row index)."""
        groups = []
        for n in np.unique(self.cluster_sizes):
            pos = np.flatnonzero(self.cluster_sizes == n)
            rows = self.offsets[pos][:, None] + np.arange(n)[None, :]
            groups.append((int(n), pos, rows))
        return tuple(groups)

    @property
    def clusters(self) -> tuple[Cluster, ...]:
        out = []
        for i, cid in enumerate(self.cluster_ids):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            out.append(Cluster(cid, tuple(
                Observation(float(self.time[r]), int(self.event[r]), tuple(map(float, self.covariates[r])))
                for r in range(lo, hi)
            )))
        return tuple(out)

    def subset(self, cluster_positions: Iterable[int]) -> "ClusteredDataset":
        """New dataset made of the given clusters (repeats allowed, as in a
        cluster bootstrap).  Repeated clusters get distinct ids."""
        pos = np.asarray(list(cluster_positions), dtype=int)
        rows = np.concatenate([np.arange(self.offsets[p], self.offsets[p + 1]) for p in pos])
        return ClusteredDataset(
            time=self.time[rows], event=self.event[rows], covariates=self.covariates[rows],
            cluster_sizes=self.cluster_sizes[pos],
            cluster_ids=tuple(range(len(pos))),
        )


# validation ----------------------------------------------------------------

def validate(dataset: ClusteredDataset) -> list[Violation]:
    """Return every invariant violation; an empty list means the data is usable."""
    out: list[Violation] = []
    for i, j in getattr(dataset, "_ragged", ()):
        out.append(Violation(f"covariate vector length differs from p_X={dataset.p_x}", i, j))
    if dataset.n_clusters == 0:
        return [Violation("dataset has no clusters")]
    for i, n in enumerate(dataset.cluster_sizes):
        if n < 1:
            out.append(Violation("cluster is empty", i))
    ci = dataset.cluster_index
    starts = dataset.offsets[ci]
    for r in range(dataset.n_obs):
        t, d = dataset.time[r], dataset.event[r]
        i, j = int(ci[r]), int(r - starts[r])
        if not np.isfinite(t) or t < 0:
            out.append(Violation(f"time {t!r} is not a finite nonnegative number", i, j))
        if d not in (0, 1):
            out.append(Violation("event not binary", i, j))
        if not np.all(np.isfinite(dataset.covariates[r])):
            out.append(Violation("covariates are not all finite", i, j))
    if not np.any(dataset.event == 1):
        out.append(Violation("no uncensored observation; baseline CDF is undefined"))
    X = dataset.design
    if np.all(np.isfinite(X)) and np.linalg.matrix_rank(X) < X.shape[1]:
        out.append(Violation(f"design matrix with intercept is rank deficient (< {X.shape[1]})"))
    return out


def check_valid(dataset: ClusteredDataset) -> None:
    problems = validate(dataset)
    if problems:
        head = "; ".join(str(p) for p in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise ValueError(f"invalid dataset: {head}{more}")


# link ----------------------------------------------------------------------

def design_row(obs: Observation) -> np.ndarray:
    return np.concatenate([[1.0], np.asarray(obs.covariates, dtype=float)])


def linear_predictor(beta, X) -> np.ndarray:
    """beta'X for a design row or matrix, refusing values exp() cannot carry."""
    eta = np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float)
    if np.any(~np.isfinite(eta)) or np.any(np.abs(eta) > MAX_LINEAR_PREDICTOR):
        raise LinkOverflowError("linear predictor outside [-700, 700]; exp(beta'x) would overflow")
    return eta


def mu(beta, obs: Observation) -> float:
    """exp(beta'X) for one observation."""
    beta = np.asarray(beta, dtype=float)
    x = design_row(obs)
    if beta.shape != x.shape:
        raise ValueError(f"beta has length {beta.size}, expected {x.size}")
    return float(np.exp(linear_predictor(beta, x)))


def cure_probability(beta, obs: Observation) -> float:
    return float(np.exp(-mu(beta, obs)))


# CSV -----------------------------------------------------------------------

def read_csv(source) -> ClusteredDataset:
    """Parse ``cluster,time,event,x1,...,xp``.  Rows are grouped by the cluster
    column; within a cluster, file order is kept."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _parse_csv(fh)
    return _parse_csv(source)


def _parse_csv(fh) -> ClusteredDataset:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataFormatError("empty file", 1) from None
    if header[:3] != ["cluster", "time", "event"]:
        raise DataFormatError("header must start with cluster,time,event", 1)
    p = len(header) - 3
    labels, times, events, covs = [], [], [], []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", line_no)
        try:
            t = float(row[1])
            cov = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise DataFormatError(f"non-numeric value ({exc})", line_no) from None
        ev = row[2].strip()
        if ev not in ("0", "1"):
            raise DataFormatError(f"event must be 0 or 1, got {ev!r}", line_no)
        if not np.isfinite(t) or t < 0:
            raise DataFormatError(f"time must be finite and nonnegative, got {row[1]!r}", line_no)
        labels.append(row[0].strip())
        times.append(t)
        events.append(int(ev))
        covs.append(cov)
    if not labels:
        raise DataFormatError("no data rows")
    return ClusteredDataset.from_arrays(labels, times, events, np.array(covs, dtype=float).reshape(len(labels), p))


def write_csv(dataset: ClusteredDataset, dest) -> None:
    header = ["cluster", "time", "event"] + [f"x{k + 1}" for k in range(dataset.p_x)]
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        ci = dataset.cluster_index
        for r in range(dataset.n_obs):
            w.writerow([dataset.cluster_ids[ci[r]], repr(float(dataset.time[r])), int(dataset.event[r]),
                        *(repr(float(v)) for v in dataset.covariates[r])])
    finally:
        if own:
            fh.close()
