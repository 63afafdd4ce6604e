"""Clustered right-censored survival data: container, validation and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Base class for dataset validation problems."""


class SchemaError(DataError):
    """A required column is missing from the input file."""


class ParseError(DataError):
    """A data row could not be parsed or failed validation.

    ``row`` is the 1-based data row (the header is not counted).
    """

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    status: int
    cluster: str
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False, init=False)
class SurvivalDataset:
    """Right-censored survival times grouped into clusters.

    Parameters
    ----------
    time : array of shape (N,)
        Follow-up times, strictly positive.
    status : array of shape (N,)
        1 for an observed event, 0 for right-censored.
    cluster : sequence of length N
        Raw cluster labels. Stored as strings; codes are assigned in order of
        first appearance.
    covariates : array of shape (N, p), optional
    covariate_names : sequence of p labels, optional
    record_id : array of shape (N,), optional
        Stable identifiers, kept through :meth:`subset`. Defaults to 0..N-1.
    """

    time: np.ndarray
    status: np.ndarray
    codes: np.ndarray = field(repr=False)
    cluster_labels: tuple[str, ...]
    covariates: np.ndarray = field(repr=False)
    covariate_names: tuple[str, ...]
    record_id: np.ndarray = field(repr=False)

    def __init__(self, time, status, cluster, covariates=None,
                 covariate_names=None, record_id=None):
        time = np.asarray(time, dtype=float).ravel()
        n = time.size
        status_raw = np.asarray(status).ravel()
        if status_raw.size != n:
            raise DataError("status and time have different lengths")
        if not np.all(np.isin(status_raw, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(status_raw, (0, 1)))[0])
            raise ParseError(bad + 1, f"status must be 0 or 1, got {status_raw[bad]!r}")
        bad = np.flatnonzero(~(np.isfinite(time) & (time > 0)))
        if bad.size:
            raise ParseError(int(bad[0]) + 1, f"time must be positive and finite, got {time[bad[0]]!r}")

        labels = [str(c) for c in cluster]
        if len(labels) != n:
            raise DataError("cluster and time have different lengths")
        index: dict[str, int] = {}
        codes = np.empty(n, dtype=np.intp)
        for i, lab in enumerate(labels):
            codes[i] = index.setdefault(lab, len(index))

        if covariates is None:
            covariates = np.empty((n, 0))
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if covariates.shape[0] != n:
            raise DataError("covariate rows do not match the number of records")
        if not np.all(np.isfinite(covariates)):
            row = int(np.flatnonzero(~np.isfinite(covariates).all(axis=1))[0])
            raise ParseError(row + 1, "missing or non-finite covariate value")
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(covariates.shape[1])]
        covariate_names = tuple(str(c) for c in covariate_names)
        if len(covariate_names) != covariates.shape[1]:
            raise DataError("covariate_names length does not match covariate columns")
        if len(set(covariate_names)) != len(covariate_names):
            raise DataError("duplicate covariate names")

        if record_id is None:
            record_id = np.arange(n)
        record_id = np.asarray(record_id, dtype=np.int64).ravel()
        if record_id.size != n:
            raise DataError("record_id has the wrong length")

        if n == 0:
            raise DataError("dataset has no records")
        if not np.any(status_raw == 1):
            raise DataError("dataset has no events (all records censored)")

        for name, value in (("time", time), ("status", status_raw.astype(np.int8)),
                            ("codes", codes), ("covariates", covariates),
                            ("record_id", record_id)):
            value = np.array(value)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "cluster_labels", tuple(index))
        object.__setattr__(self, "covariate_names", covariate_names)

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord],
                     covariate_names: Sequence[str] | None = None) -> SurvivalDataset:
        widths = {len(r.covariates) for r in records}
        if len(widths) > 1:
            raise DataError("records have different numbers of covariates")
        p = widths.pop() if widths else 0
        return cls(
            [r.time for r in records], [r.status for r in records],
            [r.cluster for r in records],
            np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            covariate_names,
        )

    def __len__(self) -> int:
        return self.time.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, SurvivalDataset):
            return NotImplemented
        return (self.covariate_names == other.covariate_names
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.status, other.status)
                and self.clusters == other.clusters
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.record_id, other.record_id))

    __hash__ = None

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def clusters(self) -> list[str]:
        """Raw cluster label of every record."""
        return [self.cluster_labels[c] for c in self.codes]

    @property
    def cluster_index(self) -> dict[str, int]:
        """Raw label -> contiguous 1-based cluster index."""
        return {lab: i + 1 for i, lab in enumerate(self.cluster_labels)}

    @property
    def n_per_cluster(self) -> np.ndarray:
        return np.bincount(self.codes, minlength=self.n_clusters)

    @property
    def censoring_rate(self) -> float:
        return float(np.count_nonzero(self.status == 0)) / len(self)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; have {list(self.covariate_names)}") from None

    def record(self, i: int) -> SurvivalRecord:
        return SurvivalRecord(float(self.time[i]), int(self.status[i]),
                              self.cluster_labels[self.codes[i]],
                              tuple(float(v) for v in self.covariates[i]))

    def records(self) -> list[SurvivalRecord]:
        return [self.record(i) for i in range(len(self))]

    def subset(self, mask) -> SurvivalDataset:
        """Rows selected by a boolean mask or index array; record ids are kept."""
        idx = np.arange(len(self))[mask]
        return SurvivalDataset(self.time[idx], self.status[idx],
                               [self.cluster_labels[c] for c in self.codes[idx]],
                               self.covariates[idx], self.covariate_names,
                               self.record_id[idx])


@dataclass(frozen=True)
class Schema:
    """Maps dataset roles to CSV column names."""

    time: str = "time"
    status: str = "status"
    cluster: str = "cluster"
    covariates: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"time": self.time, "status": self.status, "cluster": self.cluster,
                "covariates": list(self.covariates)}

    @classmethod
    def from_dict(cls, d: Mapping) -> Schema:
        return cls(d["time"], d["status"], d["cluster"], tuple(d.get("covariates", ())))


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(row, f"column {column!r}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(row, f"column {column!r}: non-finite value {text!r}")
    return value


def load_csv(path, schema: Schema | None = None) -> SurvivalDataset:
    """Read a comma-delimited UTF-8 file with a header row.

    When ``schema`` is omitted the standard layout written by :func:`save_csv`
    is assumed: ``time,status,cluster`` followed by every other column as a
    covariate.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if schema is None:
            schema = Schema(covariates=tuple(h for h in header
                                             if h not in ("time", "status", "cluster")))
        wanted = [schema.time, schema.status, schema.cluster, *schema.covariates]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        pos = {c: header.index(c) for c in wanted}

        times, status, clusters, covs = [], [], [], []
        for row, fields in enumerate(reader, start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise ParseError(row, f"expected {len(header)} fields, got {len(fields)}")
            t = _parse_float(fields[pos[schema.time]], row, schema.time)
            if t <= 0:
                raise ParseError(row, f"time must be positive, got {t!r}")
            s = fields[pos[schema.status]].strip()
            if s not in ("0", "1"):
                raise ParseError(row, f"status must be 0 or 1, got {s!r}")
            c = fields[pos[schema.cluster]].strip()
            if not c:
                raise ParseError(row, "missing cluster label")
            times.append(t)
            status.append(int(s))
            clusters.append(c)
            covs.append([_parse_float(fields[pos[name]], row, name) for name in schema.covariates])

    return SurvivalDataset(times, status, clusters,
                           np.array(covs, dtype=float).reshape(len(times), len(schema.covariates)),
                           schema.covariates)


def save_csv(dataset: SurvivalDataset, path) -> None:
    """Write ``time,status,cluster,<covariates...>``; floats keep full precision."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time", "status", "cluster", *dataset.covariate_names])
            labels = dataset.cluster_labels
            for i in range(len(dataset)):
                writer.writerow([repr(float(dataset.time[i])), int(dataset.status[i]),
                                 labels[dataset.codes[i]],
                                 *(repr(float(v)) for v in dataset.covariates[i])])
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


@dataclass(frozen=True)
class DatasetSummary:
    n_records: int
    n_clusters: int
    n_per_cluster: list[int]
    censoring_rate: float
    covariates: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"n_records": self.n_records, "n_clusters": self.n_clusters,
                "n_per_cluster": self.n_per_cluster,
                "censoring_rate": self.censoring_rate, "covariates": self.covariates}


def summarize(dataset: SurvivalDataset) -> DatasetSummary:
    covs = {
        name: {"min": float(col.min()), "max": float(col.max()), "mean": float(col.mean())}
        for name, col in zip(dataset.covariate_names, dataset.covariates.T)
    }
    return DatasetSummary(len(dataset), dataset.n_clusters,
                          dataset.n_per_cluster.tolist(), dataset.censoring_rate, covs)
