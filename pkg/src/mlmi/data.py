"""Two-level dataset container, missingness-pattern summaries and CSV I/O.

A :class:`Dataset` is a rectangular block of optionally missing values with
a cluster label per row and a declared type (continuous or binary) per
column. Missing cells are NaN in ``values`` and False in ``mask``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "PatternSummary",
    "ImputedSet",
    "load_dataset",
    "write_dataset",
    "write_imputed",
    "missingness_pattern",
]

CONTINUOUS = "continuous"
BINARY = "binary"

# 17 significant digits: lossless text round-trip for IEEE doubles.
_FLOAT_FMT = "%.17g"


class DataError(ValueError):
    """Malformed input data (bad arity, bad binary value, unknown column)."""


@dataclass(frozen=True)
class Dataset:
    """Immutable two-level dataset.

    values: (n, p) float array, NaN where missing.
    mask: (n, p) bool array, True where observed.
    cluster: (n,) int array of dense 0-based cluster indices.
    var_types: per-column 'continuous' or 'binary'.
    names: per-column identifiers.
    cluster_labels: original labels, index k holds the label of cluster k.
    """

    values: np.ndarray
    mask: np.ndarray
    cluster: np.ndarray
    var_types: tuple[str, ...]
    names: tuple[str, ...]
    cluster_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        cluster = np.asarray(self.cluster, dtype=int)
        if values.shape != mask.shape:
            raise DataError("values and mask shapes differ")
        if values.shape[0] != cluster.shape[0]:
            raise DataError("cluster length does not match row count")
        if values.shape[1] != len(self.var_types) or values.shape[1] != len(self.names):
            raise DataError("var_types/names length does not match column count")
        if np.isnan(values[mask]).any():
            raise DataError("observed cells must carry values")
        if not np.isnan(values[~mask]).all():
            raise DataError("missing cells must be NaN")
        labels = self.cluster_labels or tuple(str(k + 1) for k in range(cluster.max() + 1 if cluster.size else 0))
        n_clusters = len(labels)
        if cluster.size and (cluster.min() < 0 or cluster.max() >= n_clusters):
            raise DataError("cluster indices out of range")
        if cluster.size and len(np.unique(cluster)) != n_clusters:
            raise DataError("every cluster label must appear at least once")
        for j, t in enumerate(self.var_types):
            if t not in (CONTINUOUS, BINARY):
                raise DataError(f"unknown variable type {t!r}")
            if t == BINARY:
                obs = values[mask[:, j], j]
                if not np.isin(obs, (0.0, 1.0)).all():
                    raise DataError(f"binary column {self.names[j]!r} contains non-{{0,1}} values")
        values.setflags(write=False)
        mask.setflags(write=False)
        cluster.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "var_types", tuple(self.var_types))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cluster_labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown column {name!r}") from None

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def with_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "Dataset":
        """Copy with new values (and optionally a new mask)."""
        return Dataset(
            np.array(values, dtype=float),
            np.array(self.mask if mask is None else mask, dtype=bool),
            self.cluster.copy(),
            self.var_types,
            self.names,
            self.cluster_labels,
        )

    def completed(self, values: np.ndarray) -> "Dataset":
        """Complete copy carrying imputed values for the missing cells."""
        out = np.asarray(values, dtype=float).copy()
        if np.isnan(out).any():
            raise DataError("completed dataset may not contain NaN")
        if not np.array_equal(out[self.mask], self.values[self.mask]):
            raise DataError("completion must not modify observed cells")
        return Dataset(out, np.ones_like(self.mask), self.cluster.copy(),
                       self.var_types, self.names, self.cluster_labels)


@dataclass(frozen=True)
class PatternSummary:
    """Per (cluster, variable) observation fraction and pattern class."""

    observed_fraction: np.ndarray  # (K, p) in [0, 1]
    classification: np.ndarray      # (K, p) of {'complete','sporadic','systematic'}


@dataclass(frozen=True)
class ImputedSet:
    """M completed copies of a dataset sharing all observed entries."""

    source: Dataset
    datasets: tuple[Dataset, ...]

    def __post_init__(self):
        if not self.datasets:
            raise DataError("ImputedSet must contain at least one completed dataset")
        object.__setattr__(self, "datasets", tuple(self.datasets))

    @property
    def m(self) -> int:
        return len(self.datasets)


def missingness_pattern(d: Dataset) -> PatternSummary:
    """Classify each (cluster, variable) cell block.

    systematic: no observations in a non-empty cluster; complete: all
    observed; sporadic: anything in between.
    """
    K, p = d.n_clusters, d.p
    counts = np.zeros((K, p))
    sizes = d.cluster_sizes().astype(float)
    for k in range(K):
        counts[k] = d.mask[d.cluster == k].sum(axis=0)
    frac = counts / sizes[:, None]
    classification = np.where(frac == 0.0, "systematic",
                              np.where(frac == 1.0, "complete", "sporadic"))
    return PatternSummary(frac, classification.astype(object))


def load_dataset(path, schema: dict[str, str], cluster_column: str,
                 missing_token: str = "NA") -> Dataset:
    """Load a delimiter-separated file with a header row.

    schema maps variable names to 'continuous' or 'binary'; columns absent
    from the schema (other than the cluster column) are ignored. Empty
    cells are treated as missing alongside the missing token.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if cluster_column not in header:
            raise DataError(f"{path}: cluster column {cluster_column!r} not in header")
        for name in schema:
            if name not in header:
                raise DataError(f"{path}: schema column {name!r} not in header")
        names = [h for h in header if h in schema]
        col_idx = [header.index(n) for n in names]
        clu_idx = header.index(cluster_column)
        rows, clusters = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for n, i in zip(names, col_idx):
                cell = row[i].strip()
                if cell == missing_token or cell == "":
                    vals.append(np.nan)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {n!r}") from None
            rows.append(vals)
            clusters.append(row[clu_idx].strip())
    values = np.array(rows, dtype=float) if rows else np.empty((0, len(names)))
    mask = ~np.isnan(values)
    # dense indices in first-appearance order: deterministic reindexing
    labels: list[str] = []
    index = {}
    dense = np.empty(len(clusters), dtype=int)
    for i, lab in enumerate(clusters):
        if lab not in index:
            index[lab] = len(labels)
            labels.append(lab)
        dense[i] = index[lab]
    var_types = tuple(schema[n] for n in names)
    return Dataset(values, mask, dense, var_types, tuple(names), tuple(labels))


def write_dataset(d: Dataset, path, cluster_column: str = "cluster",
                  missing_token: str = "NA") -> None:
    """Emit a dataset as CSV with 17-significant-digit numeric text."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([cluster_column, *d.names])
        for i in range(d.n):
            row = [d.cluster_labels[d.cluster[i]]]
            for j in range(d.p):
                row.append(_FLOAT_FMT % d.values[i, j] if d.mask[i, j] else missing_token)
            writer.writerow(row)


def write_imputed(imputed: ImputedSet, out_dir, cluster_column: str = "cluster") -> list[str]:
    """Write the M completed datasets as imputed_###.csv; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for m, d in enumerate(imputed.datasets, start=1):
        path = os.path.join(out_dir, f"imputed_{m:03d}.csv")
        write_dataset(d, path, cluster_column=cluster_column)
        paths.append(path)
    return paths
