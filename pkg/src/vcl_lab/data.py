"""Dataset ingestion, synthetic generators, standardisation and splits."""

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .gmm import Gmm2


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_names: Optional[List[str]] = None
    class_names: Optional[List[str]] = None
    dropped_rows: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features must be rows x d and match the label count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("labels out of range")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")

    def __len__(self):
        return self.labels.size

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx], dropped_rows=[])

    def canonical(self) -> "Dataset":
        """Relabel classes in order of first appearance (the order :func:`load_csv` produces)."""
        _, first = np.unique(self.labels, return_index=True)
        order = self.labels[np.sort(first)]
        remap = np.full(self.class_count, -1)
        remap[order] = np.arange(order.size)
        names = None
        if self.class_names is not None:
            names = [self.class_names[c] for c in order]
        return replace(self, labels=remap[self.labels], class_count=int(order.size), class_names=names)


def _resolve_label_column(label_column, header_row, width):
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header_row is None:
            raise DataError("label column given by name but the file has no header")
        try:
            return header_row.index(label_column)
        except ValueError:
            raise DataError(f"label column {label_column!r} not in header {header_row}") from None
    idx = int(label_column)
    if idx < 0:
        idx += width
    if not 0 <= idx < width:
        raise DataError(f"label column index {label_column} out of range for {width} columns")
    return idx


def load_csv(path, label_column=-1, header: bool = True, delimiter: str = ",") -> Dataset:
    """Read a numeric CSV with one label column.

    Labels become dense indices in order of first appearance.  Rows with a
    missing or unparseable feature, or the wrong field count, are dropped
    and reported (0-based data-row indices) through a warning and
    ``Dataset.dropped_rows``.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    header_row = None
    if header:
        if not rows:
            raise DataError(f"{path}: empty file")
        header_row = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(header_row) if header_row else len(rows[0])
    li = _resolve_label_column(label_column, header_row, width)

    feats, raw_labels, dropped = [], [], []
    for i, row in enumerate(rows):
        if len(row) != width:
            dropped.append(i)
            continue
        label = row[li].strip()
        try:
            vals = [float(c) for j, c in enumerate(row) if j != li]
        except ValueError:
            dropped.append(i)
            continue
        if not label or not all(math.isfinite(v) for v in vals):
            dropped.append(i)
            continue
        feats.append(vals)
        raw_labels.append(label)
    if not feats:
        raise DataError(f"{path}: zero usable rows (malformed: {dropped})")
    if dropped:
        warnings.warn(f"{path}: dropped {len(dropped)} malformed row(s): {dropped}", stacklevel=2)

    names: List[str] = []
    index = {}
    labels = []
    for lab in raw_labels:
        if lab not in index:
            index[lab] = len(names)
            names.append(lab)
        labels.append(index[lab])
    fnames = [c for j, c in enumerate(header_row) if j != li] if header_row else None
    return Dataset(np.array(feats), np.array(labels), len(names), fnames, names, dropped)


def save_csv(ds: Dataset, path, delimiter: str = ",") -> None:
    """Write features then a trailing ``label`` column; floats use ``repr`` so they round-trip."""
    names = ds.feature_names or [f"x{j}" for j in range(ds.dim)]
    cls = ds.class_names or [str(c) for c in range(ds.class_count)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(list(names) + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [cls[y]])


def fit_standardizer(train: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    if len(train) == 0:
        raise DataError("cannot fit statistics on an empty split")
    return train.features.mean(axis=0), train.features.std(axis=0)


def standardize(ds: Dataset, stats=None):
    """Centre and scale features with ``stats`` (defaults to ``ds``'s own statistics).

    Zero-spread features are only centred.
    """
    mean, std = fit_standardizer(ds) if stats is None else stats
    safe = np.where(std > 0, std, 1.0)
    return replace(ds, features=(ds.features - mean) / safe), (mean, std)


def split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed=0):
    """Seeded stratified split into (train, val, test)."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or sum(fr) > 1.0 + 1e-12 or fr[0] <= 0:
        raise DataError("fractions must be three non-negative values with a positive train share, summing to <= 1")
    exhaustive = abs(sum(fr) - 1.0) < 1e-12
    active = sum(f > 0 for f in fr)
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        m = idx.size
        if 0 < m < active:
            warnings.warn(f"class {c} has {m} row(s) for {active} splits; best-effort assignment", stacklevel=2)
        k_val = int(round(m * fr[1]))
        k_test = int(round(m * fr[2]))
        k_train = m - k_val - k_test if exhaustive else int(round(m * fr[0]))
        if k_train < 0:
            k_val, k_train = k_val + k_train, 0
        bounds = np.cumsum([k_train, k_val, k_test])
        parts[0].append(idx[:bounds[0]])
        parts[1].append(idx[bounds[0]:bounds[1]])
        parts[2].append(idx[bounds[1]:bounds[2]])
    return tuple(ds.subset(np.sort(np.concatenate(p)) if p else np.array([], dtype=int)) for p in parts)


def make_gmm2_dataset(g: Gmm2, count: int, seed=0) -> Dataset:
    """Sample ``count`` points; label 0 marks the first component (prior ``p``)."""
    try:
        chol = [np.linalg.cholesky(g.sigma1), np.linalg.cholesky(g.sigma2)]
    except np.linalg.LinAlgError as exc:
        raise DataError("covariance is not positive definite (Cholesky failed)") from exc
    rng = np.random.default_rng(seed)
    second = rng.random(count) >= g.p
    z = rng.standard_normal((count, g.dim))
    x = np.empty((count, g.dim))
    for k, (mu, L) in enumerate(zip((g.mu1, g.mu2), chol)):
        m = second == bool(k)
        x[m] = mu + z[m] @ L.T
    return Dataset(x, second.astype(np.int64), 2, [f"x{j}" for j in range(g.dim)])


def make_blobs(count: int = 4000, classes: int = 4, separation: float = 2.5, std: float = 1.0, seed=0) -> Dataset:
    """Isotropic 2-D Gaussian blobs with centres spread evenly on a circle."""
    rng = np.random.default_rng(seed)
    radius = separation * np.sqrt(2.0)
    ang = 2 * np.pi * (np.arange(classes) + 0.5) / classes
    centres = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    labels = rng.integers(0, classes, count)
    x = centres[labels] + std * rng.standard_normal((count, 2))
    return Dataset(x, labels, classes, ["x0", "x1"])
