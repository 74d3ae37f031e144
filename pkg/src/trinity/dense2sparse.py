"""Dense-to-sparse transform: standardise counts, then equal-frequency bins.

Statistics are population statistics fitted once on training rows and then
frozen, i.e. batch normalisation in inference mode. Binning needs stable
boundaries, so per-minibatch statistics are never used.

Bucket ids per feature:

* with ``reserve_zero`` set, a raw count of exactly 0 maps to bucket 0 and
  everything else to ``1 + k``, where ``k`` is the bin among the boundaries
  fitted on the non-zero training values;
* otherwise the id is simply ``k``.

``k`` is the number of boundaries strictly below the value, so a value equal
to a boundary falls in the lower bucket, and values outside the fitted range
clamp to the first/last bucket.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_BUCKETS = 16
DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = DEFAULT_EPS

    def transform(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.mean.shape[0]:
            raise ContractError(f"expected {self.mean.shape[0]} features, got {x.shape[-1]}")
        return (x - self.mean) / (self.std + self.epsilon)


@dataclass(frozen=True)
class BinBoundaries:
    """Per-feature strictly increasing boundaries plus the zero-bucket flag."""

    boundaries: tuple          # tuple of 1-D float arrays, one per feature
    n_buckets: int             # B: table rows per feature
    reserve_zero: bool = True

    @property
    def n_features(self):
        return len(self.boundaries)

    def padded(self):
        """(n_features, B) array padded with NaN, plus lengths, for serialisation."""
        out = np.full((self.n_features, self.n_buckets), np.nan)
        lens = np.zeros(self.n_features, dtype=np.int64)
        for j, b in enumerate(self.boundaries):
            out[j, :len(b)] = b
            lens[j] = len(b)
        return out, lens

    @classmethod
    def from_padded(cls, padded, lengths, n_buckets, reserve_zero):
        bounds = tuple(np.array(padded[j, :int(n)], dtype=float) for j, n in enumerate(lengths))
        return cls(bounds, int(n_buckets), bool(reserve_zero))


def fit_normalizer(train_matrix, epsilon=DEFAULT_EPS) -> NormStats:
    x = np.asarray(train_matrix)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("fit_normalizer needs a non-empty 2-D matrix")
    # one float64 column at a time keeps peak memory at one column copy
    mean = np.empty(x.shape[1])
    std = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        col = x[:, j].astype(float)
        mean[j], std[j] = col.mean(), col.std()
    return NormStats(mean=mean, std=std, epsilon=float(epsilon))


def fit_bins(normalized_column, n_buckets: int) -> np.ndarray:
    """Boundaries at the k/B quantiles (k = 1..B-1), duplicates collapsed.

    Quantiles use the inverted-CDF definition, so on distinct values every
    bucket holds within one row of n/B.
    """
    col = np.asarray(normalized_column, dtype=float).ravel()
    if col.size == 0:
        raise ContractError("fit_bins needs a non-empty column")
    if n_buckets < 1:
        raise ContractError("fit_bins needs at least 1 bucket")
    q = np.arange(1, n_buckets) / n_buckets
    bounds = np.unique(np.quantile(col, q, method="inverted_cdf"))
    # the top boundary equal to the max would leave an empty last bucket
    return bounds[bounds < col.max()]


def fit_encoder(train_matrix, n_buckets=DEFAULT_BUCKETS, reserve_zero=True,
                epsilon=DEFAULT_EPS):
    """Fit normaliser and per-feature bins on a raw training matrix."""
    raw = np.asarray(train_matrix)
    stats = fit_normalizer(raw, epsilon)
    scale = stats.std + stats.epsilon
    bounds = []
    for j in range(raw.shape[1]):
        col = raw[:, j].astype(float)
        z = (col - stats.mean[j]) / scale[j]
        if reserve_zero:
            nz = col != 0
            bounds.append(fit_bins(z[nz], n_buckets - 1) if nz.any() else np.zeros(0))
        else:
            bounds.append(fit_bins(z, n_buckets))
    return stats, BinBoundaries(tuple(bounds), int(n_buckets), bool(reserve_zero))


def encode(raw_rows, stats: NormStats, bins: BinBoundaries) -> np.ndarray:
    """Map raw dense rows (n, F) or a single row (F,) to bucket ids."""
    raw = np.asarray(raw_rows, dtype=float)
    single = raw.ndim == 1
    raw = np.atleast_2d(raw)
    if raw.shape[1] != bins.n_features or raw.shape[1] != stats.mean.shape[0]:
        raise ContractError(f"row has {raw.shape[1]} features; encoder fitted on "
                            f"{bins.n_features}")
    z = stats.transform(raw)
    out = np.empty(raw.shape, dtype=np.int64)
    for j, b in enumerate(bins.boundaries):
        out[:, j] = np.searchsorted(b, z[:, j], side="left")
    if bins.reserve_zero:
        out = np.where(raw == 0, 0, out + 1)
    return out[0] if single else out


def encode_linear_scan(raw_row, stats: NormStats, bins: BinBoundaries) -> list:
    """Reference encoder: one value at a time, walking the boundaries."""
    out = []
    for j, x in enumerate(np.asarray(raw_row, dtype=float)):
        if bins.reserve_zero and x == 0:
            out.append(0)
            continue
        z = (x - stats.mean[j]) / (stats.std[j] + stats.epsilon)
        k = 0
        for b in bins.boundaries[j]:
            if z > b:
                k += 1
        out.append(k + 1 if bins.reserve_zero else k)
    return out
