"""Per-field z-score normalization fitted on source-train samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import DegenerateFieldError, EmptyInputError, FieldSchemaError


@dataclass(frozen=True)
class NormalizationStats:
    field_names: tuple
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"field_names": list(self.field_names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["field_names"]), np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


def _field_blocks(X) -> list:
    """Accept a list of samples, a list of arrays, or one N x F array."""
    if isinstance(X, np.ndarray):
        return [X]
    blocks = []
    for item in X:
        blocks.append(np.asarray(item.fields if hasattr(item, "fields") else item, dtype=np.float64))
    return blocks


class FieldNormalizer(BaseEstimator, TransformerMixin):
    """Z-score every output field with statistics pooled over all nodes.

    ``fit`` takes the source-train samples (or their field arrays). ``transform``
    and ``inverse_transform`` work on a single ``N x F`` array or a list of them.
    """

    def __init__(self, field_names=None, min_std: float = 0.0):
        self.field_names = field_names
        self.min_std = min_std

    def fit(self, X, y=None):
        blocks = _field_blocks(X)
        if not blocks:
            raise EmptyInputError("cannot fit normalization statistics on zero samples")
        widths = {b.shape[1] for b in blocks}
        if len(widths) != 1:
            raise FieldSchemaError(f"samples disagree on field count: {sorted(widths)}")
        stacked = np.concatenate(blocks, axis=0)
        self.mean_ = stacked.mean(axis=0)
        self.std_ = stacked.std(axis=0)
        names = self.field_names
        if names is None and not isinstance(X, np.ndarray) and hasattr(X[0], "field_names"):
            names = X[0].field_names
        self.names_ = tuple(names) if names else tuple(f"field{i}" for i in range(stacked.shape[1]))
        bad = [n for n, s in zip(self.names_, self.std_) if not s > self.min_std]
        if bad:
            raise DegenerateFieldError(f"fields with zero spread on source-train: {bad}")
        return self

    @property
    def stats(self) -> NormalizationStats:
        check_is_fitted(self, "mean_")
        return NormalizationStats(self.names_, self.mean_.copy(), self.std_.copy())

    @classmethod
    def from_stats(cls, stats: NormalizationStats) -> "FieldNormalizer":
        if not np.all(stats.std > 0):
            raise DegenerateFieldError("normalization statistics contain a zero std")
        norm = cls(field_names=stats.field_names)
        norm.mean_, norm.std_, norm.names_ = stats.mean.copy(), stats.std.copy(), tuple(stats.field_names)
        return norm

    def _apply(self, X, fn):
        check_is_fitted(self, "mean_")
        if isinstance(X, np.ndarray):
            return fn(self._checked(X))
        return [fn(self._checked(np.asarray(x.fields if hasattr(x, "fields") else x, dtype=np.float64)))
                for x in X]

    def _checked(self, arr):
        if arr.ndim != 2 or arr.shape[1] != self.mean_.shape[0]:
            raise FieldSchemaError(f"expected N x {self.mean_.shape[0]} fields, got shape {arr.shape}")
        return arr

    def transform(self, X):
        return self._apply(X, lambda a: (a - self.mean_) / self.std_)

    def inverse_transform(self, X):
        return self._apply(X, lambda a: a * self.std_ + self.mean_)


def normalize_fields(samples, stats: NormalizationStats) -> list:
    """Normalized field arrays, one per sample, using source-train statistics."""
    return FieldNormalizer.from_stats(stats).transform(list(samples))
