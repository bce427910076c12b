"""Field errors: per-field RMSE (mean over graphs of per-graph roots), NRMSE, deformation error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import EmptyInputError, FieldSchemaError
from .normalize import FieldNormalizer, NormalizationStats


def per_sample_rmse(pred, true) -> np.ndarray:
    """``M x F`` matrix of per-graph, per-field root-mean-square errors."""
    if len(pred) != len(true):
        raise FieldSchemaError(f"{len(pred)} predictions for {len(true)} samples")
    if not len(true):
        raise EmptyInputError("no samples to score")
    rows = []
    for p, t in zip(pred, true):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if p.shape != t.shape:
            raise FieldSchemaError(f"prediction shape {p.shape} does not match target {t.shape}")
        rows.append(np.sqrt(np.mean((p - t) ** 2, axis=0)))
    return np.vstack(rows)


def field_rmse(pred, true) -> np.ndarray:
    """Per-field RMSE: mean over graphs of the per-graph root (not root of the pooled mean)."""
    return per_sample_rmse(pred, true).mean(axis=0)


def nrmse(pred_norm, true_norm) -> float:
    """Sum over fields of the per-field RMSE on normalized values."""
    return float(field_rmse(pred_norm, true_norm).sum())


def deformation_error(coords, pred_disp, true_disp) -> float:
    """Mean over graphs of the mean per-node distance between displaced positions.

    The displacement component is appended to the node coordinates; since the
    coordinates are shared, the distance reduces to the displacement gap.
    """
    per_graph = []
    for x, p, t in zip(coords, pred_disp, true_disp):
        moved_p = np.column_stack([x, p])
        moved_t = np.column_stack([x, t])
        per_graph.append(np.linalg.norm(moved_p - moved_t, axis=1).mean())
    return float(np.mean(per_graph))


@dataclass
class MetricsReport:
    domain: str
    field_names: tuple
    rmse: np.ndarray
    nrmse: float
    per_sample: np.ndarray
    sample_ids: tuple
    deformation: float | None = None

    @property
    def nrmse_mean(self) -> float:
        return self.nrmse / len(self.field_names)

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {
            "domain": self.domain,
            "rmse": {n: float(v) for n, v in zip(self.field_names, self.rmse)},
            "nrmse": self.nrmse,
            "nrmse_mean": self.nrmse_mean,
            "n_samples": len(self.sample_ids),
        }
        if self.deformation is not None:
            d["deformation_error"] = self.deformation
        if include_samples:
            d["sample_ids"] = list(self.sample_ids)
            d["per_sample"] = self.per_sample.tolist()
        return d


def evaluate_predictions(samples, predictions, stats: NormalizationStats, domain: str = "",
                         displacement_field: str | None = None) -> MetricsReport:
    """Score denormalized ``predictions`` (one ``N x F`` array per sample)."""
    samples = list(samples)
    for s in samples:
        if s.field_names and tuple(s.field_names) != tuple(stats.field_names):
            raise FieldSchemaError(f"sample {s.sample_id} has fields {s.field_names}, "
                                   f"statistics cover {stats.field_names}")
    norm = FieldNormalizer.from_stats(stats)
    true = [s.fields for s in samples]
    rmse = field_rmse(predictions, true)
    per_sample = per_sample_rmse(norm.transform(list(predictions)), norm.transform(true))
    deform = None
    if displacement_field is not None:
        j = list(stats.field_names).index(displacement_field)
        deform = deformation_error([s.coords for s in samples], [p[:, j] for p in predictions],
                                   [t[:, j] for t in true])
    return MetricsReport(domain, tuple(stats.field_names), rmse, float(per_sample.mean(axis=0).sum()),
                         per_sample, tuple(s.sample_id for s in samples), deform)


def evaluate_metrics(model, samples, stats: NormalizationStats, domain: str = "",
                     displacement_field: str | None = None) -> MetricsReport:
    """Run ``model`` on ``samples`` and score it (predictions are denormalized first)."""
    samples = list(samples)
    if samples and samples[0].fields.shape[1] != model.config.n_fields:
        raise FieldSchemaError(f"model predicts {model.config.n_fields} fields, "
                               f"samples carry {samples[0].fields.shape[1]}")
    norm = FieldNormalizer.from_stats(stats)
    preds = [norm.inverse_transform(p) for p in predict_normalized(model, samples)]
    return evaluate_predictions(samples, preds, stats, domain, displacement_field)


def predict_normalized(model, samples, batch_size: int = 32) -> list:
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = model.batch(chunk)
        out.extend(batch.split(model.forward(batch).data))
    return [np.array(p) for p in out]
