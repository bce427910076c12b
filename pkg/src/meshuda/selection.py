"""Unsupervised model selection over a pool of trained runs.

Source-best (SB) ranks runs by their plain source-validation loss. IWV and
DEV reweight the per-sample source-validation losses by an estimated density
ratio between target and source representations. Target-best (TB) is the
oracle that reads sealed target-test metrics; every such read goes through
an :class:`AccessLog`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import EstimationError, PolicyError, SelectionError

logger = logging.getLogger(__name__)

STRATEGIES = ("SB", "IWV", "DEV", "TB")
RATIO_CLIP = (1e-3, 1e3)


# ---------------------------------------------------------------------------
# oracle access control

@dataclass
class AccessLog:
    """Records every attempt to read sealed target-test metrics."""

    entries: list = field(default_factory=list)

    def record(self, run_id: str, purpose: str, allowed: bool) -> None:
        self.entries.append({"run_id": run_id, "purpose": purpose, "allowed": allowed})

    def non_oracle_reads(self) -> list:
        return [e for e in self.entries if not e["allowed"]]

    def summary(self) -> dict:
        purposes: dict = {}
        for e in self.entries:
            purposes[e["purpose"]] = purposes.get(e["purpose"], 0) + 1
        return {"total_reads": len(self.entries), "by_purpose": purposes,
                "non_oracle_reads": len(self.non_oracle_reads())}


ORACLE_PURPOSES = ("TB", "report")


class SealedMetrics:
    """Target-test metrics that only the oracle and final reporting may read.

    ``metrics`` is either a dict or a zero-argument callable that computes it;
    a callable is evaluated on the first authorized read, so the target labels
    are not touched at all unless an oracle path asks for them.
    """

    __slots__ = ("_run_id", "_metrics", "_log")

    def __init__(self, run_id: str, metrics, log: AccessLog):
        self._run_id = run_id
        self._metrics = metrics
        self._log = log

    def read(self, purpose: str) -> dict:
        allowed = purpose in ORACLE_PURPOSES
        self._log.record(self._run_id, purpose, allowed)
        if not allowed:
            raise PolicyError(f"target-test metrics of {self._run_id} requested for {purpose!r}")
        if callable(self._metrics):
            self._metrics = self._metrics()
        return self._metrics

    def __repr__(self):
        return f"SealedMetrics(run_id={self._run_id!r})"


@dataclass
class RunRecord:
    """Everything selection needs to know about one trained configuration."""

    run_id: str
    config: dict
    checkpoint: str | None
    val_losses: np.ndarray
    z_val: np.ndarray
    z_target: np.ndarray
    target_metrics: SealedMetrics | None = None
    source_metrics: dict | None = None
    unstable: bool = False
    wall_seconds: float | None = None

    def __post_init__(self):
        self.val_losses = np.asarray(self.val_losses, dtype=np.float64).reshape(-1)
        if not self.unstable:
            if not np.isfinite(self.val_losses).all() or (self.val_losses < 0).any():
                raise ValueError(f"{self.run_id}: source-val losses must be finite and nonnegative")

    @property
    def source_val_loss(self) -> float:
        return float(self.val_losses.mean())

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))


# ---------------------------------------------------------------------------
# density ratio

class DensityRatioEstimator(BaseEstimator):
    """Density ratio ``p_T(x) / p_S(x)`` from a logistic domain classifier.

    The classifier (target = class 1) is fitted by full-batch gradient descent
    on standardized inputs. Ratios are ``D / (1 - D) * n_source / n_target``,
    clipped to ``[1e-3, 1e3]``.
    """

    def __init__(self, learning_rate=0.5, n_iter=2000, l2=1e-4, clip=RATIO_CLIP):
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.l2 = l2
        self.clip = clip

    def fit(self, source, target):
        if len(source) == 0 or len(target) == 0:
            raise EstimationError("density ratio estimation needs samples from both domains")
        source = check_array(source, ensure_2d=False)
        target = check_array(target, ensure_2d=False)
        source = source.reshape(len(source), -1)
        target = target.reshape(len(target), -1)
        if source.shape[1] != target.shape[1]:
            raise EstimationError("source and target representations differ in dimension")
        X = np.vstack([source, target])
        y = np.concatenate([np.zeros(len(source)), np.ones(len(target))])
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 1e-12, scale, 1.0)
        Xs = (X - self.mean_) / self.scale_
        w = np.zeros(X.shape[1])
        b = 0.0
        n = len(y)
        for _ in range(self.n_iter):
            p = _sigmoid(Xs @ w + b)
            resid = p - y
            w -= self.learning_rate * (Xs.T @ resid / n + self.l2 * w)
            b -= self.learning_rate * resid.mean()
        self.coef_ = w
        self.intercept_ = b
        self.n_source_ = len(source)
        self.n_target_ = len(target)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_2d=False)
        X = X.reshape(len(X), -1)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X) -> np.ndarray:
        """Importance weights for the rows of ``X``."""
        # D / (1 - D) = exp(logit)
        log_ratio = self.decision_function(X) + np.log(self.n_source_ / self.n_target_)
        lo, hi = self.clip
        return np.clip(np.exp(np.clip(log_ratio, np.log(lo), np.log(hi))), lo, hi)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def estimate_density_ratio(source_inputs, target_inputs, **kwargs) -> DensityRatioEstimator:
    return DensityRatioEstimator(**kwargs).fit(source_inputs, target_inputs)


# ---------------------------------------------------------------------------
# risk estimators

def iwv_risk(losses, weights) -> float:
    """Importance-weighted mean loss."""
    losses = np.asarray(losses, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.mean(weights * losses))


def dev_risk(losses, weights) -> float:
    """Importance-weighted risk with the weights as control variate.

    With ``L = w * l``: ``eta = -Cov(L, w) / Var(w)`` and the estimate is
    ``mean(L) + eta * mean(w) - eta``. A (near) constant weight vector gives
    ``eta = 0``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) < 2:
        raise SelectionError("DEV needs at least 2 validation samples")
    weighted = w * losses
    var_w = np.var(w, ddof=1)
    if var_w < 1e-12:
        eta = 0.0
    else:
        cov = np.cov(weighted, w, ddof=1)[0, 1]
        eta = -cov / var_w
    return float(weighted.mean() + eta * w.mean() - eta)


def _ratio_for(run: RunRecord, ratio):
    if ratio is None:
        return estimate_density_ratio(run.z_val, run.z_target)
    if isinstance(ratio, dict):
        return ratio[run.run_id]
    return ratio


def iwv_score(run: RunRecord, ratio=None) -> float:
    model = _ratio_for(run, ratio)
    return iwv_risk(run.val_losses, model.predict(run.z_val))


def dev_score(run: RunRecord, ratio=None) -> float:
    model = _ratio_for(run, ratio)
    return dev_risk(run.val_losses, model.predict(run.z_val))


# ---------------------------------------------------------------------------
# selection

@dataclass
class SelectionScore:
    strategy: str
    scores: dict
    chosen: str

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "scores": dict(self.scores), "chosen": self.chosen}


def target_nrmse(metrics) -> float:
    return float(metrics["nrmse"] if isinstance(metrics, dict) else metrics.nrmse)


def _argmin(scores: dict) -> str:
    # lowest score, ties to the lexicographically smallest id
    return min(scores, key=lambda rid: (scores[rid], rid))


def select_model(runs, strategy: str, ratio=None, allow_oracle: bool = True) -> SelectionScore:
    """Score every stable run with ``strategy`` and return the argmin.

    ``ratio`` may be a fitted :class:`DensityRatioEstimator`, a dict mapping run
    id to one, or ``None`` to fit one per run on its cached representations.
    """
    if strategy not in STRATEGIES:
        raise SelectionError(f"unknown strategy {strategy!r}")
    pool = [r for r in runs if not r.unstable]
    if not pool:
        raise SelectionError("no (stable) runs to select from")
    if strategy == "TB" and not allow_oracle:
        raise PolicyError("TB selection requested in a no-oracle context")
    scores = {}
    for run in pool:
        if strategy == "SB":
            scores[run.run_id] = run.source_val_loss
        elif strategy == "IWV":
            scores[run.run_id] = iwv_score(run, ratio)
        elif strategy == "DEV":
            scores[run.run_id] = dev_score(run, ratio)
        else:
            if run.target_metrics is None:
                raise SelectionError(f"{run.run_id} has no target metrics for the oracle")
            scores[run.run_id] = target_nrmse(run.target_metrics.read("TB"))
    return SelectionScore(strategy, scores, _argmin(scores))
