"""Joint source/target training of a conditioned surrogate.

Every step draws a labelled source batch and an unlabelled target batch. The
loss is the normalized-field MSE on the source batch plus ``lam`` times the
configured divergence between the two batches' conditioning latents. Weights
are updated with AdamW under a cosine schedule and global-norm clipping, and
an EMA shadow of the surrogate weights is what gets evaluated and saved.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .. import tensor as T
from ..datagen.corpus import TaskSpec
from ..exceptions import ConfigError, EmptyInputError, InsufficientBatchError, NumericError
from ..models import ModelConfig, SurrogateModel
from ..uda import DomainRegularizer, UdaConfig, combined_objective
from .normalize import FieldNormalizer

logger = logging.getLogger(__name__)

PROFILES = {
    "paper": {"max_epochs": 3000, "patience": 500},
    "desk": {"max_epochs": 300, "patience": 60},
}


@dataclass
class TrainConfig:
    architecture: str = "sage"
    conditioning: str = "film"
    uda: UdaConfig = field(default_factory=UdaConfig)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 300
    eval_every: int = 10
    patience: int = 60
    ema_decay: float = 0.95
    seed: int = 0
    profile: str = "desk"
    width: int | None = None

    def __post_init__(self):
        if isinstance(self.uda, dict):
            self.uda = UdaConfig.from_dict(self.uda)
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {tuple(PROFILES)}")
        caps = PROFILES[self.profile]
        if self.profile == "desk":
            self.max_epochs = min(self.max_epochs, caps["max_epochs"])
            self.patience = min(self.patience, caps["patience"])
        for name in ("learning_rate", "clip_norm", "batch_size", "max_epochs", "eval_every", "patience", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in (0, 1)")
        self.betas = tuple(float(b) for b in self.betas)

    @classmethod
    def preset(cls, profile: str, **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return cls(profile=profile, **{**PROFILES[profile], **overrides})

    def with_uda(self, kind: str, lam: float) -> "TrainConfig":
        return replace(self, uda=replace(self.uda, kind=kind if lam > 0 else "none", lam=lam))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["uda"] = self.uda.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer pieces

def cosine_lr(step: int, total: int, base: float) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def clip_global_norm(grad: np.ndarray, max_norm: float) -> tuple:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


class AdamW:
    """Adam with decoupled weight decay on a flat parameter vector."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float, decay_mask=None) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        decay = self.weight_decay * params if decay_mask is None else self.weight_decay * params * decay_mask
        return params - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + decay)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: SurrogateModel
    normalizer: FieldNormalizer
    val_losses: np.ndarray
    z_val: np.ndarray
    z_target: np.ndarray
    curve: list
    best_epoch: int
    epochs_run: int
    unstable: bool = False
    diagnostics: dict | None = None

    @property
    def source_val_loss(self) -> float:
        return float(np.mean(self.val_losses)) if self.val_losses.size else float("nan")


def _batches(order: np.ndarray, size: int) -> list:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a single-row batch has no covariance; fold it into its neighbour
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _sample_losses(model: SurrogateModel, prepared: list, targets: list, batch_size: int = 32) -> np.ndarray:
    """Per-sample MSE on normalized fields."""
    out = []
    for start in range(0, len(prepared), batch_size):
        items = prepared[start:start + batch_size]
        batch = model.batch(None, items)
        preds = batch.split(model.forward(batch).data)
        for p, y in zip(preds, targets[start:start + batch_size]):
            out.append(float(np.mean((p - y) ** 2)))
    return np.asarray(out)


def model_config_for(task: TaskSpec, config: TrainConfig, coord_dim: int) -> ModelConfig:
    return ModelConfig(
        architecture=config.architecture,
        conditioning=config.conditioning,
        n_params=len(task.params),
        coord_dim=coord_dim,
        n_fields=len(task.field_names),
        param_bounds=(tuple(task.lower()), tuple(task.upper())),
        coord_bounds=tuple(task.coord_bounds),
        width=config.width,
        seed=config.seed,
    )


def fit_surrogate(config: TrainConfig, task: TaskSpec, source_train, source_val, target_params,
                  normalizer: FieldNormalizer | None = None, progress=None) -> TrainResult:
    """Train one configuration.

    ``target_params`` holds only the target-train parameter vectors: the
    target labels never enter this function.
    """
    source_train, source_val = list(source_train), list(source_val)
    target_params = np.asarray(target_params, dtype=np.float64).reshape(-1, len(task.params))
    if not source_train or not source_val:
        raise EmptyInputError("training needs nonempty source-train and source-val partitions")
    if normalizer is None:
        normalizer = FieldNormalizer(field_names=task.field_names).fit(source_train)
    model = SurrogateModel(model_config_for(task, config, source_train[0].coords.shape[1]))
    reg = DomainRegularizer(config.uda, model.config.latent_dim, config.seed)
    if reg.active and len(target_params) == 0:
        raise EmptyInputError("domain adaptation needs target-train inputs")
    rng = np.random.default_rng(config.seed)

    prep_train = [model.prepare(s) for s in source_train]
    prep_val = [model.prepare(s) for s in source_val]
    y_train = normalizer.transform(source_train)
    y_val = normalizer.transform(source_val)

    n_model = model.get_flat().size
    disc_names = reg.discriminator.names() if reg.discriminator is not None else []
    flat = np.concatenate([model.get_flat(), reg.discriminator.flat() if disc_names else np.zeros(0)])
    # biases are not decayed
    names = [(n, t.size) for n, t in model.named_parameters()]
    names += [(n, reg.discriminator[n].size) for n in disc_names]
    decay_mask = np.concatenate([np.full(size, 0.0 if n.endswith(".b") else 1.0) for n, size in names])
    opt = AdamW(flat.size, config.betas, config.eps, config.weight_decay)
    ema = flat[:n_model].copy()

    steps_per_epoch = len(_batches(np.arange(len(source_train)), config.batch_size))
    total_steps = config.max_epochs * steps_per_epoch
    step = 0
    curve = []
    best = {"raw": math.inf, "raw_epoch": 0, "ema": math.inf, "epoch": 0, "weights": ema.copy()}
    epochs_run = 0
    unstable, diagnostics = False, None

    def load(weights):
        model.set_flat(weights[:n_model])
        if disc_names:
            reg.discriminator.load_flat(weights[n_model:])

    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(source_train))
        batches = _batches(order, config.batch_size)
        if reg.active:
            if len(target_params) >= len(source_train):
                t_order = rng.permutation(len(target_params))[:len(order)]
            else:
                t_order = rng.integers(0, len(target_params), size=len(order))
        sums = np.zeros(3)
        off = 0
        for idx in batches:
            load(flat)
            batch = model.batch(None, [prep_train[i] for i in idx])
            y = np.concatenate([y_train[i] for i in idx])
            try:
                with T.Tape() as tape:
                    z_s = model.condition(batch.params)
                    pred = model.forward(batch, z_s)
                    diff = T.sub(pred, y)
                    recon = T.reduce_mean(T.mul(diff, diff))
                    da = None
                    if reg.active:
                        tb = t_order[off:off + len(idx)]
                        if len(tb) < 2:
                            raise InsufficientBatchError("target batch needs at least 2 rows")
                        da = reg.distance(z_s, model.condition(target_params[tb]))
                    total = combined_objective(recon, da, config.uda.lam)
            except NumericError as exc:
                unstable = True
                diagnostics = {"epoch": epoch, "step": step, "reason": str(exc)}
                break
            off += len(idx)
            loss_values = (recon.item(), da.item() if da is not None else 0.0, total.item())
            if not all(map(math.isfinite, loss_values)):
                unstable = True
                diagnostics = {"epoch": epoch, "step": step, "losses": list(loss_values)}
                break
            params = model.parameters() + (reg.parameters() if disc_names else [])
            grads = T.backward(total, tape, params)
            g = np.concatenate([grads[p].reshape(-1) for p in params])
            if not np.isfinite(g).all():
                unstable = True
                diagnostics = {"epoch": epoch, "step": step, "reason": "non-finite gradient"}
                break
            g, _ = clip_global_norm(g, config.clip_norm)
            flat = opt.step(flat, g, cosine_lr(step, total_steps, config.learning_rate), decay_mask)
            if not np.isfinite(flat).all():
                unstable = True
                diagnostics = {"epoch": epoch, "step": step, "reason": "non-finite weights"}
                break
            ema = config.ema_decay * ema + (1 - config.ema_decay) * flat[:n_model]
            step += 1
            sums += loss_values
        if unstable:
            logger.warning("run became unstable: %s", diagnostics)
            break
        row = {"epoch": epoch, "recon": sums[0] / len(batches), "da": sums[1] / len(batches),
               "total": sums[2] / len(batches), "source_val": None}
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            load(flat)
            raw_val = float(_sample_losses(model, prep_val, y_val).mean())
            model.set_flat(ema)
            ema_val = float(_sample_losses(model, prep_val, y_val).mean())
            row["source_val"] = raw_val
            if raw_val < best["raw"]:
                best["raw"], best["raw_epoch"] = raw_val, epoch
            if ema_val < best["ema"]:
                best.update(ema=ema_val, epoch=epoch, weights=ema.copy())
            if progress is not None:
                progress(epoch, row)
            if epoch - best["raw_epoch"] >= config.patience:
                curve.append(row)
                break
        curve.append(row)

    model.set_flat(best["weights"])
    val_losses = _sample_losses(model, prep_val, y_val) if not unstable else np.full(len(source_val), np.nan)
    z_val = model.condition(np.stack([s.params for s in source_val])).data.copy()
    z_target = (model.condition(target_params).data.copy() if len(target_params)
                else np.zeros((0, model.config.latent_dim)))
    return TrainResult(model, normalizer, val_losses, z_val, z_target, curve, best["epoch"], epochs_run,
                       unstable, diagnostics)


# ---------------------------------------------------------------------------
# estimator facade

class ConditionedSurrogateRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper around :func:`fit_surrogate`.

    ``fit`` takes source-train samples, optional source-val samples (defaults
    to the training samples) and optional target-train inputs (parameter
    vectors or samples, whose fields are ignored). ``predict`` returns one
    denormalized ``N x F`` array per sample and ``transform`` returns the
    conditioning latents.
    """

    def __init__(self, task="plate-heat", architecture="sage", conditioning="film", uda_kind="none",
                 lam=0.0, profile="desk", max_epochs=300, patience=60, batch_size=16,
                 learning_rate=1e-3, weight_decay=1e-5, clip_norm=1.0, ema_decay=0.95,
                 eval_every=10, width=None, seed=0):
        self.task = task
        self.architecture = architecture
        self.conditioning = conditioning
        self.uda_kind = uda_kind
        self.lam = lam
        self.profile = profile
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.ema_decay = ema_decay
        self.eval_every = eval_every
        self.width = width
        self.seed = seed

    def _task_spec(self) -> TaskSpec:
        from ..datagen.corpus import get_task
        return self.task if isinstance(self.task, TaskSpec) else get_task(self.task)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            architecture=self.architecture, conditioning=self.conditioning,
            uda=UdaConfig(kind=self.uda_kind, lam=self.lam), learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm, batch_size=self.batch_size,
            max_epochs=self.max_epochs, eval_every=self.eval_every, patience=self.patience,
            ema_decay=self.ema_decay, seed=self.seed, profile=self.profile, width=self.width,
        )

    def fit(self, X, y=None, X_val=None, X_target=None):
        X = list(X)
        if not X:
            raise EmptyInputError("no training samples")
        target = [] if X_target is None else [getattr(t, "params", t) for t in X_target]
        result = fit_surrogate(self.train_config(), self._task_spec(), X,
                               X if X_val is None else list(X_val), np.asarray(target, dtype=np.float64))
        self.model_ = result.model
        self.normalizer_ = result.normalizer
        self.result_ = result
        if result.unstable:
            raise NumericError(f"training diverged: {result.diagnostics}")
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        from .metrics import predict_normalized
        return [self.normalizer_.inverse_transform(p) for p in predict_normalized(self.model_, list(X))]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        params = np.atleast_2d([getattr(x, "params", x) for x in X])
        return self.model_.condition(params).data.copy()

    def score(self, X, y=None) -> float:
        """Negative normalized RMSE sum, so that higher is better."""
        from .metrics import evaluate_predictions
        X = list(X)
        return -evaluate_predictions(X, self.predict(X), self.normalizer_.stats).nrmse
