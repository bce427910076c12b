"""Domain-invariance regularizers on conditioning representations.

All distances take two representation batches (rows are samples) and return
a scalar tensor, so they can be added to the reconstruction loss and
differentiated through the conditioner.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, InsufficientBatchError
from .models import ParamStore, mlp
from .tensor import Tensor

KINDS = ("none", "coral", "cmd", "dann")


@dataclass
class UdaConfig:
    kind: str = "none"
    lam: float = 0.0
    cmd_order: int = 5
    cmd_bounds: tuple = (-1.0, 1.0)
    disc_hidden: tuple = (32,)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"uda kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "none":
            self.lam = 0.0
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.cmd_order < 1:
            raise ConfigError("cmd order must be >= 1")
        a, b = self.cmd_bounds
        if not a < b:
            raise ConfigError("cmd bounds need a < b")
        self.cmd_bounds = (float(a), float(b))
        self.disc_hidden = tuple(self.disc_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmd_bounds"] = list(self.cmd_bounds)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UdaConfig":
        return cls(**d)


def _covariance(h: Tensor) -> Tensor:
    b = h.shape[0]
    centered = T.sub(h, T.reduce_mean(h, axis=0, keepdims=True))
    return T.mul(T.matmul(T.transpose(centered), centered), 1.0 / (b - 1))


def coral_distance(hs, ht) -> Tensor:
    """Squared Frobenius distance of the batch covariances, divided by 4 m^2."""
    hs, ht = T.constant(hs), T.constant(ht)
    if hs.shape[0] < 2 or ht.shape[0] < 2:
        raise InsufficientBatchError("coral needs at least 2 rows per batch")
    m = hs.shape[1]
    diff = T.sub(_covariance(hs), _covariance(ht))
    return T.mul(T.reduce_sum(T.mul(diff, diff)), 1.0 / (4.0 * m * m))


def _central_moment(centered: Tensor, k: int) -> Tensor:
    power = centered
    for _ in range(k - 1):
        power = T.mul(power, centered)
    return T.reduce_mean(power, axis=0)


def cmd_distance(hs, ht, order: int = 5, bounds=(0.0, 1.0)) -> Tensor:
    """Central moment discrepancy up to ``order`` for data inside ``bounds``."""
    hs, ht = T.constant(hs), T.constant(ht)
    a, b = bounds
    if not a < b:
        raise ConfigError("cmd bounds need a < b")
    if order < 1:
        raise ConfigError("cmd order must be >= 1")
    span = abs(b - a)
    mu_s = T.reduce_mean(hs, axis=0, keepdims=True)
    mu_t = T.reduce_mean(ht, axis=0, keepdims=True)
    total = T.mul(T.l2_norm(T.sub(mu_s, mu_t)), 1.0 / span)
    cs, ct = T.sub(hs, mu_s), T.sub(ht, mu_t)
    for k in range(2, order + 1):
        gap = T.sub(_central_moment(cs, k), _central_moment(ct, k))
        total = T.add(total, T.mul(T.l2_norm(gap), 1.0 / span ** k))
    return total


def grad_reverse(h, strength: float) -> Tensor:
    """Identity on the way forward; multiplies the upstream gradient by ``-strength``."""
    h = T.constant(h)
    return T.custom_op(h, h.data, lambda g: -strength * g, "grad_reverse")


def _softplus(x: Tensor) -> Tensor:
    # max(x, 0) + log(1 + exp(-|x|)) never overflows
    abs_x = T.add(T.relu(x), T.relu(T.neg(x)))
    return T.add(T.relu(x), T.log(T.add(T.exp(T.neg(abs_x)), 1.0)))


def binary_cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return T.reduce_mean(T.sub(_softplus(logits), T.mul(logits, labels)))


def make_discriminator(latent_dim: int, hidden=(32,), seed: int = 0) -> ParamStore:
    store = ParamStore(np.random.default_rng(seed))
    dims = [latent_dim, *hidden, 1]
    for i in range(len(dims) - 1):
        store.linear(f"disc.{i}", dims[i], dims[i + 1])
    return store


def discriminator_logits(h: Tensor, disc: ParamStore) -> Tensor:
    names = sorted((n[:-2] for n in disc.names() if n.endswith(".w")), key=lambda n: int(n.split(".")[1]))
    return mlp(h, disc, names)


def dann_domain_loss(hs, ht, disc: ParamStore, strength: float = 1.0) -> Tensor:
    """Domain-classification cross-entropy on gradient-reversed representations.

    Source rows are labelled 0 and target rows 1.
    """
    hs, ht = T.constant(hs), T.constant(ht)
    rows = T.concat([grad_reverse(hs, strength), grad_reverse(ht, strength)], axis=0)
    logits = discriminator_logits(rows, disc)
    labels = np.concatenate([np.zeros(hs.shape[0]), np.ones(ht.shape[0])])
    return binary_cross_entropy_logits(logits, labels[:, None])


def combined_objective(recon_loss, da_distance, lam: float) -> Tensor:
    """``recon + lam * distance``; with ``lam == 0`` the reconstruction loss is returned as is."""
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    recon_loss = T.constant(recon_loss)
    if lam == 0 or da_distance is None:
        return recon_loss
    return T.add(recon_loss, T.mul(da_distance, float(lam)))


class DomainRegularizer:
    """Computes the configured distance between source and target latent batches.

    For DANN the gradient reversal uses unit strength inside the
    ``lam``-weighted term, so the conditioner sees a reversed gradient scaled by
    ``lam`` while the discriminator is trained on the same term.
    """

    def __init__(self, config: UdaConfig, latent_dim: int, seed: int = 0):
        self.config = config
        self.latent_dim = latent_dim
        self.discriminator = None
        if config.kind == "dann":
            self.discriminator = make_discriminator(latent_dim, config.disc_hidden, seed + 7919)

    @property
    def active(self) -> bool:
        return self.config.kind != "none" and self.config.lam > 0

    def parameters(self) -> list:
        return self.discriminator.values() if self.discriminator is not None else []

    def distance(self, zs: Tensor, zt: Tensor) -> Tensor:
        kind = self.config.kind
        if kind == "coral":
            return coral_distance(zs, zt)
        if kind == "cmd":
            return cmd_distance(T.tanh(zs), T.tanh(zt), self.config.cmd_order, self.config.cmd_bounds)
        if kind == "dann":
            return dann_domain_loss(zs, zt, self.discriminator, 1.0)
        raise ConfigError("no distance for uda kind 'none'")
