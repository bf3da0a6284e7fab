"""Censor estimators: adversarial classifier, density-ratio MI estimator, Wasserstein critic.

Sign convention shared by every method: the task model *minimises*
``lam * penalty`` to push features towards independence from the nuisance
label, while the censor's own update always sharpens its estimate.

Each penalty / loss function returns ``(value, dz)`` where ``dz`` is the
gradient of ``value`` with respect to the features, and leaves the gradient
of ``value`` with respect to the censor parameters in the censor's network.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import nn
from .model import ConfigError
from .rng import RngStream


class CensorMode(str, Enum):
    MARGINAL = "marginal"
    CONDITIONAL = "conditional"
    COMPLEMENTARY = "complementary"


class CensorMethod(str, Enum):
    ADVERSARIAL = "adversarial"
    DENSITY_RATIO = "dre"
    WASSERSTEIN = "wasserstein"


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def permute_nuisance(s, rng: RngStream) -> np.ndarray:
    """Uniformly shuffled copy of ``s``; pairs ``(z_i, s~_i)`` sample ``p(Z)p(S)``."""
    s = np.asarray(s)
    if len(s) < 2:
        raise ValueError("permuting nuisance labels needs a batch of at least 2")
    return s[rng.permutation(len(s))]


class Censor:
    """Secondary network ``J`` plus the bookkeeping of its input layout.

    Inputs are ``[features, one_hot(s)?, one_hot(y)?]``: the adversary never
    sees ``s`` (it predicts it), the ratio estimator and critic always do, and
    ``y`` is appended in conditional mode.
    """

    def __init__(self, method, mode, feature_dim: int, n_nuisance: int, n_classes: int,
                 rng: RngStream, hidden: Sequence[int] = (128, 128),
                 n_power_iterations: int = 1, raw_nuisance: bool = False):
        self.method = CensorMethod(method)
        self.mode = CensorMode(mode)
        self.feature_dim = feature_dim
        self.n_nuisance = n_nuisance
        self.n_classes = n_classes
        # raw: s is fed as ``n_nuisance`` real columns instead of one-hot codes
        self.raw_nuisance = raw_nuisance
        if raw_nuisance and self.method is CensorMethod.ADVERSARIAL:
            raise ConfigError("the adversary predicts discrete nuisance labels")
        n_in = feature_dim
        if self.method is not CensorMethod.ADVERSARIAL:
            n_in += n_nuisance
        if self.mode is CensorMode.CONDITIONAL:
            n_in += n_classes
        n_out = n_nuisance if self.method is CensorMethod.ADVERSARIAL else 1
        spectral = self.method is CensorMethod.WASSERSTEIN
        self.net = nn.mlp([n_in, *hidden, n_out], rng, spectral=spectral)
        if spectral:
            for layer in self.net.spectral_layers():
                layer.sn.n_power_iterations = n_power_iterations
            # power iteration advances only during the critic's own step
            self.net.set_spectral_update(False)
        self.n_in, self.n_out = n_in, n_out

    def inputs(self, z, s=None, y=None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.feature_dim:
            raise nn.ShapeError(f"censor expects features (batch, {self.feature_dim}), got {z.shape}")
        cols = [z]
        if self.method is not CensorMethod.ADVERSARIAL:
            if s is None:
                raise ValueError("nuisance labels required")
            if self.raw_nuisance:
                cols.append(np.asarray(s, dtype=np.float64).reshape(len(z), self.n_nuisance))
            else:
                cols.append(one_hot(s, self.n_nuisance))
        if self.mode is CensorMode.CONDITIONAL:
            if y is None:
                raise ConfigError("conditional censoring requires task labels")
            cols.append(one_hot(y, self.n_classes))
        return np.concatenate(cols, axis=1)

    def forward(self, z, s=None, y=None) -> np.ndarray:
        return self.net.forward(self.inputs(z, s, y))

    def backward_to_features(self, dout) -> np.ndarray:
        return self.net.backward(dout)[:, : self.feature_dim]

    def parameters(self):
        return self.net.parameters()

    def gradients(self):
        return self.net.gradients()


def _negate_grads(censor: Censor):
    for layer in censor.net.layers:
        for k in layer.grads:
            layer.grads[k] = -layer.grads[k]


def _require(censor: Censor, method: CensorMethod):
    if censor.method is not method:
        raise ConfigError(f"{method.value} routine called with a {censor.method.value} censor")


# --------------------------------------------------------------------------- #
# adversarial classifier


def adv_censor_train_loss(censor: Censor, z, s, y=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the adversary predicting ``s`` (the adversary minimises it)."""
    _require(censor, CensorMethod.ADVERSARIAL)
    logits = censor.forward(z, y=y)
    ce, dlogits = nn.softmax_cross_entropy(logits, s)
    return ce, censor.backward_to_features(dlogits)


def adv_censor_penalty(censor: Censor, z, s, y=None) -> tuple[float, np.ndarray]:
    """Negative mean adversary cross-entropy."""
    ce, dz = adv_censor_train_loss(censor, z, s, y)
    _negate_grads(censor)
    return -ce, -dz


# --------------------------------------------------------------------------- #
# density-ratio estimator


def _joint_and_product(censor: Censor, z, s, s_perm, y):
    n = len(z)
    feats = censor.inputs(np.concatenate([z, z]), np.concatenate([s, s_perm]),
                          None if y is None else np.concatenate([y, y]))
    out = censor.net.forward(feats)[:, 0]
    return out[:n], out[n:]


def dre_train_loss(censor: Censor, z, s, s_perm, y=None) -> tuple[float, np.ndarray]:
    """``mean softplus(-J(z, s)) + mean softplus(J(z, s~))``."""
    _require(censor, CensorMethod.DENSITY_RATIO)
    if s_perm is None:
        raise ValueError("density-ratio training needs permuted nuisance labels")
    joint, prod = _joint_and_product(censor, z, s, s_perm, y)
    l_joint, g_joint = nn.logistic_terms(joint, 1.0)
    l_prod, g_prod = nn.logistic_terms(prod, -1.0)
    dfeat = censor.backward_to_features(np.concatenate([g_joint, g_prod])[:, None])
    n = len(z)
    return l_joint + l_prod, dfeat[:n] + dfeat[n:]


def dre_censor_penalty(censor: Censor, z, s, y=None) -> tuple[float, np.ndarray]:
    """Mean log density ratio over joint pairs, i.e. the MI estimate."""
    _require(censor, CensorMethod.DENSITY_RATIO)
    out = censor.forward(z, s, y)
    n = len(out)
    return float(out.mean()), censor.backward_to_features(np.full((n, 1), 1.0 / n))


# --------------------------------------------------------------------------- #
# Wasserstein critic


def wasserstein_censor_penalty(critic: Censor, z, s, s_perm, y=None) -> tuple[float, np.ndarray]:
    """Dual W1 estimate ``mean J(z, s) - mean J(z, s~)``."""
    _require(critic, CensorMethod.WASSERSTEIN)
    if not critic.net.spectral_layers():
        raise ConfigError("Wasserstein critic needs spectrally normalised layers")
    if s_perm is None:
        raise ValueError("Wasserstein penalty needs permuted nuisance labels")
    joint, prod = _joint_and_product(critic, z, s, s_perm, y)
    n = len(z)
    value = float(joint.mean() - prod.mean())
    dout = np.concatenate([np.full(n, 1.0 / n), np.full(n, -1.0 / n)])[:, None]
    dfeat = critic.backward_to_features(dout)
    return value, dfeat[:n] + dfeat[n:]


def wasserstein_train_loss(critic: Censor, z, s, s_perm, y=None) -> tuple[float, np.ndarray]:
    """The critic ascends the dual objective, so its loss is the negated penalty."""
    critic.net.set_spectral_update(True)
    try:
        value, dz = wasserstein_censor_penalty(critic, z, s, s_perm, y)
    finally:
        critic.net.set_spectral_update(False)
    _negate_grads(critic)
    return -value, -dz


# --------------------------------------------------------------------------- #
# dispatch


def censor_train_loss(censor: Censor, z, s, s_perm=None, y=None) -> tuple[float, np.ndarray]:
    if censor.method is CensorMethod.ADVERSARIAL:
        return adv_censor_train_loss(censor, z, s, y)
    if censor.method is CensorMethod.DENSITY_RATIO:
        return dre_train_loss(censor, z, s, s_perm, y)
    return wasserstein_train_loss(censor, z, s, s_perm, y)


def censor_penalty(censor: Censor, z, s, s_perm=None, y=None) -> tuple[float, np.ndarray]:
    if censor.method is CensorMethod.ADVERSARIAL:
        return adv_censor_penalty(censor, z, s, y)
    if censor.method is CensorMethod.DENSITY_RATIO:
        return dre_censor_penalty(censor, z, s, y)
    return wasserstein_censor_penalty(censor, z, s, s_perm, y)


def needs_permutation(method) -> bool:
    return CensorMethod(method) is not CensorMethod.ADVERSARIAL


def complementary_combine(penalty_z: float, penalty_w: float, mode=CensorMode.COMPLEMENTARY) -> float:
    """Penalty for complementary censoring: suppress dependence in ``z``, reward it in ``w``."""
    if CensorMode(mode) is not CensorMode.COMPLEMENTARY:
        raise ConfigError("complementary_combine only applies to complementary mode")
    return penalty_z - penalty_w


def build_censors(method, mode, latent_dim: int, n_nuisance: int, n_classes: int,
                  rng: RngStream, hidden: Sequence[int] = (128, 128)) -> list[Censor]:
    """One censor, or two independent ones (``z`` half, ``w`` half) in complementary mode."""
    mode = CensorMode(mode)
    if mode is CensorMode.COMPLEMENTARY:
        if latent_dim % 2:
            raise ConfigError(f"complementary censoring needs an even latent size, got {latent_dim}")
        return [Censor(method, mode, latent_dim // 2, n_nuisance, n_classes,
                       rng.derive("censor", i), hidden) for i in range(2)]
    return [Censor(method, mode, latent_dim, n_nuisance, n_classes, rng.derive("censor", 0), hidden)]


@dataclass
class PenaltyResult:
    value: float
    dz: np.ndarray
    parts: tuple


def total_penalty(censors: list[Censor], z, s, y, rng: Optional[RngStream]) -> PenaltyResult:
    """Task-side penalty over all censors, with its gradient in the full feature matrix."""
    mode = censors[0].mode
    y_in = y if mode is CensorMode.CONDITIONAL else None
    perm = permute_nuisance(s, rng) if needs_permutation(censors[0].method) else None
    if mode is CensorMode.COMPLEMENTARY:
        halves = split_halves(z)
        pz, dzz = censor_penalty(censors[0], halves[0], s, perm, y_in)
        pw, dzw = censor_penalty(censors[1], halves[1], s, perm, y_in)
        return PenaltyResult(complementary_combine(pz, pw), np.concatenate([dzz, -dzw], axis=1),
                             (pz, pw))
    value, dz = censor_penalty(censors[0], z, s, perm, y_in)
    return PenaltyResult(value, dz, (value,))


def split_halves(z):
    k = z.shape[1] // 2
    return z[:, :k], z[:, k:]


def fit_censor(censor: Censor, z, s, rng: RngStream, *, y=None, steps: int = 2000,
               batch_size: int = 512, lr: float = 1e-3, weight_decay: float = 0.0) -> list[float]:
    """Train ``censor`` alone on fixed features; returns the per-step train losses.

    Used for standalone estimation (MI, W1, adversary CE) where ``z`` is data
    rather than the output of a model being trained.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s)
    n = len(z)
    if n < 2:
        raise ValueError("need at least 2 samples")
    batch_size = min(batch_size, n)
    opt = nn.AdamW(censor.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    for step in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        perm = permute_nuisance(s[idx], rng) if needs_permutation(censor.method) else None
        loss, _ = censor_train_loss(censor, z[idx], s[idx], perm,
                                    None if y is None else np.asarray(y)[idx])
        opt.step(censor.gradients())
        losses.append(loss)
    return losses


def estimate(censor: Censor, z, s, rng: RngStream, *, y=None) -> float:
    """Full-sample penalty value of a trained censor (no parameter change)."""
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s)
    perm = permute_nuisance(s, rng) if needs_permutation(censor.method) else None
    value, _ = censor_penalty(censor, z, s, perm, y)
    return value
