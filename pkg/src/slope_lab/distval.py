"""Categorical value distributions and the quantile-weighted cross-entropy loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DivergenceError


@dataclass(frozen=True)
class Support:
    vmin: float
    vmax: float
    n_bins: int

    def __post_init__(self):
        if not self.vmin < self.vmax:
            raise ConfigError(f"support needs vmin < vmax, got [{self.vmin}, {self.vmax}]")
        if self.n_bins < 2:
            raise ConfigError("support needs at least two bins")

    @classmethod
    def for_discount(cls, gamma: float, n_bins: int = 101):
        """[0, 1/(1-gamma)]: every return of a {0,1}-reward episode."""
        return cls(0.0, 1.0 / (1.0 - gamma), n_bins)

    @property
    def width(self) -> float:
        return (self.vmax - self.vmin) / (self.n_bins - 1)

    @property
    def centers(self) -> np.ndarray:
        return self.vmin + self.width * np.arange(self.n_bins)


@dataclass(frozen=True)
class QceConfig:
    support: Support
    quantile_tau: float = 0.55

    def __post_init__(self):
        if not 0.5 <= self.quantile_tau <= 1.0:
            raise ConfigError(f"quantile_tau must lie in [0.5, 1], got {self.quantile_tau}")


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


@dataclass
class CategoricalValue:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def expectation(self, support: Support) -> float:
        return expectation(self.probs, support)


def two_hot_encode(y, support: Support) -> np.ndarray:
    """Split unit mass between the two bins bracketing ``clamp(y)``.

    Accepts a scalar or an array of targets (one row per target).
    """
    y = np.clip(np.asarray(y, dtype=np.float64), support.vmin, support.vmax)
    pos = (y - support.vmin) / support.width
    lo = np.clip(np.floor(pos).astype(np.int64), 0, support.n_bins - 2)
    frac = pos - lo
    out = np.zeros(y.shape + (support.n_bins,))
    np.put_along_axis(out, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    np.put_along_axis(out, (lo + 1)[..., None], frac[..., None], axis=-1)
    return out


def expectation(value, support: Support):
    """Mean of a categorical distribution; ``value`` is a probability vector
    (or stack of them) or a :class:`CategoricalValue`."""
    if isinstance(value, CategoricalValue):
        value = value.probs
    p = np.asarray(value, dtype=np.float64)
    if p.shape[-1] != support.n_bins:
        raise ContractError(f"distribution has {p.shape[-1]} bins, support has {support.n_bins}")
    out = p @ support.centers
    return float(out) if np.ndim(out) == 0 else out


def td_target(r_shaped: float, gamma: float, next_value_scalar: float) -> float:
    """``y = r~ + gamma * next``; pass ``next = 0`` for terminal successors."""
    return r_shaped + gamma * next_value_scalar


def quantile_weight(delta, tau: float):
    """``tau`` for underestimation (delta < 0), ``1 - tau`` otherwise (delta = 0 included)."""
    return np.where(np.asarray(delta) < 0.0, tau, 1.0 - tau)


def qce_loss(pred_logits, y: float, config: QceConfig):
    """Quantile-weighted cross entropy against the two-hot target.

    Returns ``(loss, grad)`` where the gradient is taken with respect to the
    logits and the weight is held constant.
    """
    z = np.asarray(pred_logits, dtype=np.float64)
    support = config.support
    if z.shape != (support.n_bins,):
        raise ContractError(f"logits have shape {z.shape}, expected ({support.n_bins},)")
    p = softmax(z)
    logp = log_softmax(z)
    delta = float(p @ support.centers) - y
    w = float(quantile_weight(delta, config.quantile_tau))
    target = two_hot_encode(y, support)
    nz = target > 0.0
    ce = -float(np.sum(target[nz] * logp[nz]))
    return w * ce, w * (p - target)


def qce_loss_batch(pred_logits, ys, config: QceConfig):
    """Per-sample losses and gradients for a batch of (logits, target) pairs."""
    z = np.asarray(pred_logits, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    support = config.support
    p = softmax(z)
    logp = log_softmax(z)
    w = quantile_weight(p @ support.centers - ys, config.quantile_tau)
    target = two_hot_encode(ys, support)
    ce = -np.sum(np.where(target > 0.0, target * logp, 0.0), axis=-1)
    return w * ce, w[..., None] * (p - target)


@dataclass
class QceFit:
    value: CategoricalValue
    steps: int
    converged: bool
    losses: np.ndarray
    expectations: np.ndarray
    expectation: float  # of the final logits

    def trace_rows(self):
        return [(k, float(l), float(e)) for k, (l, e) in enumerate(zip(self.losses, self.expectations))]


def qce_fit(samples, config: QceConfig, lr: float = 5.0, steps: int = 20_000, grad_tol: float = 1e-8,
            logits0=None) -> QceFit:
    """Full-batch gradient descent of the mean QCE loss on one distribution.

    Starts from uniform logits unless ``logits0`` is given. Stops when the
    gradient's max-norm drops below ``grad_tol`` or after ``steps`` updates.
    """
    if lr <= 0:
        raise ContractError("lr must be positive")
    support = config.support
    ys = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if ys.size == 0:
        raise ContractError("need at least one sample")
    targets = two_hot_encode(ys, support)
    prefix = np.zeros((ys.size + 1, support.n_bins))
    np.cumsum(targets, axis=0, out=prefix[1:])
    z0 = np.zeros(support.n_bins) if logits0 is None else np.asarray(logits0, dtype=np.float64).copy()
    z, n_steps, losses, expects, status = kernels.qce_fit_loop(
        z0, support.centers, ys, prefix, float(config.quantile_tau), float(lr), int(steps), float(grad_tol))
    if status == kernels.DIVERGED or not np.all(np.isfinite(z)):
        raise DivergenceError(f"QCE fit produced a non-finite loss at step {n_steps} (lr={lr} too large?)",
                              iterations=n_steps)
    value = CategoricalValue(z)
    return QceFit(value, int(n_steps), status == kernels.CONVERGED, losses, expects,
                  expectation(value, support))
