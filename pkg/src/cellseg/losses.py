"""Loss components and the strategies that combine them.

Four scalar components are tracked per step: cross entropy and Dice on the
real logits, plus the same pair evaluated on a synthetic logit map carrying
virtual outliers. Three combination strategies are supported:

* ``balance`` -- fixed weights: lam * seg + beta * uncertainty,
* ``norm``    -- each component divided by its own detached magnitude,
* ``pareto``  -- cross entropy kept raw, every other component rescaled so
  its detached magnitude matches the cross-entropy term.

The magnitude normalizers are treated as constants under differentiation;
``combine`` therefore returns per-component gradient weights alongside the
combined scalar.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5
NORM_EPS = 1e-8

STRATEGIES = ("balance", "norm", "pareto")


def log_softmax(logits):
    """Row-wise log softmax over the trailing class axis, LSE-stabilized."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dice_loss(probs, target, eps=DICE_EPS):
    """Soft Dice loss between foreground probabilities and a binary target.

    1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps). With eps=0 and
    both sides empty the loss is defined as 0 (perfect agreement).
    """
    p = np.asarray(probs, dtype=np.float64)
    g = (np.asarray(target) == 1).astype(np.float64)
    num = 2.0 * np.sum(p * g) + eps
    den = np.sum(p * p) + np.sum(g * g) + eps
    if den == 0.0:
        return 0.0
    return 1.0 - num / den


def ce_loss(logits, target):
    """Mean per-pixel cross entropy of logits against integer labels."""
    logp = log_softmax(logits)
    t = np.asarray(target)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    return float(-picked.mean())


def ce_grad(logits, target):
    """Gradient of ``ce_loss`` with respect to the logits."""
    p = softmax(logits)
    t = np.asarray(target)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    return (p - onehot) / t.size


def dice_grad_logits(logits, target, eps=DICE_EPS):
    """Gradient of the foreground Dice loss with respect to the logits.

    The foreground probability is softmax(logits)[..., 1]; the chain rule
    through softmax is applied analytically.
    """
    p = softmax(logits)
    p1 = p[..., 1]
    g = (np.asarray(target) == 1).astype(np.float64)
    num = 2.0 * np.sum(p1 * g) + eps
    den = np.sum(p1 * p1) + np.sum(g * g) + eps
    if den == 0.0:
        return np.zeros_like(logits)
    # d(loss)/d(p1) for loss = 1 - num/den
    dp1 = 2.0 * (p1 * num - g * den) / (den * den)
    indicator = np.zeros(logits.shape[-1])
    indicator[1] = 1.0
    return (dp1 * p1)[..., None] * (indicator - p)


def seg_loss(logits, target, lam1=0.5, lam2=0.5):
    """Weighted cross entropy plus Dice on the real prediction."""
    if lam1 < 0 or lam2 < 0:
        raise ConfigError("seg_loss weights must be nonnegative")
    ce = ce_loss(logits, target)
    dice = dice_loss(softmax(logits)[..., 1], target)
    return lam1 * ce + lam2 * dice


def uncertainty_loss(synthetic_logits, target, beta1=0.5, beta2=0.5):
    """Weighted cross entropy plus Dice evaluated on the synthetic map."""
    if beta1 < 0 or beta2 < 0:
        raise ConfigError("uncertainty_loss weights must be nonnegative")
    ce = ce_loss(synthetic_logits, target)
    dice = dice_loss(softmax(synthetic_logits)[..., 1], target)
    return beta1 * ce + beta2 * dice


@dataclass
class LossSpec:
    """Strategy name plus every weight the strategies can consume."""

    strategy: str = "balance"
    lam: float = 1.0
    beta: float = 1.0
    lam1: float = 0.5
    lam2: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.5

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        for name in ("lam", "beta", "lam1", "lam2", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


@dataclass
class LossReport:
    """Named scalar loss components for one training step."""

    ce: float
    dice: float
    ce_out: Optional[float]
    dice_out: Optional[float]
    combined: float
    strategy: str
    weights: dict = field(default_factory=dict)

    def components(self):
        out = {"ce": self.ce, "dice": self.dice}
        if self.ce_out is not None:
            out["ce_out"] = self.ce_out
        if self.dice_out is not None:
            out["dice_out"] = self.dice_out
        return out


def _component_map(ce, dice, ce_out, dice_out):
    comps = {"ce": ce, "dice": dice}
    if ce_out is not None:
        comps["ce_out"] = ce_out
    if dice_out is not None:
        comps["dice_out"] = dice_out
    for name, value in comps.items():
        if not np.isfinite(value):
            raise NumericalError(f"loss component {name} is not finite: {value}")
    return comps


def combine(
    ce,
    dice,
    ce_out=None,
    dice_out=None,
    *,
    strategy="balance",
    lam=1.0,
    beta=1.0,
    lam1=0.5,
    lam2=0.5,
    beta1=0.5,
    beta2=0.5,
):
    """Combine components into one objective under the given strategy.

    Returns ``(combined, grad_weights, applied_strategy)`` where
    ``grad_weights`` maps each present component to the constant multiplier
    it receives in the combined objective. ``applied_strategy`` differs from
    the request only when pareto falls back to norm because the primary
    cross-entropy term is zero.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    comps = _component_map(ce, dice, ce_out, dice_out)

    applied = strategy
    if strategy == "pareto" and ce == 0.0:
        logger.warning("pareto primary component is zero; falling back to norm")
        applied = "norm"

    if applied == "balance":
        weights = {"ce": lam * lam1, "dice": lam * lam2}
        if "ce_out" in comps:
            weights["ce_out"] = beta * beta1
        if "dice_out" in comps:
            weights["dice_out"] = beta * beta2
    elif applied == "norm":
        # detached-magnitude normalization; the max() floor guards zeros
        weights = {name: 1.0 / max(abs(value), NORM_EPS) for name, value in comps.items()}
    else:  # pareto
        weights = {"ce": 1.0}
        for name, value in comps.items():
            if name == "ce":
                continue
            ratio = abs(value / ce)
            weights[name] = 1.0 / ratio if ratio != 0.0 else 0.0

    combined = 0.0
    for name, value in comps.items():
        combined += weights[name] * value
    return combined, weights, applied
