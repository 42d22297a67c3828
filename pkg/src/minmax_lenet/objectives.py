"""Cross-entropy plus the Min-Max penalty ``||w||_1 - ||w||_2^2`` on conv weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import CONV_WEIGHT_NAMES, LeNetParams, conv_weights_flat, logits_graph
from .tensor import Tape, Tensor, absolute, cross_entropy_from_logits, square, tsum

DIVERGENCE_LIMIT = 1e3


class DivergenceError(FloatingPointError):
    """A conv weight left the safety range, or the loss stopped being finite."""


@dataclass(frozen=True)
class RegWeights:
    lam: float = 0.0  # L1 coefficient
    mu: float = 0.0   # negative-L2 coefficient

    def __post_init__(self):
        for name in ("lam", "mu"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @property
    def active(self) -> bool:
        return self.lam != 0 or self.mu != 0


def minmax_penalty(w) -> float:
    """``sum |w_i| - sum w_i^2``, i.e. ``sum |w_i| (1 - |w_i|)``."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.abs(w).sum() - (w * w).sum())


def penalty_value(w, reg: RegWeights) -> float:
    w = np.asarray(w, dtype=np.float64)
    return reg.lam * float(np.abs(w).sum()) - reg.mu * float((w * w).sum())


def penalty_gradient(w, reg: RegWeights) -> np.ndarray:
    """Per-coordinate ``lam * sign(w) - 2 mu w`` with ``sign(0) = 0``."""
    w = np.asarray(w)
    return reg.lam * np.sign(w) - 2 * reg.mu * w


def penalty_graph(conv_weights: list[Tensor], reg: RegWeights) -> Tensor | None:
    """On-tape ``lam * ||w||_1 - mu * ||w||_2^2`` over the given tensors."""
    if not reg.active:
        return None
    terms = []
    for w in conv_weights:
        if reg.lam:
            terms.append(tsum(absolute(w)) * reg.lam)
        if reg.mu:
            terms.append(tsum(square(w)) * (-reg.mu))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def total_loss(logits, labels, params: LeNetParams, reg: RegWeights) -> float:
    """Cross-entropy plus the regularizer, evaluated in float64.

    With ``lam = mu = 0`` this returns the cross-entropy value unchanged.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    ce = float(cross_entropy_from_logits(logits, labels).data)
    if not reg.active:
        return ce
    return ce + penalty_value(conv_weights_flat(params), reg)


def loss_and_grads(params: LeNetParams, x: np.ndarray, labels, reg: RegWeights) -> tuple[float, dict[str, np.ndarray]]:
    """Objective value and gradients for every parameter array, via the tape."""
    with Tape() as tape:
        ps = {k: tape.watch(Tensor._wrap(v.copy())) for k, v in params.arrays.items()}
        logits = logits_graph(ps, Tensor._wrap(np.asarray(x, dtype=params.dtype)))
        loss = cross_entropy_from_logits(logits, labels)
        pen = penalty_graph([ps[n] for n in CONV_WEIGHT_NAMES], reg)
        if pen is not None:
            loss = loss + pen
        names = list(ps)
        grads = tape.gradient(loss, [ps[n] for n in names])
    return float(loss.data), dict(zip(names, grads))


def check_divergence(params: LeNetParams, limit: float = DIVERGENCE_LIMIT) -> None:
    w = conv_weights_flat(params)
    if not np.all(np.isfinite(w)):
        raise DivergenceError("conv weights are no longer finite")
    big = float(np.abs(w).max()) if w.size else 0.0
    if big > limit:
        raise DivergenceError(f"conv weight magnitude {big:.3g} exceeds safety limit {limit:g}")


def penalty_descent(w, reg: RegWeights, lr: float, steps: int, truncate: bool = True):
    """Plain subgradient descent on the penalty alone; yields ``w`` after each step.

    With ``truncate`` a step that would carry a coordinate across 0 stops at
    0 instead, which is where the L1 kink sits; zeros then stay put because
    their subgradient is 0. Without it, small coordinates oscillate around 0
    with amplitude ``lr * lam``.
    """
    w = np.array(w, dtype=np.float64)
    for _ in range(steps):
        new = w - lr * penalty_gradient(w, reg)
        if truncate:
            new[np.sign(new) == -np.sign(w)] = 0.0
        w = new
        yield w.copy()
