"""Per-sample CE / GCE losses and the relative-difficulty reweighting factor.

All functions accept either a single probability row with an integer label or
a (n, C) matrix with a label vector, and return a scalar or (n,) array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import softmax


@dataclass(frozen=True)
class LossConfig:
    q: float = 0.7
    prob_floor: float = 1e-12
    rw_eps: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.prob_floor <= 0 or self.rw_eps <= 0:
            raise ValueError("prob_floor and rw_eps must be positive")


DEFAULT = LossConfig()


def _label_prob(probs, labels, floor: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n_cls = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise ValueError(f"label out of range for {n_cls} classes")
    if probs.ndim == 1:
        p = probs[int(labels)]
    else:
        p = probs[np.arange(len(probs)), labels]
    return np.clip(p, floor, 1.0)


def cross_entropy(probs, labels, prob_floor: float = DEFAULT.prob_floor):
    """-ln p_label with p clamped to [prob_floor, 1]."""
    return -np.log(_label_prob(probs, labels, prob_floor))


def gce(probs, labels, q: float = DEFAULT.q, prob_floor: float = DEFAULT.prob_floor):
    """Generalized cross-entropy (1 - p_label**q) / q."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    return (1.0 - _label_prob(probs, labels, prob_floor) ** q) / q


def _onehot(labels, n_cls: int) -> np.ndarray:
    out = np.zeros((len(labels), n_cls))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy_logit_grad(probs: np.ndarray, labels) -> np.ndarray:
    """d CE_i / d logits_i for each row."""
    return probs - _onehot(labels, probs.shape[1])


def gce_logit_grad(probs: np.ndarray, labels, q: float = DEFAULT.q) -> np.ndarray:
    """d GCE_i / d logits_i = -p_y**q * (onehot - p)."""
    py = probs[np.arange(len(probs)), labels]
    return (py ** q)[:, None] * (probs - _onehot(labels, probs.shape[1]))


def reweighting_factor(lb, ld, rw_eps: float = DEFAULT.rw_eps):
    """lb / (lb + ld); 0.5 where the denominator falls below ``rw_eps``."""
    lb = np.asarray(lb, dtype=np.float64)
    ld = np.asarray(ld, dtype=np.float64)
    if np.any(lb < 0) or np.any(ld < 0):
        raise ValueError("losses must be non-negative")
    total = lb + ld
    safe = np.where(total >= rw_eps, total, 1.0)
    r = np.where(total >= rw_eps, lb / safe, 0.5)
    return r if r.ndim else float(r)


@dataclass
class ReweightVector:
    lb: np.ndarray
    ld: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        if not len(self.lb) == len(self.ld) == len(self.r):
            raise ValueError("lb, ld and r must have equal lengths")

    def __len__(self) -> int:
        return len(self.r)

    @classmethod
    def from_losses(cls, lb, ld, rw_eps: float = DEFAULT.rw_eps) -> "ReweightVector":
        lb = np.asarray(lb, dtype=np.float64)
        ld = np.asarray(ld, dtype=np.float64)
        return cls(lb, ld, np.atleast_1d(reweighting_factor(lb, ld, rw_eps)))


def ce_loss_fn(labels, weights=None):
    """Mean (optionally weighted) CE as a logits -> (loss, grad) callable."""
    labels = np.asarray(labels)

    def fn(logits):
        p = softmax(logits)
        w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
        loss = float(np.mean(w * cross_entropy(p, labels)))
        return loss, w[:, None] * cross_entropy_logit_grad(p, labels) / len(labels)

    return fn


def gce_loss_fn(labels, q: float = DEFAULT.q):
    """Mean GCE as a logits -> (loss, grad) callable."""
    labels = np.asarray(labels)

    def fn(logits):
        p = softmax(logits)
        return float(np.mean(gce(p, labels, q))), gce_logit_grad(p, labels, q) / len(labels)

    return fn
