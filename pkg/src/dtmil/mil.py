"""MIL aggregation: instance probabilities -> bag probability, with gradients.

Probabilities live on the last axis; any leading axes are batch axes.  Masked
(padded) positions never influence the result or receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

AGGREGATIONS = ("max", "mean", "noisy_or", "smooth_max")


@dataclass(frozen=True)
class AggregationKind:
    kind: str = "max"
    alpha: float = 20.0  # smooth_max temperature

    def __post_init__(self):
        if self.kind not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.kind!r}; choose from {AGGREGATIONS}")
        if self.kind == "smooth_max" and not self.alpha > 0:
            raise ConfigError("smooth_max needs alpha > 0")


@dataclass(frozen=True)
class BagMask:
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "valid", v)
        if not v.any(axis=-1).all():
            raise ContractError("bag mask has no valid time steps")

    @classmethod
    def of_length(cls, length: int, max_length: int | None = None) -> "BagMask":
        max_length = length if max_length is None else max_length
        return cls(np.arange(max_length) < length)

    @property
    def count(self):
        return self.valid.sum(axis=-1)


def _valid(p, mask) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    if mask is None:
        m = np.ones(p.shape, dtype=bool)
    else:
        m = np.asarray(mask.valid if isinstance(mask, BagMask) else mask, dtype=bool)
    if m.shape != p.shape:
        m = np.broadcast_to(m, p.shape)
    if not m.any(axis=-1).all():
        raise ContractError("cannot aggregate an empty bag")
    return p, m


def _as_kind(kind) -> AggregationKind:
    return kind if isinstance(kind, AggregationKind) else AggregationKind(kind)


def aggregate(p, mask=None, kind="max"):
    """Bag probability from instance probabilities ``p`` (last axis = time)."""
    p, m = _valid(p, mask)
    kind = _as_kind(kind)
    if kind.kind == "max":
        return np.where(m, p, -np.inf).max(axis=-1)
    if kind.kind == "mean":
        return np.where(m, p, 0.0).sum(axis=-1) / m.sum(axis=-1)
    if kind.kind == "noisy_or":
        # log space keeps long bags from underflowing the product
        return -np.expm1(np.where(m, np.log1p(-np.where(m, p, 0.0)), 0.0).sum(axis=-1))
    # log-mean-exp: stays <= max and does not grow with bag length
    a = kind.alpha
    top = np.where(m, p, -np.inf).max(axis=-1, keepdims=True)
    s = np.where(m, np.exp(a * (np.where(m, p, 0.0) - top)), 0.0).sum(axis=-1)
    return top[..., 0] + np.log(s / m.sum(axis=-1)) / a


def aggregate_backward(dL_dy, p, mask=None, kind="max"):
    """Gradient of the loss w.r.t. every instance probability."""
    p, m = _valid(p, mask)
    kind = _as_kind(kind)
    g = np.asarray(dL_dy, dtype=np.float64)[..., None]
    pv = np.where(m, p, 0.0)
    if kind.kind == "max":
        # np.argmax returns the first maximum: ties go to the earliest step
        idx = np.argmax(np.where(m, p, -np.inf), axis=-1)
        out = np.zeros(p.shape)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out * g
    if kind.kind == "mean":
        return np.where(m, g / m.sum(axis=-1, keepdims=True), 0.0)
    if kind.kind == "noisy_or":
        logs = np.where(m, np.log1p(-pv), 0.0)
        others = np.exp(logs.sum(axis=-1, keepdims=True) - logs)
        return np.where(m, g * others, 0.0)
    w = np.where(m, np.exp(kind.alpha * (pv - np.where(m, p, -np.inf).max(axis=-1, keepdims=True))), 0.0)
    return g * w / w.sum(axis=-1, keepdims=True)
