"""DT-MIL model: GRU -> dense tanh -> logistic -> MIL aggregation.

Three variants share this code path:

* ``full``        D -> GRU(H) -> dense(M) -> logistic
* ``no_temporal`` D -> dense(M) -> logistic, applied to each x_t on its own
* ``shallow``     D -> GRU(H) -> logistic

The batched functions work on right-padded arrays ``x[B, L, D]`` with a
boolean ``mask[B, L]``; the per-bag functions are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, DataError, DimensionError
from .mil import AggregationKind, BagMask, aggregate, aggregate_backward

VARIANTS = ("full", "no_temporal", "shallow")
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    variant: str = "full"
    gru_units: int = 20
    dense_units: int = 500
    aggregation: AggregationKind = field(default_factory=AggregationKind)
    activation: str = "tanh"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if isinstance(self.aggregation, str):
            object.__setattr__(self, "aggregation", AggregationKind(self.aggregation))
        for name in ("input_dim", "gru_units", "dense_units"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def has_gru(self) -> bool:
        return self.variant != "no_temporal"

    @property
    def has_dense(self) -> bool:
        return self.variant != "shallow"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_dim": int(self.input_dim),
            "gru_units": int(self.gru_units),
            "dense_units": int(self.dense_units),
            "aggregation": self.aggregation.kind,
            "alpha": float(self.aggregation.alpha),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(
            input_dim=int(d["input_dim"]),
            variant=d["variant"],
            gru_units=int(d["gru_units"]),
            dense_units=int(d["dense_units"]),
            aggregation=AggregationKind(d["aggregation"], float(d["alpha"])),
            activation=d.get("activation", "tanh"),
        )


@dataclass(eq=False)
class ModelParams:
    arch: ModelArch
    gru: nn.GruParams | None
    dense: nn.DenseParams | None
    logistic: nn.LogisticParams

    def __post_init__(self):
        a = self.arch
        if a.has_gru != (self.gru is not None) or a.has_dense != (self.dense is not None):
            raise ConfigError(f"layer set does not match variant {a.variant!r}")
        width = a.input_dim
        if self.gru is not None:
            if (self.gru.D, self.gru.H) != (a.input_dim, a.gru_units):
                raise DimensionError("GRU shape does not match architecture")
            width = self.gru.H
        if self.dense is not None:
            if (self.dense.n_in, self.dense.n_out) != (width, a.dense_units):
                raise DimensionError("dense shape does not match architecture")
            width = self.dense.n_out
        if self.logistic.n_in != width:
            raise DimensionError("logistic width does not match architecture")

    def groups(self) -> list[tuple[str, object]]:
        out = []
        if self.gru is not None:
            out.append(("gru", self.gru))
        if self.dense is not None:
            out.append(("dense", self.dense))
        out.append(("logistic", self.logistic))
        return out

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """All learnable arrays in checkpoint order."""
        return [(f"{g}.{n}", a) for g, grp in self.groups() for n, a in grp.arrays()]

    def _map(self, fn) -> "ModelParams":
        return ModelParams(
            self.arch,
            None if self.gru is None else fn(self.gru),
            None if self.dense is None else fn(self.dense),
            fn(self.logistic),
        )

    def zeros_like(self) -> "ModelParams":
        return self._map(lambda g: g.zeros_like())

    def copy(self) -> "ModelParams":
        return self._map(lambda g: g.copy())

    def zero_(self) -> None:
        for _, a in self.tensors():
            a.fill(0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.tensors()])

    def n_params(self) -> int:
        return sum(a.size for _, a in self.tensors())


def init_model(arch: ModelArch, scheme: str = "xavier_uniform", seed: int = 0) -> ModelParams:
    """Fresh parameters; weights drawn from one seeded stream, biases zero."""
    rng = np.random.default_rng(seed)
    gru = dense = None
    width = arch.input_dim
    if arch.has_gru:
        gru = nn.init_gru(arch.input_dim, arch.gru_units, scheme, rng)
        width = arch.gru_units
    if arch.has_dense:
        dense = nn.init_dense(width, arch.dense_units, scheme, rng, arch.activation)
        width = arch.dense_units
    return ModelParams(arch, gru, dense, nn.init_logistic(width, scheme, rng))


GradBuffer = ModelParams  # a gradient buffer is a zeroed copy of the parameter layout


@dataclass(eq=False)
class BatchTrace:
    x: np.ndarray
    mask: np.ndarray
    h: np.ndarray | None  # [B, L, H]
    e: np.ndarray | None  # [B, L, M]
    logits: np.ndarray
    p: np.ndarray
    y_hat: np.ndarray
    caches: list = field(repr=False, default_factory=list)
    owner: int = 0

    def bag(self, i: int) -> "ForwardTrace":
        n = int(self.mask[i].sum())
        return ForwardTrace(
            h=None if self.h is None else self.h[i, :n],
            e=None if self.e is None else self.e[i, :n],
            logits=self.logits[i, :n],
            p=self.p[i, :n],
            y_hat=float(self.y_hat[i]),
            mask=BagMask(self.mask[i, :n]),
            batch=self,
        )


@dataclass(eq=False)
class ForwardTrace:
    """Per-flight view: hidden states, instance embeddings, instance and bag probabilities."""

    h: np.ndarray | None
    e: np.ndarray | None
    logits: np.ndarray
    p: np.ndarray
    y_hat: float
    mask: BagMask
    batch: BatchTrace = field(repr=False, default=None)


def _prepare(x, mask, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected x of shape [B, L, D], got {x.shape}")
    if x.shape[2] != params.arch.input_dim:
        raise DimensionError(f"model expects {params.arch.input_dim} input channels, got {x.shape[2]}")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask.valid if isinstance(mask, BagMask) else mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, x.shape[:2])
    if mask.shape != x.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match x {x.shape[:2]}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("every bag needs at least one valid step")
    # padding must be trailing so it can never feed back into valid steps
    if not (mask == (np.arange(x.shape[1]) < counts[:, None])).all():
        raise ContractError("mask must mark a prefix of each bag (right padding only)")
    if not np.isfinite(x[mask]).all():
        raise DataError("non-finite value in model input")
    return np.where(mask[..., None], x, 0.0), mask


def forward_batch(x, mask, params: ModelParams) -> BatchTrace:
    x, mask = _prepare(x, mask, params)
    B, L, _ = x.shape
    h = None
    caches = []
    feats = x
    if params.gru is not None:
        g = params.gru
        h = np.empty((B, L, g.H))
        ht = np.zeros((B, g.H))
        for t in range(L):
            ht, c = nn.gru_step(x[:, t], ht, g)
            h[:, t] = ht
            caches.append(c)
        feats = h
    e = None
    if params.dense is not None:
        e = nn.dense_forward(feats, params.dense)
        feats = e
    logits, p = nn.logistic_forward(feats, params.logistic)
    y_hat = aggregate(p, mask, params.arch.aggregation)
    return BatchTrace(x, mask, h, e, logits, p, y_hat, caches, id(params))


def bag_loss(y_hat, y):
    """Binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7] inside the logs."""
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    c = np.clip(np.asarray(y_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = -(y * np.log(c) + (1.0 - y) * np.log1p(-c))
    return float(out) if out.ndim == 0 else out


def bag_loss_grad(y_hat, y):
    # clamp only guards the logs; the derivative passes straight through it
    y = np.asarray(y, dtype=np.float64)
    c = np.clip(np.asarray(y_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -y / c + (1.0 - y) / (1.0 - c)


def backward_batch(trace: BatchTrace, y, params: ModelParams, grads: ModelParams, weights=None) -> float:
    """Accumulate gradients of ``sum_i weights_i * loss_i`` into ``grads``; return that weighted loss."""
    if trace.owner != id(params):
        raise ContractError("trace was produced with a different parameter set")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    B = trace.p.shape[0]
    if y.shape[0] != B:
        raise DimensionError(f"{y.shape[0]} labels for a batch of {B}")
    w = np.ones(B) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), (B,))
    losses = bag_loss(trace.y_hat, y)
    d_yhat = w * bag_loss_grad(trace.y_hat, y)
    dp = aggregate_backward(d_yhat, trace.p, trace.mask, params.arch.aggregation)

    B, L = dp.shape
    x_in = trace.h if trace.h is not None else trace.x
    feats = trace.e if trace.e is not None else x_in
    # Only steps with nonzero upstream gradient feed the head backward; under
    # max aggregation that is one step per bag.
    rows = np.flatnonzero(dp.reshape(-1))
    d_head = nn.logistic_backward(
        dp.reshape(-1)[rows], feats.reshape(B * L, -1)[rows], trace.p.reshape(-1)[rows],
        params.logistic, grads.logistic,
    )
    if params.dense is not None:
        d_head = nn.dense_backward(
            d_head, x_in.reshape(B * L, -1)[rows], trace.e.reshape(B * L, -1)[rows], params.dense, grads.dense,
        )
    if params.gru is not None:
        d_h = np.zeros((B * L, params.gru.H))
        d_h[rows] = d_head
        d_h = d_h.reshape(B, L, -1)
        dh_next = np.zeros((B, params.gru.H))
        for t in range(L - 1, -1, -1):
            dh_next, _ = nn.gru_step_backward(d_h[:, t] + dh_next, trace.caches[t], params.gru, grads.gru)
    return float(np.dot(w, losses))


def forward_bag(x, mask, params: ModelParams) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected one bag of shape [L, D], got {x.shape}")
    m = None if mask is None else np.asarray(mask.valid if isinstance(mask, BagMask) else mask)[None]
    return forward_batch(x[None], m, params).bag(0)


def backward_bag(trace: ForwardTrace, y, params: ModelParams, grads: ModelParams) -> float:
    if trace.batch is None or trace.batch.p.shape[0] != 1:
        raise ContractError("backward_bag needs the trace returned by forward_bag")
    return backward_batch(trace.batch, [y], params, grads)


def predict_batch(x, mask, params: ModelParams, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Instance and bag probabilities for many padded bags, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    p = np.zeros(x.shape[:2])
    y_hat = np.zeros(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        m = mask[s:s + chunk]
        n = int(m.sum(axis=1).max())
        tr = forward_batch(x[s:s + chunk, :n], m[:, :n], params)
        p[s:s + chunk, :n] = np.where(m[:, :n], tr.p, 0.0)
        y_hat[s:s + chunk] = tr.y_hat
    return p, y_hat


def predict_instances(x, mask, params: ModelParams) -> np.ndarray:
    """Per-step incident probabilities of one flight (inputs to the aggregation layer)."""
    return forward_bag(x, mask, params).p
