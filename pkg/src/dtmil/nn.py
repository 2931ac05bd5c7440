"""Numeric building blocks: activations, dense layer, logistic head and GRU cell.

Every layer has an explicit forward pass that returns a cache and a backward
pass that accumulates parameter gradients into a buffer with the same layout
as the parameters.  All functions accept an optional leading batch axis, so
``x`` may be ``[D]`` or ``[B, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, DimensionError

ACTIVATIONS = ("tanh", "identity")
INIT_SCHEMES = ("xavier_uniform", "zeros")


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    return expit(x)


class _ParamGroup:
    """Shared helpers for the parameter dataclasses."""

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)]

    def zeros_like(self):
        kwargs = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kwargs[f.name] = np.zeros_like(v) if isinstance(v, np.ndarray) else v
        return type(self)(**kwargs)

    def copy(self):
        kwargs = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kwargs[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return type(self)(**kwargs)

    def zero_(self) -> None:
        for _, a in self.arrays():
            a.fill(0.0)


@dataclass(eq=False)
class GruParams(_ParamGroup):
    """Update gate, reset gate and candidate weights; each acts on ``[h_prev, x]``."""

    W_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    b_r: np.ndarray
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = self.W_z.shape[0]
        for name in ("W_z", "W_r", "W"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape != self.W_z.shape or m.shape[1] <= H:
                raise DimensionError(f"GRU matrix {name} has shape {m.shape}, expected ({H}, {H}+D)")
        for name in ("b_z", "b_r", "b"):
            if getattr(self, name).shape != (H,):
                raise DimensionError(f"GRU bias {name} must have shape ({H},)")

    @property
    def H(self) -> int:
        return self.W_z.shape[0]

    @property
    def D(self) -> int:
        return self.W_z.shape[1] - self.W_z.shape[0]


@dataclass(eq=False)
class DenseParams(_ParamGroup):
    W_fc: np.ndarray
    b_fc: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.W_fc.ndim != 2 or self.b_fc.shape != (self.W_fc.shape[0],):
            raise DimensionError(f"dense shapes {self.W_fc.shape} / {self.b_fc.shape} are inconsistent")

    @property
    def n_in(self) -> int:
        return self.W_fc.shape[1]

    @property
    def n_out(self) -> int:
        return self.W_fc.shape[0]


@dataclass(eq=False)
class LogisticParams(_ParamGroup):
    w_out: np.ndarray
    b_out: np.ndarray  # 0-d array so it can be updated in place

    def __post_init__(self):
        self.b_out = np.asarray(self.b_out, dtype=np.float64).reshape(())
        if self.w_out.ndim != 1:
            raise DimensionError("logistic weights must be a vector")

    @property
    def n_in(self) -> int:
        return self.w_out.shape[0]


# ---------------------------------------------------------------------------
# initialisation


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _weights(rows: int, cols: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    if scheme == "zeros":
        return np.zeros((rows, cols))
    if scheme == "xavier_uniform":
        a = xavier_bound(cols, rows)
        return rng.uniform(-a, a, size=(rows, cols))
    raise ConfigError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")


def _check_widths(**widths: int) -> None:
    for name, w in widths.items():
        if int(w) <= 0:
            raise ConfigError(f"{name} must be positive, got {w}")


def init_gru(D: int, H: int, scheme: str = "xavier_uniform", rng: np.random.Generator | None = None) -> GruParams:
    _check_widths(input_width=D, hidden_width=H)
    rng = np.random.default_rng(0) if rng is None else rng
    mats = [_weights(H, H + D, scheme, rng) for _ in range(3)]
    return GruParams(W_z=mats[0], b_z=np.zeros(H), W_r=mats[1], b_r=np.zeros(H), W=mats[2], b=np.zeros(H))


def init_dense(n_in: int, n_out: int, scheme: str = "xavier_uniform", rng: np.random.Generator | None = None,
               activation: str = "tanh") -> DenseParams:
    _check_widths(input_width=n_in, output_width=n_out)
    rng = np.random.default_rng(0) if rng is None else rng
    return DenseParams(W_fc=_weights(n_out, n_in, scheme, rng), b_fc=np.zeros(n_out), activation=activation)


def init_logistic(n_in: int, scheme: str = "xavier_uniform", rng: np.random.Generator | None = None) -> LogisticParams:
    _check_widths(input_width=n_in)
    rng = np.random.default_rng(0) if rng is None else rng
    return LogisticParams(w_out=_weights(1, n_in, scheme, rng)[0], b_out=np.zeros(()))


# ---------------------------------------------------------------------------
# dense + logistic


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.n_in:
        raise DimensionError(f"dense layer expects input width {p.n_in}, got {x.shape[-1]}")
    a = x @ p.W_fc.T + p.b_fc
    return np.tanh(a) if p.activation == "tanh" else a


def dense_backward(d_out: np.ndarray, x: np.ndarray, out: np.ndarray, p: DenseParams, grads: DenseParams) -> np.ndarray:
    """Backward through ``dense_forward``; ``out`` is its returned value.

    Leading axes of ``x``/``out`` are flattened into one sample axis.
    """
    da = d_out * (1.0 - out * out) if p.activation == "tanh" else d_out
    da2 = da.reshape(-1, p.n_out)
    grads.W_fc += da2.T @ x.reshape(-1, p.n_in)
    grads.b_fc += da2.sum(axis=0)
    return da @ p.W_fc


def logistic_forward(e: np.ndarray, p: LogisticParams) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(logits, probabilities)``."""
    if e.shape[-1] != p.n_in:
        raise DimensionError(f"logistic layer expects input width {p.n_in}, got {e.shape[-1]}")
    logits = e @ p.w_out + p.b_out
    return logits, sigmoid(logits)


def logistic_backward(d_prob: np.ndarray, e: np.ndarray, prob: np.ndarray, p: LogisticParams,
                      grads: LogisticParams) -> np.ndarray:
    d_logit = d_prob * prob * (1.0 - prob)
    grads.w_out += d_logit.reshape(-1) @ e.reshape(-1, p.n_in)
    grads.b_out += d_logit.sum()
    return d_logit[..., None] * p.w_out


# ---------------------------------------------------------------------------
# GRU


class GruCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray
    hx: np.ndarray  # [h_prev, x]
    rhx: np.ndarray  # [r * h_prev, x]
    owner: int


def gru_step(x_t: np.ndarray, h_prev: np.ndarray, p: GruParams) -> tuple[np.ndarray, GruCache]:
    """One GRU update.

    z = sigmoid(W_z [h, x] + b_z), r = sigmoid(W_r [h, x] + b_r),
    h~ = tanh(W [r*h, x] + b), h_new = (1 - z) * h + z * h~
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != p.D or h_prev.shape[-1] != p.H or x_t.shape[:-1] != h_prev.shape[:-1]:
        raise DimensionError(f"gru_step got x {x_t.shape}, h {h_prev.shape} for H={p.H}, D={p.D}")
    hx = np.concatenate([h_prev, x_t], axis=-1)
    z = sigmoid(hx @ p.W_z.T + p.b_z)
    r = sigmoid(hx @ p.W_r.T + p.b_r)
    rhx = np.concatenate([r * h_prev, x_t], axis=-1)
    h_tilde = np.tanh(rhx @ p.W.T + p.b)
    h = (1.0 - z) * h_prev + z * h_tilde
    return h, GruCache(x_t, h_prev, z, r, h_tilde, hx, rhx, id(p))


def gru_step_backward(dL_dht: np.ndarray, cache: GruCache, p: GruParams, grads: GruParams) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate parameter gradients for one step; return ``(dL/dh_prev, dL/dx_t)``."""
    if cache.owner != id(p) or cache.h_prev.shape[-1] != p.H or cache.x.shape[-1] != p.D:
        raise ContractError("GRU cache was not produced by gru_step with these parameters")
    dh = np.asarray(dL_dht, dtype=np.float64)
    if dh.shape != cache.h_prev.shape:
        raise DimensionError(f"upstream gradient shape {dh.shape} does not match hidden state {cache.h_prev.shape}")
    H = p.H
    z, r, h_tilde, h_prev = cache.z, cache.r, cache.h_tilde, cache.h_prev

    dh_prev = dh * (1.0 - z)
    da_c = dh * z * (1.0 - h_tilde * h_tilde)
    da_z = dh * (h_tilde - h_prev) * z * (1.0 - z)

    d_rhx = da_c @ p.W
    dr = d_rhx[..., :H] * h_prev
    dh_prev += d_rhx[..., :H] * r
    da_r = dr * r * (1.0 - r)

    d_hx = da_z @ p.W_z + da_r @ p.W_r
    dh_prev += d_hx[..., :H]
    dx = d_rhx[..., H:] + d_hx[..., H:]

    n_hx = cache.hx.shape[-1]
    hx2 = cache.hx.reshape(-1, n_hx)
    grads.W += da_c.reshape(-1, H).T @ cache.rhx.reshape(-1, n_hx)
    grads.W_z += da_z.reshape(-1, H).T @ hx2
    grads.W_r += da_r.reshape(-1, H).T @ hx2
    grads.b += da_c.reshape(-1, H).sum(axis=0)
    grads.b_z += da_z.reshape(-1, H).sum(axis=0)
    grads.b_r += da_r.reshape(-1, H).sum(axis=0)
    return dh_prev, dx
