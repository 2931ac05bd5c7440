"""Mini-batch ADAM training with L2 regularisation and validation-AUC model selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .evaluate import auc
from .model import ModelArch, ModelParams, backward_batch, forward_batch, init_model, predict_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    l2_coeff: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    # re-initialise when the training loss is still near the constant predictor's
    max_restarts: int = 2
    restart_check_epoch: int = 6
    stuck_loss_ratio: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.l2_coeff < 0 or self.adam_eps <= 0:
            raise ConfigError("l2_coeff must be >= 0 and adam_eps > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, max_epochs >= 0")
        if self.max_restarts < 0 or self.restart_check_epoch < 1 or not 0 < self.stuck_loss_ratio <= 1:
            raise ConfigError("max_restarts >= 0, restart_check_epoch >= 1 and stuck_loss_ratio in (0, 1] required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def add_l2(grads: ModelParams, params: ModelParams, l2_coeff: float) -> ModelParams:
    """g += l2_coeff * theta for every tensor, biases included (gradient of l2/2 * |theta|^2)."""
    if l2_coeff:
        for (_, g), (_, p) in zip(grads.tensors(), params.tensors()):
            g += l2_coeff * p
    return grads


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    """In-place ADAM update of ``params`` and ``state``."""
    for name, g in grads.tensors():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for (_, p), (_, g), (_, m), (_, v) in zip(params.tensors(), grads.tensors(), state.m.tensors(), state.v.tensors()):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class BagSet:
    """Right-padded bags ready for batching."""

    x: np.ndarray  # [N, L_max, D]
    mask: np.ndarray  # [N, L_max]
    y: np.ndarray  # [N]
    ids: list = field(default_factory=list)

    @classmethod
    def from_bags(cls, bags, labels, ids=None) -> "BagSet":
        bags = [np.asarray(b, dtype=np.float64) for b in bags]
        if not bags:
            return cls(np.zeros((0, 1, 1)), np.zeros((0, 1), bool), np.zeros(0), [])
        L = max(len(b) for b in bags)
        D = bags[0].shape[1]
        x = np.zeros((len(bags), L, D))
        mask = np.zeros((len(bags), L), dtype=bool)
        for i, b in enumerate(bags):
            x[i, : len(b)] = b
            mask[i, : len(b)] = True
        ids = list(range(len(bags))) if ids is None else list(ids)
        return cls(x, mask, np.asarray(labels, dtype=np.float64), ids)

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.mask[idx]
        n = int(m.sum(axis=1).max())
        return self.x[idx, :n], m[:, :n], self.y[idx]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_auc: float
    val_auc: float
    is_best: bool


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochRecord]
    best_epoch: int  # 0 means the initial parameters were kept
    best_val_auc: float
    restarts: int = 0
    init_seed: int = 0
    stalled: bool = False


def evaluate_auc(params: ModelParams, data: BagSet) -> float:
    _, y_hat = predict_batch(data.x, data.mask, params)
    return auc(y_hat, data.y)


def constant_loss(labels) -> float:
    """Cross-entropy of always predicting the label mean."""
    pi = float(np.clip(np.mean(labels), 1e-7, 1 - 1e-7))
    return -(pi * math.log(pi) + (1 - pi) * math.log1p(-pi))


def attempt_seed(seed: int, attempt: int) -> int:
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), attempt]).generate_state(1)[0])


def train(train_set: BagSet, val_set: BagSet, arch: ModelArch, cfg: TrainConfig = TrainConfig(),
          init: ModelParams | None = None, on_epoch=None) -> TrainResult:
    """Train from bag labels only and return the parameters with the best validation AUC.

    ``train_loss``/``train_auc`` in the log come from the predictions made during
    the epoch (each batch scored just before its own update), which avoids a
    second pass over the training split.

    Max aggregation under strong L2 sometimes settles on the constant predictor
    right from the start.  If the training loss at ``restart_check_epoch`` is
    still above ``stuck_loss_ratio`` times the constant predictor's loss, the run
    starts over from a fresh initialisation (at most ``max_restarts`` times).
    Attempt 0 uses ``cfg.seed`` itself, so a run that never stalls is identical
    to one with restarts disabled.  The returned log is that of the last attempt.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    if train_set.x.shape[2] != arch.input_dim or val_set.x.shape[2] != arch.input_dim:
        raise ConfigError(f"data has {train_set.x.shape[2]} channels, architecture expects {arch.input_dim}")
    if cfg.max_epochs == 0:
        params = init_model(arch, seed=cfg.seed) if init is None else init.copy()
        return TrainResult(params, [], 0, float("nan"), 0, cfg.seed)
    threshold = cfg.stuck_loss_ratio * constant_loss(train_set.y)
    best = None
    for attempt in range(cfg.max_restarts + 1):
        seed = attempt_seed(cfg.seed, attempt)
        last = attempt == cfg.max_restarts or init is not None
        res = _train_once(train_set, val_set, arch, cfg, seed, init, on_epoch, None if last else threshold)
        res.restarts = attempt
        if best is None or res.best_val_auc > best.best_val_auc:
            best = res
        if not res.stalled:
            return res
        log.info("training stalled near the constant predictor; restarting (attempt %d)", attempt + 1)
    return best


def _train_once(train_set, val_set, arch, cfg, seed, init, on_epoch, stall_threshold) -> TrainResult:
    params = init_model(arch, seed=seed) if init is None else init.copy()
    history: list[EpochRecord] = []
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(params)
    grads = params.zeros_like()
    best = params.copy()
    best_auc, best_epoch, stale = -math.inf, 0, 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        probs = np.zeros(n)
        scores = np.zeros(n)
        last_good = params.copy()
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, mask, y = train_set.take(idx)
            grads.zero_()
            trace = forward_batch(x, mask, params)
            # mean of per-bag gradients: learning rate does not depend on batch size
            loss = backward_batch(trace, y, params, grads, weights=1.0 / len(idx))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", last_good=last_good)
            add_l2(grads, params, cfg.l2_coeff)
            try:
                adam_step(params, grads, state, cfg)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}", last_good=last_good) from None
            probs[idx] = np.clip(trace.y_hat, 1e-7, 1 - 1e-7)
            scores[idx] = trace.y_hat
        y_all = train_set.y
        train_loss = float(np.mean(-(y_all * np.log(probs) + (1 - y_all) * np.log1p(-probs))))
        train_auc = _safe_auc(scores, y_all)
        val_auc = evaluate_auc(params, val_set)
        improved = val_auc > best_auc
        if improved:
            best_auc, best_epoch, stale = val_auc, epoch, 0
            best = params.copy()
        else:
            stale += 1
        rec = EpochRecord(epoch, train_loss, train_auc, val_auc, improved)
        history.append(rec)
        log.info("epoch %d loss %.4f train_auc %.4f val_auc %.4f%s", epoch, train_loss, train_auc, val_auc,
                 " *" if improved else "")
        if on_epoch is not None:
            on_epoch(rec, params)
        if stall_threshold is not None and epoch == cfg.restart_check_epoch and train_loss > stall_threshold:
            return TrainResult(best, history, best_epoch, best_auc, 0, seed, stalled=True)
        if stale >= min(cfg.patience, cfg.max_epochs):
            break
    return TrainResult(best, history, best_epoch, best_auc, 0, seed)


def _safe_auc(scores, labels) -> float:
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return float("nan")
    return auc(scores, labels)


LOG_COLUMNS = ("epoch", "train_loss", "train_auc", "val_auc", "is_best")


def write_log(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_auc), repr(r.val_auc), int(r.is_best)])
