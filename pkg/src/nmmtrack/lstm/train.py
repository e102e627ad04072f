"""Mini-batch Adam training with early stopping on the validation loss."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, NumericalError
from .loss import PhysicsConstants, physics_loss
from .network import LstmWeights, backward, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    k: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0
    hidden: tuple = (128, 32)
    dtype: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # wall-clock cap in seconds; None means no cap
    time_budget: float | None = None
    # multiplier on the model-consistency terms, reached after a linear ramp
    # over ``warmup_epochs`` epochs (0 means no ramp)
    physics_weight: float = 1.0
    warmup_epochs: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.k < 0:
            raise ConfigurationError("k must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigurationError("batch_size, patience >= 1 and max_epochs >= 0 required")
        if self.physics_weight < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("physics_weight and warmup_epochs must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    def weight_at(self, epoch):
        """Physics-term multiplier used for the training batches of ``epoch`` (1-based)."""
        if self.warmup_epochs == 0:
            return self.physics_weight
        return self.physics_weight * min(1.0, (epoch - 1) / self.warmup_epochs)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    term1: float
    term2: float
    term3: float
    seconds: float


@dataclass
class TrainResult:
    weights: LstmWeights
    log: list = field(default_factory=list)
    best_epoch: int = 0
    stopped: str = "max_epochs"

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_loss", "val_loss", "term1", "term2", "term3", "seconds"])
            for r in self.log:
                wr.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.term1), repr(r.term2),
                             repr(r.term3), f"{r.seconds:.3f}"])


class Adam:
    def __init__(self, weights: LstmWeights, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.params.items()}
        self.t = 0

    def step(self, weights: LstmWeights, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            weights.params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(g.dtype)


def clip_gradients(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _loss_and_grads(w, x, y, o, stats, k, const, weight=1.0):
    out, cache = forward(x[..., None], w)
    terms, dP = physics_loss(out.astype(np.float64), y, o, stats, k, const, return_grad=True, weight=weight)
    grads = backward(dP.astype(w.dtype), cache, w)
    return terms, grads


def evaluate_loss(w, ds, k, const=PhysicsConstants(), batch_size=256, weight=1.0):
    """Window-weighted mean loss terms over a dataset."""
    tot = np.zeros(4)
    for s in range(0, len(ds), batch_size):
        sl = slice(s, s + batch_size)
        out = forward(ds.obs[sl][..., None], w, keep_cache=False)[0]
        terms = physics_loss(out.astype(np.float64), ds.targets[sl], ds.obs[sl], ds.stats, k, const,
                             weight=weight)
        n = len(ds.obs[sl])
        tot += n * np.array([terms.total, terms.term1, terms.term2, terms.term3])
    return tot / len(ds)


def train(train_ds, val_ds, cfg: TrainConfig, const=PhysicsConstants(), init: LstmWeights | None = None,
          callback=None) -> TrainResult:
    """Fit the network; returns the weights of the best validation epoch.

    The validation loss always uses the full physics weight. During a warm-up
    ramp no epoch is eligible as best and patience is not counted.
    A non-finite loss aborts training and the last good (best) weights are kept.
    """
    if train_ds.stats is not val_ds.stats and train_ds.stats.to_dict() != val_ds.stats.to_dict():
        raise ConfigurationError("train and validation sets use different standardization statistics")
    dtype = np.dtype(cfg.dtype)
    w = LstmWeights.init(cfg.seed, hidden=cfg.hidden, n_out=train_ds.targets.shape[-1], dtype=dtype) \
        if init is None else init.astype(dtype)
    opt = Adam(w, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    start = time.perf_counter()
    val0 = evaluate_loss(w, val_ds, cfg.k, const, weight=cfg.physics_weight)
    result = TrainResult(w.copy(), [EpochRecord(0, float("nan"), val0[0], *val0[1:], 0.0)], 0)
    best = val0[0]
    since_best = 0
    x_all = train_ds.obs.astype(dtype)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_ds))
        acc = np.zeros(4)
        try:
            for s in range(0, len(order), cfg.batch_size):
                ix = np.sort(order[s:s + cfg.batch_size])
                terms, grads = _loss_and_grads(w, x_all[ix], train_ds.targets[ix], train_ds.obs[ix],
                                               train_ds.stats, cfg.k, const, cfg.weight_at(epoch))
                clip_gradients(grads, cfg.clip_norm)
                opt.step(w, grads)
                acc += len(ix) * np.array([terms.total, terms.term1, terms.term2, terms.term3])
            val = evaluate_loss(w, val_ds, cfg.k, const, weight=cfg.physics_weight)
            if not np.all(np.isfinite(val)):
                raise NumericalError("non-finite validation loss")
        except NumericalError as exc:
            log.error("training aborted in epoch %d: %s", epoch, exc)
            result.stopped = "diverged"
            break
        acc /= len(order)
        rec = EpochRecord(epoch, acc[0], val[0], *acc[1:], time.perf_counter() - start)
        result.log.append(rec)
        log.info("epoch %d train %.4f val %.4f", epoch, acc[0], val[0])
        if callback is not None:
            callback(rec, w)
        if epoch <= cfg.warmup_epochs:
            pass
        elif val[0] < best or result.best_epoch < cfg.warmup_epochs:
            best, since_best = val[0], 0
            result.weights, result.best_epoch = w.copy(), epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                result.stopped = "early_stop"
                break
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            result.stopped = "time_budget"
            break
    return result
