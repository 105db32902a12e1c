"""Optimizers, learning-rate schedules, clipping and the training loop.

Only adapter parameters (``gamma``/``lam`` or LoRA ``A``/``B``) are updated,
in place; frozen bases are read-only arrays and residual weights are never
touched. Runs are deterministic for a fixed seed.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DivergenceError, NumericalError
from .nnmodel import loss_and_grads, loss_value, trainable_parameters


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``warmup`` below 1 is a fraction of the total steps; 1 and above is a
    step count. ``steps`` overrides ``epochs`` when given.
    """

    optimizer: str = "adamw"
    lr: float = 1e-2
    weight_decay: float = 0.0
    warmup: float = 0.0
    schedule: str = "linear"
    clip_norm: float | None = 1.0
    epochs: int = 1
    steps: int | None = None
    batch_size: int = 64
    evals_per_epoch: int = 4
    eval_every: int | None = None
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("linear", "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.warmup < 0 or (self.warmup >= 1 and self.warmup != int(self.warmup)):
            raise ValueError("warmup must be a fraction in [0, 1) or a whole number of steps")
        if self.batch_size < 1 or self.epochs < 1 or (self.steps is not None and self.steps < 1):
            raise ValueError("batch_size, epochs and steps must be positive")
        self.betas = tuple(self.betas)

    def total_steps(self, n_train):
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_train / self.batch_size)

    def warmup_steps(self, total):
        if self.warmup < 1:
            return int(round(self.warmup * total))
        return int(self.warmup)


def lr_at(step, cfg, total_steps=None):
    """Learning rate at ``step`` (0-based): linear warmup, then decay to 0 at ``total_steps``."""
    total = cfg.steps if total_steps is None else total_steps
    if total is None:
        raise ValueError("total_steps is required when cfg.steps is unset")
    warm = cfg.warmup_steps(total)
    if warm > 0 and step < warm:
        return cfg.lr * step / warm
    if cfg.schedule == "constant":
        return cfg.lr
    span = total - warm
    if span <= 0:
        return cfg.lr
    progress = min(max((step - warm) / span, 0.0), 1.0)
    if cfg.schedule == "linear":
        return cfg.lr * (1.0 - progress)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads, threshold):
    """Scale all gradients by ``threshold / norm`` when their global L2 norm exceeds it."""
    norm = global_norm(grads)
    if norm <= threshold:
        return dict(grads)
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(params, grads, lr):
    for name, p in params.items():
        p -= lr * grads[name]
    return params


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state, cfg, lr=None):
    """One AdamW update with decoupled weight decay (bias-corrected moments)."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params


@dataclass
class TrainReport:
    train_losses: list
    evals: list
    best_step: int | None
    best_val_loss: float
    wall_time: float
    best_params: dict = field(default_factory=dict, repr=False)
    config: dict = field(default_factory=dict)

    @property
    def final_val_loss(self):
        return self.evals[-1]["val_loss"] if self.evals else math.nan

    def jsonl(self):
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.evals)

    def summary(self):
        return {
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss,
            "final_val_loss": self.final_val_loss,
            "final_train_loss": self.train_losses[-1] if self.train_losses else None,
            "steps": len(self.train_losses),
            "wall_time": self.wall_time,
            "config": self.config,
        }


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model, train_set, val_set, cfg, on_eval=None):
    """Train every attached adapter of ``model``; returns a :class:`TrainReport`.

    Validation runs ``evals_per_epoch`` times per epoch (or every
    ``eval_every`` steps) and after the final step; the parameters at the
    lowest validation loss are kept in ``report.best_params``.
    """
    params = trainable_parameters(model)
    if not params:
        raise ValueError("model has no attached adapters to train")
    n = train_set.size
    bs = min(cfg.batch_size, n)
    total = cfg.total_steps(n)
    per_epoch = math.ceil(n / bs)
    eval_every = cfg.eval_every or max(1, per_epoch // max(cfg.evals_per_epoch, 1))
    val_batch = val_set.batch()
    opt = OptimState.zeros_like(params) if cfg.optimizer == "adamw" else None

    train_losses, evals = [], []
    best_step, best_val, best_params = None, math.inf, {}
    start = time.perf_counter()
    step = epoch = 0
    while step < total:
        order = _epoch_order(cfg.seed, epoch, n)
        for lo in range(0, n, bs):
            if step >= total:
                break
            batch = train_set.batch(order[lo:lo + bs])
            try:
                loss, grads = loss_and_grads(model, batch)
            except NumericalError as exc:
                raise DivergenceError(str(exc), step) from exc
            if not math.isfinite(loss) or loss > cfg.divergence_threshold:
                raise DivergenceError(f"loss {loss!r} exceeds {cfg.divergence_threshold}", step)
            g = grads.trainable()
            if cfg.clip_norm is not None:
                g = clip_grad_norm(g, cfg.clip_norm)
            lr = lr_at(step, cfg, total)
            if cfg.optimizer == "sgd":
                sgd_step(params, g, lr)
            else:
                adamw_step(params, g, opt, cfg, lr)
            train_losses.append(loss)
            step += 1
            if step % eval_every == 0 or step == total:
                val = loss_value(model, val_batch)
                if not math.isfinite(val) or val > cfg.divergence_threshold:
                    raise DivergenceError(f"validation loss {val!r}", step)
                rec = {"step": step, "epoch": epoch, "lr": lr, "train_loss": loss, "val_loss": val}
                evals.append(rec)
                if on_eval is not None:
                    on_eval(rec)
                if val < best_val:
                    best_step, best_val = step, val
                    best_params = {k: p.copy() for k, p in params.items()}
        epoch += 1
    return TrainReport(train_losses, evals, best_step, best_val, time.perf_counter() - start,
                       best_params, asdict(cfg))


def sweep(run, lrs):
    """Run ``run(lr)`` for each learning rate; select by best validation loss.

    Ties go to the smaller learning rate; diverged runs are recorded as
    ``None``. Returns ``(best_lr, best_report, reports)``.
    """
    reports = {}
    for lr in sorted(lrs):
        try:
            reports[lr] = run(lr)
        except DivergenceError:
            reports[lr] = None
    ok = [lr for lr, rep in reports.items() if rep is not None]
    if not ok:
        raise DivergenceError("every learning rate in the sweep diverged", -1)
    best_lr = min(ok, key=lambda lr: (reports[lr].best_val_loss, lr))
    return best_lr, reports[best_lr], reports
