"""Masked SGD with momentum, learning-rate schedules and rewind checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from implab.data import Dataset
from implab.exceptions import ConfigurationError, DimensionError, NonFiniteError
from implab.masks import Mask
from implab.model import Network, ParamVector

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("constant", "step", "cosine")


@dataclass(frozen=True)
class TrainSchedule:
    total_steps: int = 2000
    lr: float = 0.1
    kind: str = "step"
    milestones: tuple = (1000, 1500)
    factor: float = 0.1
    warmup: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def lr_at(self, step: int) -> float:
        """Learning rate used for the update taking ``step`` to ``step + 1``."""
        if self.kind == "constant":
            return self.lr
        if self.kind == "step":
            return self.lr * self.factor ** sum(step >= m for m in self.milestones)
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.total_steps - self.warmup, 1)
        progress = min(max(step - self.warmup, 0) / span, 1.0)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * progress))

    @property
    def final_lr(self) -> float:
        return self.lr_at(self.total_steps - 1)

    def finetune(self, lr_factor: float = 0.01) -> "TrainSchedule":
        """Constant low-LR schedule without weight decay, as used for finetuning."""
        return replace(self, kind="constant", lr=self.lr * lr_factor, weight_decay=0.0, warmup=0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    """Training state at ``step``: weights, momentum buffer and data-order seed."""

    step: int
    params: ParamVector
    momentum: np.ndarray | None = None
    data_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.momentum is None:
            self.momentum = np.zeros(self.params.size)
        self.momentum = np.ascontiguousarray(self.momentum, dtype=np.float64)
        if self.momentum.shape != self.params.values.shape:
            raise DimensionError("momentum buffer does not match the parameters")

    def masked(self, mask: Mask | None, keep_momentum: bool = True) -> "Checkpoint":
        """Apply ``mask`` to weights (and momentum); optionally zero the momentum."""
        full = np.ones(self.params.size) if mask is None else mask.full(self.params.layout)
        mom = self.momentum * full if keep_momentum else np.zeros_like(self.momentum)
        return Checkpoint(self.step, self.params.replace(self.params.values * full), mom,
                          self.data_seed, dict(self.meta))

    def with_params(self, params: ParamVector, step: int | None = None, reset_momentum=False) -> "Checkpoint":
        mom = np.zeros(params.size) if reset_momentum else self.momentum.copy()
        return Checkpoint(self.step if step is None else step, params, mom, self.data_seed, dict(self.meta))

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.step, self.params.copy(), self.momentum.copy(), self.data_seed, dict(self.meta))


def initial_checkpoint(net: Network, seed: int | None = None, data_seed: int = 0) -> Checkpoint:
    return Checkpoint(0, net.init(seed), None, data_seed, {"init_seed": net.spec.seed if seed is None else seed})


def train(net: Network, dataset: Dataset, start: Checkpoint, mask: Mask | None, schedule: TrainSchedule,
          steps: int, noise_seed: int | None = None, loss_log: list | None = None) -> Checkpoint:
    """Run ``steps`` SGD updates from ``start`` keeping masked weights at zero.

    The learning rate and the minibatch order are functions of the absolute
    step index, so continuing from ``start.step`` reproduces an uninterrupted
    run bit for bit.  ``noise_seed`` overrides the checkpoint's data-order
    seed.  When ``loss_log`` is a list, ``(step, minibatch loss)`` pairs are
    appended to it.
    """
    params = start.params
    if params.layout != net.layout:
        raise DimensionError("checkpoint parameters do not fit the network")
    seed = start.data_seed if noise_seed is None else int(noise_seed)
    full = torch.ones(params.size, dtype=torch.float64)
    if mask is not None:
        full = torch.from_numpy(mask.full(params.layout))
        if np.any(params.values[mask.full(params.layout) == 0] != 0):
            raise ValueError("masked entries of the start parameters must be zero")
    if steps <= 0:
        return Checkpoint(start.step, params.copy(), start.momentum.copy(), seed, dict(start.meta))

    theta = torch.tensor(params.values)
    buf = torch.tensor(start.momentum) * full
    X = torch.from_numpy(dataset.X_train)
    y = torch.from_numpy(dataset.y_train)
    bs = schedule.batch_size
    spe = dataset.steps_per_epoch(bs)
    mu, wd = schedule.momentum, schedule.weight_decay
    order, order_epoch = None, None
    for step in range(start.step, start.step + steps):
        epoch, k = divmod(step, spe)
        if epoch != order_epoch:
            order = torch.from_numpy(dataset.epoch_order(seed, epoch))
            order_epoch = epoch
        idx = order[k * bs:(k + 1) * bs]
        theta.requires_grad_(True)
        loss = net.loss_t(theta, X[idx], y[idx])
        (g,) = torch.autograd.grad(loss, theta)
        theta = theta.detach()
        lv = float(loss.detach())
        if not math.isfinite(lv):
            exc = NonFiniteError(f"non-finite training loss at step {step}", step=step)
            exc.checkpoint = Checkpoint(step, params.replace(theta.numpy()), buf.numpy().copy(), seed,
                                        dict(start.meta))
            raise exc
        if loss_log is not None:
            loss_log.append((step, lv))
        if wd:
            g = g + wd * theta
        g = g * full
        if mu:
            buf.mul_(mu).add_(g)
            g = buf
        theta = theta - schedule.lr_at(step) * g
    return Checkpoint(start.step + steps, params.replace(theta.numpy()), buf.numpy().copy(), seed, dict(start.meta))


def evaluate(net: Network, params: ParamVector, dataset: Dataset) -> dict:
    train_loss, train_error = net.forward_loss(params, dataset.train)
    test_loss, test_error = net.forward_loss(params, dataset.test)
    return dict(train_loss=train_loss, train_error=train_error, test_loss=test_loss, test_error=test_error)


@dataclass
class DenseBaseline:
    mean_error: float
    eps: float
    errors: list
    seeds: list
    checkpoints: list = field(repr=False, default_factory=list)
    excluded: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    last_epoch_losses: list = field(repr=False, default_factory=list)

    @property
    def threshold(self) -> float:
        """Largest test error that still counts as matching."""
        return self.mean_error + self.eps

    def to_dict(self) -> dict:
        return dict(mean_error=self.mean_error, eps=self.eps, errors=self.errors, seeds=self.seeds,
                    excluded=self.excluded, train_losses=self.train_losses)


def dense_baseline(net: Network, dataset: Dataset, schedule: TrainSchedule, n_replicates: int = 4,
                   seeds=None) -> DenseBaseline:
    """Train independent dense replicates; their test-error std is the matching tolerance.

    Replicate ``i`` uses ``seeds[i]`` for both initialization and data order
    (default ``spec.seed + i``).
    """
    if n_replicates < 2:
        raise ConfigurationError("need at least two replicates to estimate a spread")
    seeds = list(seeds) if seeds is not None else [net.spec.seed + i for i in range(n_replicates)]
    if len(seeds) != n_replicates:
        raise ConfigurationError("one seed per replicate")
    if len(set(seeds)) < len(seeds):
        raise ConfigurationError("replicate seeds must be distinct, otherwise eps = 0")
    errors, ckpts, excluded, losses, last = [], [], [], [], []
    spe = dataset.steps_per_epoch(schedule.batch_size)
    for s in seeds:
        log_ = []
        try:
            ck = train(net, dataset, initial_checkpoint(net, s, data_seed=s), None, schedule,
                       schedule.total_steps, loss_log=log_)
        except NonFiniteError as exc:
            log.warning("replicate with seed %s diverged at step %s; excluded", s, exc.step)
            excluded.append(s)
            continue
        m = evaluate(net, ck.params, dataset)
        errors.append(m["test_error"])
        losses.append(m["train_loss"])
        ckpts.append(ck)
        last.append([v for _, v in log_[-spe:]])
    if len(errors) < 2:
        raise NonFiniteError("fewer than two replicates finished training")
    eps = float(np.std(errors, ddof=1))
    if eps == 0.0:
        raise ConfigurationError(
            "dense replicates have identical errors (eps = 0); use distinct seeds"
        )
    return DenseBaseline(float(np.mean(errors)), eps, errors, [s for s in seeds if s not in excluded],
                         ckpts, excluded, losses, last)
