"""Iterative magnitude pruning with weight rewinding, LR rewinding and finetuning,
plus the adaptive-ratio variant that sizes each pruning step from the loss landscape."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from implab.data import Dataset
from implab.exceptions import ConfigurationError, NonFiniteError
from implab.landscape import Evaluator
from implab.masks import Mask, magnitude_prune, project
from implab.model import Network, ParamVector
from implab.train import Checkpoint, DenseBaseline, TrainSchedule, initial_checkpoint, train

log = logging.getLogger(__name__)

VARIANTS = ("wr", "lrr", "ft")
ADAPTIVE_GRID = tuple(k / 10 for k in range(1, 10))
ADAPTIVE_PATH = (0.0, 0.25, 0.5, 0.75, 1.0)


def is_matching(error: float, baseline_error: float, eps: float) -> bool:
    """Within ``eps`` of the dense error; the bound is inclusive."""
    return bool(error <= baseline_error + eps)


@dataclass
class ImpConfig:
    schedule: TrainSchedule
    tau: int = 0
    ratio: float = 0.2
    max_levels: int = 10
    variant: str = "wr"
    seed: int = 0
    level_noise: bool = False
    keep_momentum: bool = True
    ft_lr_factor: float = 0.01
    per_layer: bool = False

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown retraining variant {self.variant!r}")
        if not 0 <= self.tau < self.schedule.total_steps:
            raise ConfigurationError("rewind step must satisfy 0 <= tau < T")
        if not isinstance(self.ratio, str):
            ratios = np.atleast_1d(self.ratio)
            if np.any((ratios <= 0) | (ratios >= 1)):
                raise ConfigurationError("pruning ratios must lie strictly between 0 and 1")
        elif self.ratio != "adaptive":
            raise ConfigurationError(f"ratio must be a number or 'adaptive', got {self.ratio!r}")
        if self.max_levels < 0:
            raise ConfigurationError("max_levels must be >= 0")

    def ratio_at(self, level: int) -> float:
        r = np.atleast_1d(self.ratio)
        return float(r[min(level, r.size - 1)])

    def noise_seed(self, level: int) -> int:
        return self.seed + 1000 * level if self.level_noise else self.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        d["ratio"] = self.ratio if isinstance(self.ratio, (str, float, int)) else list(self.ratio)
        return d


@dataclass
class ImpLevelRecord:
    level: int
    mask: Mask = field(repr=False)
    rewind: Checkpoint = field(repr=False)
    solution: Checkpoint = field(repr=False)
    next_mask: Mask = field(repr=False)
    projection: ParamVector = field(repr=False)
    R: float
    ratio: float
    train_loss: float
    test_error: float
    matching: bool
    diverged: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def sparsity(self) -> float:
        return self.mask.sparsity

    @property
    def params(self) -> ParamVector:
        return self.solution.params

    def scalars(self) -> dict:
        d = dict(level=self.level, sparsity=self.sparsity, surviving=self.mask.n_surviving,
                 test_error=self.test_error, train_loss=self.train_loss, R=self.R, ratio=self.ratio,
                 matching=self.matching, diverged=self.diverged)
        d.update(self.extra)
        return d


def start_checkpoint(variant: str, mask: Mask, rewind: Checkpoint, previous: Checkpoint | None,
                     schedule: TrainSchedule, keep_momentum: bool = True) -> tuple[Checkpoint, int]:
    """Start state and number of steps for one retraining.

    * ``wr``:  ``m * w_tau`` at step ``tau``, trained for ``T - tau`` steps;
    * ``lrr``: ``m * w^{L-1}`` at step 0, trained for ``T`` steps;
    * ``ft``:  ``m * w^{L-1}`` at step ``T``, trained for ``T`` steps.

    LRR and FT start a fresh momentum buffer.  Level 0 (no previous
    solution) is the dense run from the rewind point for every variant.
    """
    T = schedule.total_steps
    if variant == "wr" or previous is None:
        return rewind.masked(mask, keep_momentum), T - rewind.step
    base = previous.masked(mask, keep_momentum=False)
    step = 0 if variant == "lrr" else T
    return Checkpoint(step, base.params, None, base.data_seed, dict(base.meta)), T


def variant_schedule(config: ImpConfig, level: int) -> TrainSchedule:
    if config.variant == "ft" and level > 0:
        return config.schedule.finetune(config.ft_lr_factor)
    return config.schedule


def _retrain(net, dataset, start, mask, schedule, steps, noise_seed, loss_log=None):
    try:
        return train(net, dataset, start, mask, schedule, steps, noise_seed=noise_seed, loss_log=loss_log), False
    except NonFiniteError as exc:
        log.warning("retraining diverged at step %s; keeping the last finite state", exc.step)
        last = exc.checkpoint
        return Checkpoint(last.step, mask.apply(last.params), last.momentum, last.data_seed, last.meta), True


def rewind_point(net: Network, dataset: Dataset, config: ImpConfig) -> Checkpoint:
    """``w_tau``: dense training from the seeded initialization for ``tau`` steps."""
    ck = initial_checkpoint(net, config.seed, data_seed=config.seed)
    return train(net, dataset, ck, None, config.schedule, config.tau)


def _finish_level(net, evaluate, level, mask, start, sol, ratio, baseline, diverged, config, extra=None):
    next_mask = magnitude_prune(sol.params, mask, ratio, per_layer=config.per_layer)
    proj, R = project(sol.params, next_mask)
    loss, err = evaluate(sol.params)
    if not (math.isfinite(loss) and math.isfinite(err)):
        diverged = True
    m = is_matching(err, baseline.mean_error, baseline.eps) if baseline is not None else True
    return ImpLevelRecord(level, mask, start, sol, next_mask, proj, R, ratio, loss, err,
                          m and not diverged, diverged, dict(extra or {}))


def run_imp(net: Network, dataset: Dataset, config: ImpConfig, baseline: DenseBaseline | None = None,
            rewind: Checkpoint | None = None, loss_log: list | None = None) -> list[ImpLevelRecord]:
    """Run levels ``0..max_levels`` of IMP with the configured retraining variant.

    Every level is recorded, matching or not; a diverged level is flagged
    and its last finite weights feed the next prune.  ``loss_log`` collects
    the per-batch losses of the dense level.
    """
    if config.ratio == "adaptive":
        return adaptive_ratio_imp(net, dataset, config, baseline, rewind=rewind)
    evaluate = Evaluator(net, dataset)
    rewind = rewind_point(net, dataset, config) if rewind is None else rewind
    mask = Mask.ones(net.layout)
    records, previous = [], None
    for level in range(config.max_levels + 1):
        schedule = variant_schedule(config, level)
        start, steps = start_checkpoint(config.variant, mask, rewind, previous, schedule, config.keep_momentum)
        sol, diverged = _retrain(net, dataset, start, mask, schedule, steps, config.noise_seed(level),
                                 loss_log if level == 0 else None)
        rec = _finish_level(net, evaluate, level, mask, start, sol, config.ratio_at(level), baseline,
                            diverged, config)
        records.append(rec)
        log.info("level %d sparsity %.3f error %.4f matching %s", level, rec.sparsity, rec.test_error, rec.matching)
        previous, mask = sol, rec.next_mask
    return records


def run_imp_wr(net, dataset, config: ImpConfig, baseline=None, **kw):
    return run_imp(net, dataset, replace(config, variant="wr"), baseline, **kw)


def run_imp_lrr(net, dataset, config: ImpConfig, baseline=None, **kw):
    return run_imp(net, dataset, replace(config, variant="lrr"), baseline, **kw)


def run_imp_ft(net, dataset, config: ImpConfig, baseline=None, **kw):
    return run_imp(net, dataset, replace(config, variant="ft"), baseline, **kw)


def retrain_mask_from_rewind(net: Network, dataset: Dataset, mask: Mask, rewind: Checkpoint,
                             schedule: TrainSchedule, noise_seed=None, keep_momentum=True) -> tuple[float, Checkpoint]:
    """Train ``m * w_tau`` to ``T`` and return its test error with the final checkpoint."""
    start = rewind.masked(mask, keep_momentum)
    ck = train(net, dataset, start, mask, schedule, schedule.total_steps - rewind.step, noise_seed=noise_seed)
    return net.forward_loss(ck.params, dataset.test)[1], ck


# --------------------------------------------------------------------------- #

def loss_threshold(dense_loss: float, last_epoch_losses) -> tuple[float, float]:
    """Dense train loss plus the spread of its minibatch losses over the last epoch."""
    losses = np.asarray(last_epoch_losses, dtype=np.float64)
    if losses.size < 2:
        raise ValueError("need the minibatch losses of at least two steps")
    eps_train = float(losses.std(ddof=1))
    return dense_loss + eps_train, eps_train


def sweep_ratio(net: Network, dataset: Dataset, params: ParamVector, mask: Mask, threshold: float,
                grid=ADAPTIVE_GRID, path=ADAPTIVE_PATH, per_layer=False) -> tuple[float | None, list]:
    """Largest ratio whose projection stays below ``threshold`` in train loss along the straight path."""
    best, rows = None, []
    for p in grid:
        proj, _ = project(params, magnitude_prune(params, mask, p, per_layer=per_layer))
        losses = [net.forward_loss(params.lerp(proj, g), dataset.train)[0] for g in path]
        ok = max(losses) <= threshold
        rows.append(dict(ratio=p, max_loss=max(losses), ok=ok))
        if ok:
            best = p
    return best, rows


def _ratio_for_count(n: int, target: int) -> float:
    # floor((k + 0.5) / n * n) == k for every k < n
    return (n - target + 0.5) / n


def adaptive_ratio_imp(net: Network, dataset: Dataset, config: ImpConfig, baseline: DenseBaseline | None = None,
                       rewind: Checkpoint | None = None, target_surviving: int | None = None,
                       min_ratio: float = 0.2) -> list[ImpLevelRecord]:
    """WR IMP where each level prunes ``max(p, min_ratio)`` with ``p`` from :func:`sweep_ratio`.

    The threshold is fixed once from the dense level.  With
    ``target_surviving`` the run stops as soon as the surviving count
    reaches it, and the last step is clipped so it does not overshoot.
    """
    evaluate = Evaluator(net, dataset)
    rewind = rewind_point(net, dataset, replace(config, ratio=min_ratio)) if rewind is None else rewind
    mask = Mask.ones(net.layout)
    records, threshold, eps_train = [], None, None
    spe = dataset.steps_per_epoch(config.schedule.batch_size)
    for level in range(config.max_levels + 1):
        start, steps = start_checkpoint("wr", mask, rewind, None, config.schedule, config.keep_momentum)
        loss_log = [] if level == 0 else None
        sol, diverged = _retrain(net, dataset, start, mask, config.schedule, steps, config.noise_seed(level),
                                 loss_log)
        if level == 0:
            dense_loss = net.forward_loss(sol.params, dataset.train)[0]
            threshold, eps_train = loss_threshold(dense_loss, [v for _, v in loss_log[-spe:]])
        p, sweep = sweep_ratio(net, dataset, sol.params, mask, threshold, per_layer=config.per_layer)
        flagged = p is None
        ratio = max(p if p is not None else 0.0, min_ratio)
        n = mask.n_surviving
        if target_surviving is not None and n - math.floor(ratio * n) < target_surviving < n:
            ratio = _ratio_for_count(n, target_surviving)
        extra = dict(sweep_ratio=p, flagged=flagged, threshold=threshold, eps_train=eps_train)
        rec = _finish_level(net, evaluate, level, mask, start, sol, ratio, baseline, diverged, config, extra)
        rec.extra["sweep"] = sweep
        records.append(rec)
        log.info("adaptive level %d sparsity %.3f ratio %.2f (sweep %s)", level, rec.sparsity, ratio, p)
        if target_surviving is not None and mask.n_surviving <= target_surviving:
            break
        mask = rec.next_mask
    return records


# --------------------------------------------------------------------------- #

def records_table(records) -> list[dict]:
    return [dict(level=r.level, sparsity=r.sparsity, surviving=r.mask.n_surviving, test_error=r.test_error, R=r.R,
                 ratio=r.ratio, matching=r.matching) for r in records]


def run_manifest(records, config: ImpConfig, baseline: DenseBaseline | None = None, files: dict | None = None) -> dict:
    levels = []
    for r in records:
        s = {k: v for k, v in r.scalars().items() if k != "sweep"}
        levels.append(s)
    doc = dict(config=config.to_dict(), levels=levels, files=files or {})
    if baseline is not None:
        doc["baseline"] = baseline.to_dict()
    return doc


def write_manifest(path, records, config, baseline=None, files=None) -> None:
    with open(path, "w") as fh:
        json.dump(run_manifest(records, config, baseline, files), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
