"""Desk-scale experiment recipes shared by the command line and the acceptance suite.

Each recipe consumes an IMP trajectory (a list of level records) and
produces plain rows ready for :mod:`implab.tables`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from implab.data import Dataset, make_dataset
from implab.exceptions import ConfigurationError
from implab.imp import ImpConfig, ImpLevelRecord, adaptive_ratio_imp, run_imp, start_checkpoint, write_manifest
from implab.io import load_checkpoint, load_mask, save_checkpoint, save_mask
from implab.landscape import Evaluator, error_barrier, perturbation_robustness
from implab.masks import Mask, WeightCdf, magnitude_prune, project, random_prune
from implab.model import ModelSpec, Network
from implab.spectral import (direction_curvature, estimate_matching_loss_threshold, max_pruning_ratio,
                             slq_density)
from implab.train import DenseBaseline, TrainSchedule, dense_baseline, train

log = logging.getLogger(__name__)

# The fixed desk task: two noisy-label spirals and a two-hidden-layer MLP (4482 parameters).
DESK_DATA = dict(kind="two_spirals", n_train=2000, n_test=2000, noise=0.8, turns=1.5, label_noise=0.05, seed=0)
DESK_MODEL = dict(widths=(64, 64), activation="relu")
DESK_SCHEDULE = dict(total_steps=3000, lr=0.05, kind="step", milestones=(1500, 2250), factor=0.1,
                     momentum=0.9, weight_decay=1e-4, batch_size=32)


@dataclass
class Task:
    dataset: Dataset
    net: Network
    schedule: TrainSchedule
    n_replicates: int = 4
    descriptor: dict = field(default_factory=dict)


def _typed(d: dict, spec: dict) -> dict:
    out = {}
    for k, v in d.items():
        if k not in spec:
            raise ConfigurationError(f"unknown key {k!r}; expected one of {sorted(spec)}")
        conv = spec[k]
        try:
            out[k] = tuple(np.atleast_1d(v).tolist()) if conv is tuple else conv(v)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {k!r}: {v!r}") from exc
    return out


_SCHEDULE_KEYS = dict(total_steps=int, lr=float, kind=str, milestones=tuple, factor=float, warmup=int,
                      momentum=float, weight_decay=float, batch_size=int)
_MODEL_KEYS = dict(widths=tuple, activation=str, kind=str, channels=tuple, seed=int)


def schedule_from(cfg: dict | None) -> TrainSchedule:
    d = dict(DESK_SCHEDULE)
    d.update(_typed(cfg or {}, _SCHEDULE_KEYS))
    d["milestones"] = tuple(int(m) for m in d["milestones"])
    return TrainSchedule(**d)


def dataset_from(cfg: dict | None) -> Dataset:
    d = dict(DESK_DATA) if not cfg or "kind" not in cfg else {}
    d.update(cfg or {})
    try:
        if d["kind"] == "idx":
            d["files"] = list(d["files"])
        return make_dataset(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"bad [data] section: {exc}") from exc


def model_from(cfg: dict | None, dataset: Dataset, seed: int = 0) -> Network:
    d = dict(DESK_MODEL)
    d.update(_typed(cfg or {}, _MODEL_KEYS))
    kind = d.pop("kind", "mlp")
    if kind == "conv":
        shape = dataset.X_train.shape[1:]
        input_shape = shape if len(shape) == 3 else (1,) + tuple(shape)
    else:
        input_shape = (dataset.n_features,)
    d.setdefault("seed", seed)
    return Network(ModelSpec(kind=kind, input_shape=input_shape, n_classes=dataset.n_classes, **d))


def desk_task(data=None, model=None, schedule=None, seed: int = 0) -> Task:
    ds = dataset_from(data)
    net = model_from(model, ds, seed)
    return Task(ds, net, schedule_from(schedule), 4, dict(data=ds.descriptor))


def imp_config_from(cfg: dict | None, schedule: TrainSchedule, seed: int) -> ImpConfig:
    d = dict(cfg or {})
    d.pop("replicates", None)
    ratio = d.pop("ratio", 0.2)
    if not isinstance(ratio, str):
        ratio = [float(r) for r in ratio] if isinstance(ratio, list) else float(ratio)
    keys = dict(tau=int, max_levels=int, variant=str, level_noise=bool, keep_momentum=bool,
                ft_lr_factor=float, per_layer=bool)
    return ImpConfig(schedule, ratio=ratio, seed=seed, **_typed(d, keys))


def imp_config_restore(doc: dict) -> ImpConfig:
    """Inverse of :meth:`ImpConfig.to_dict`."""
    d = dict(doc)
    sd = dict(d.pop("schedule"))
    sd["milestones"] = tuple(sd["milestones"])
    return ImpConfig(TrainSchedule(**sd), **d)


# --------------------------------------------------------------------------- #
#                              run directories                                #
# --------------------------------------------------------------------------- #

def save_imp_run(out: Path, task: Task, config: ImpConfig, records, baseline: DenseBaseline | None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"rewind": "rewind.plck", "levels": []}
    save_checkpoint(out / "rewind.plck", records[0].rewind, task.net.spec, {"tau": config.tau})
    for r in records:
        ck = f"level_{r.level:02d}.plck"
        mk = f"mask_{r.level:02d}.plmk"
        save_checkpoint(out / ck, r.solution, task.net.spec, {"level": r.level})
        save_mask(out / mk, r.mask, {"level": r.level})
        files["levels"].append(dict(level=r.level, checkpoint=ck, mask=mk))
    save_mask(out / "mask_next.plmk", records[-1].next_mask, {"level": records[-1].level + 1})
    files["next_mask"] = "mask_next.plmk"
    if baseline is not None:
        (out / "baseline.json").write_text(json.dumps(baseline.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "task.json").write_text(json.dumps(dict(data=task.dataset.descriptor, model=task.net.spec.to_dict(),
                                                   schedule=task.schedule.to_dict()),
                                              indent=2, sort_keys=True) + "\n")
    write_manifest(out / "manifest.json", records, config, baseline, files)
    return files


@dataclass
class LoadedRun:
    task: Task
    config: dict
    records: list
    baseline: DenseBaseline | None


def load_imp_run(path) -> LoadedRun:
    """Rebuild level records (weights, masks, rewind point) from an ``imp`` output directory."""
    path = Path(path)
    doc = json.loads((path / "manifest.json").read_text())
    tdoc = json.loads((path / "task.json").read_text())
    ds = make_dataset(tdoc["data"])
    net = Network(ModelSpec.from_dict(tdoc["model"]))
    sd = dict(tdoc["schedule"])
    sd["milestones"] = tuple(sd["milestones"])
    task = Task(ds, net, TrainSchedule(**sd))
    rewind, _ = load_checkpoint(path / doc["files"]["rewind"], net)
    baseline = None
    if (path / "baseline.json").exists():
        b = json.loads((path / "baseline.json").read_text())
        baseline = DenseBaseline(b["mean_error"], b["eps"], b["errors"], b["seeds"], excluded=b.get("excluded", []),
                                 train_losses=b.get("train_losses", []))
    entries = doc["files"]["levels"]
    masks = [load_mask(path / e["mask"])[0] for e in entries] + [load_mask(path / doc["files"]["next_mask"])[0]]
    records = []
    for i, (e, lv) in enumerate(zip(entries, doc["levels"])):
        sol, _ = load_checkpoint(path / e["checkpoint"], net)
        mask, nxt = masks[i], masks[i + 1]
        proj, R = project(sol.params, nxt)
        records.append(ImpLevelRecord(lv["level"], mask, rewind.masked(mask), sol, nxt, proj, R, lv["ratio"],
                                      lv["train_loss"], lv["test_error"], lv["matching"], lv["diverged"]))
    return LoadedRun(task, doc["config"], records, baseline)


# --------------------------------------------------------------------------- #
#                                  recipes                                    #
# --------------------------------------------------------------------------- #

def adjacent_barriers(records, evaluate) -> list[float]:
    """Barrier between the solutions of consecutive levels; entry ``L`` joins ``L`` and ``L + 1``."""
    return [error_barrier(a.params, b.params, evaluate) for a, b in zip(records[:-1], records[1:])]


def first_nonmatching(records) -> int | None:
    return next((r.level for r in records if not r.matching), None)


def robustness_rows(task: Task, records, eps: float, seed: int = 0, evaluate=None, config: ImpConfig | None = None):
    """Per level: IMP step barrier versus the barrier of a matched-norm random perturbation.

    Level ``L`` compares ``w^L`` with ``w^{L+1}`` (trained from ``m^{L+1} w_tau``)
    and with the run trained from ``m^L w_tau + v``, ``||v|| = ||(m^{L+1} - m^L) w_tau||``.
    ``matching`` says whether ``w^{L+1}`` matches, i.e. whether the step from
    level ``L`` succeeded.
    """
    evaluate = evaluate or Evaluator(task.net, task.dataset)
    rows = []
    for r, nxt in zip(records[:-1], records[1:]):
        c = float(np.linalg.norm(r.rewind.params.values - nxt.rewind.params.values))
        noise = config.noise_seed(nxt.level) if config is not None else None
        res = perturbation_robustness(task.net, task.dataset, r.rewind, r.mask, c, task.schedule, r.params,
                                      seed=seed + 7919 * r.level, noise_seed=noise, evaluate=evaluate)
        rows.append(dict(level=r.level, sparsity=r.sparsity, radius=c,
                         imp_barrier=error_barrier(r.params, nxt.params, evaluate),
                         perturbed_barrier=res.barrier, matching=bool(nxt.matching)))
    return rows


def probe_prunings(task: Task, record: ImpLevelRecord, ratios, seed: int = 0):
    """(train loss, test error, R) of untrained magnitude and random projections of ``w^L``."""
    out = []
    for k, f in enumerate(ratios):
        for kind in ("magnitude", "random"):
            m = (magnitude_prune(record.params, record.mask, f) if kind == "magnitude"
                 else random_prune(record.params, record.mask, f, seed + k))
            proj, R = project(record.params, m)
            loss = task.net.forward_loss(proj, task.dataset.train)[0]
            err = task.net.forward_loss(proj, task.dataset.test)[1]
            out.append(dict(kind=kind, ratio=f, R=R, train_loss=loss, test_error=err))
    return out


def random_pruning_rows(task: Task, records, baseline: DenseBaseline, levels, ratios, seed: int = 0,
                        iterations: int = 64, probes: int = 4, config: ImpConfig | None = None):
    """Random-pruning cells with the predicted and the measured outcome.

    For each level, the train-loss Hessian density of ``w^L`` over the axial
    subspace and the matching loss from a linear fit over probe prunings give
    ``f_max(R)``.  Each cell randomly prunes ``w^L`` by ``ratio``; the
    prediction is ``ratio < f_max(R)`` and the measurement retrains the new
    mask from the rewind point and checks matching.
    """
    rows, fits = [], []
    for L in levels:
        rec = records[L]
        dens = slq_density(task.net, rec.params, task.dataset.train, rec.mask,
                           iterations=min(iterations, rec.mask.n_surviving), probes=probes, seed=seed + L)
        probe = probe_prunings(task, rec, ratios, seed + 100 * L)
        fit = estimate_matching_loss_threshold([p["train_loss"] for p in probe] + [rec.train_loss],
                                               [p["test_error"] for p in probe] + [rec.test_error],
                                               baseline.threshold, rec.train_loss)
        fits.append(dict(level=L, **fit.to_dict()))
        masks = [random_prune(rec.params, rec.mask, f, seed + 1000 * L + k) for k, f in enumerate(ratios)]
        Rs = [project(rec.params, m)[1] for m in masks]
        eps_train = fit.eps_train if not fit.flagged else np.nan
        if fit.flagged:
            fm = np.zeros(len(ratios))
        else:
            fm = max_pruning_ratio(dens, eps_train, ratios, Rs).f_max
        for f, m, R, fmax in zip(ratios, masks, Rs, fm):
            start, steps = start_checkpoint("wr", m, rec.rewind, None, task.schedule)
            noise = config.noise_seed(L + 1) if config is not None else None
            ck = train(task.net, task.dataset, start, m, task.schedule, steps, noise_seed=noise)
            err = task.net.forward_loss(ck.params, task.dataset.test)[1]
            rows.append(dict(level=L, ratio=float(f), R=float(R), f_max=float(fmax), predicted_match=bool(f < fmax),
                             test_error=float(err), measured_match=bool(err <= baseline.threshold)))
    return rows, fits


def curvature_rows(task: Task, records, levels, n_random: int = 20, seed: int = 0):
    """Rayleigh quotients of the magnitude-pruning direction and of matched-count random directions."""
    rows = []
    for L in levels:
        rec = records[L]
        ratio = rec.ratio
        mag = rec.params.values - rec.projection.values
        rows.append(dict(level=L, kind="magnitude", index=0,
                         curvature=direction_curvature(task.net, rec.params, mag, task.dataset.train)))
        for k in range(n_random):
            m = random_prune(rec.params, rec.mask, ratio, seed + 31 * L + k)
            v = rec.params.values - m.apply(rec.params).values
            rows.append(dict(level=L, kind="random", index=k,
                             curvature=direction_curvature(task.net, rec.params, v, task.dataset.train)))
    return rows


def reequilibration_rows(task: Task, records, levels, config: ImpConfig, percentile: float = 0.2):
    """Weight statistics after retraining one projection three ways.

    For level ``L`` the projection ``m^{L+1} w^L`` of the WR trajectory is
    retrained by WR (from ``m^{L+1} w_tau``), LRR and FT.  The threshold is
    the normalized magnitude at ``percentile`` of the projection's
    surviving weights; each retrained solution reports the fraction of its
    surviving weights strictly below it.
    """
    summary, curves = [], []
    T = task.schedule.total_steps
    for L in levels:
        rec = records[L]
        m = rec.next_mask
        proj_cdf = WeightCdf(rec.projection, m)
        threshold = proj_cdf.quantile(percentile)
        prev_support = WeightCdf(rec.projection, support=rec.mask)
        curves.append(dict(variant="projected", level=L, magnitude=0.0, cdf=float(prev_support(0.0))))
        fractions = {}
        noise = config.noise_seed(L + 1)
        for variant in ("wr", "lrr", "ft"):
            sch = task.schedule.finetune(config.ft_lr_factor) if variant == "ft" else task.schedule
            start, steps = start_checkpoint(variant, m, records[0].rewind, rec.solution, sch, config.keep_momentum)
            ck = train(task.net, task.dataset, start, m, sch, steps, noise_seed=noise)
            cdf = WeightCdf(ck.params, m)
            fractions[variant] = cdf.fraction_below(threshold)
            grid = np.quantile(cdf.values, np.linspace(0, 1, 41))
            curves += [dict(variant=variant, level=L, magnitude=float(x), cdf=float(cdf(x))) for x in grid]
        summary.append(dict(level=L, threshold=threshold, **fractions,
                            projected_zero_mass=float(prev_support(0.0)), ratio=float(rec.ratio)))
    return summary, curves


def adaptive_vs_fixed(task: Task, config: ImpConfig, baseline: DenseBaseline, fixed_levels: int,
                      fixed_records=None, max_levels: int | None = None):
    """Fixed 0.2-ratio WR run versus the adaptive run stopped at the same surviving count."""
    fixed = fixed_records
    if fixed is None:
        fixed = run_imp(task.net, task.dataset, replace(config, ratio=0.2, max_levels=fixed_levels), baseline)
    fixed = fixed[:fixed_levels + 1]
    target = fixed[-1].mask.n_surviving
    adaptive = adaptive_ratio_imp(task.net, task.dataset, replace(config, max_levels=max_levels or fixed_levels),
                                  baseline, rewind=fixed[0].rewind, target_surviving=target)
    return fixed, adaptive
