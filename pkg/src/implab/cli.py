"""Command line front end: one subcommand per experiment kind.

Every run reads an INI configuration (``--config``), writes schema-tagged
CSV tables plus ``summary.json`` and ``summary.md`` into ``--out``, and
exits nonzero on any hard error.  Exit codes:

    0  success
    1  any other error
    2  command-line usage
    3  unknown experiment kind
    4  malformed or invalid configuration
    5  missing input artifact
    6  input artifact fails format validation
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from implab import config as cfgmod
from implab import tables
from implab.exceptions import ConfigurationError, FormatError, ImplabError

log = logging.getLogger("implab")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_KIND, EXIT_CONFIG, EXIT_MISSING, EXIT_FORMAT = 0, 1, 2, 3, 4, 5, 6


class UnknownKindError(ConfigurationError):
    pass


class MissingInputError(ImplabError, FileNotFoundError):
    pass


# --------------------------------------------------------------------------- #
#                                  helpers                                    #
# --------------------------------------------------------------------------- #

class Context:
    """A manifest plus the output directory and a record of what was written."""

    def __init__(self, manifest: cfgmod.ExperimentManifest):
        self.manifest = manifest
        self.out = Path(manifest.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.summary: dict = {}
        self.plots = bool(manifest.section("experiment").get("plots", False))

    @property
    def seed(self) -> int:
        return self.manifest.seed

    def section(self, name: str) -> dict:
        return self.manifest.section(name)

    def table(self, name: str, schema: str, rows, meta=None, columns=None) -> Path:
        path = self.out / name
        tables.write_table(path, schema, rows, meta, columns)
        self.outputs.append(name)
        if self.plots:
            from implab.plots import render_plots
            svg = render_plots(path)
            if svg is not None:
                self.outputs.append(svg.name)
        return path

    def json(self, name: str, doc) -> Path:
        path = self.out / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.outputs.append(name)
        return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _input(ctx: Context, key: str, required: bool = True) -> Path | None:
    value = ctx.manifest.inputs.get(key)
    if value is None:
        if required:
            raise MissingInputError(f"[inputs] needs {key!r}")
        return None
    path = Path(value)
    if not path.exists():
        raise MissingInputError(f"input {key!r} not found: {path}")
    return path


def _levels(value, n: int) -> list[int]:
    if value is None:
        return list(range(n))
    levels = [int(v) for v in np.atleast_1d(value)]
    bad = [L for L in levels if not 0 <= L < n]
    if bad:
        raise ConfigurationError(f"levels {bad} outside the run's 0..{n - 1}")
    return levels


def _grid(section: dict):
    from implab.landscape import DEFAULT_GRID
    points = section.get("points")
    return DEFAULT_GRID if points is None else np.linspace(0.0, 1.0, int(points))


def _load_run(ctx: Context):
    from implab.experiments import imp_config_restore, load_imp_run
    run = load_imp_run(_input(ctx, "run"))
    return run, imp_config_restore(run.config)


def _task(ctx: Context):
    from implab.experiments import desk_task
    return desk_task(ctx.section("data"), ctx.section("model"), ctx.section("schedule"), seed=ctx.seed)


def _baseline(ctx: Context, task, replicates: int):
    from implab.train import dense_baseline
    seeds = [ctx.seed + i for i in range(replicates)]
    base = dense_baseline(task.net, task.dataset, task.schedule, replicates, seeds=seeds)
    ctx.summary["baseline"] = base.to_dict()
    return base


def _endpoints(ctx: Context, names):
    """Checkpoints named in ``[inputs]`` or levels of an ``imp`` run, with an evaluator and eps."""
    from implab.experiments import dataset_from
    from implab.io import load_checkpoint
    from implab.landscape import Evaluator
    section = ctx.section(ctx.manifest.kind)
    if "run" in ctx.manifest.inputs:
        run, _ = _load_run(ctx)
        levels = _levels(section.get("levels"), len(run.records))
        if len(levels) != len(names):
            raise ConfigurationError(f"[{ctx.manifest.kind}] levels must list {len(names)} levels")
        params = [run.records[L].params for L in levels]
        net, ds = run.task.net, run.task.dataset
        eps = run.baseline.eps if run.baseline else section.get("eps")
        threshold = run.baseline.threshold if run.baseline else None
        info = dict(levels=levels)
    else:
        ds = dataset_from(ctx.section("data"))
        net, params = None, []
        for k in names:
            ck, meta = load_checkpoint(_input(ctx, k), net)
            if net is None:
                from implab.model import ModelSpec, Network
                net = Network(ModelSpec.from_dict(meta["spec"]))
            params.append(ck.params)
        eps, threshold = section.get("eps"), None
        info = {k: str(ctx.manifest.inputs[k]) for k in names}
    return params, net, Evaluator(net, ds), eps, threshold, info


# --------------------------------------------------------------------------- #
#                                  commands                                   #
# --------------------------------------------------------------------------- #

def cmd_train(ctx: Context) -> None:
    from implab.io import save_checkpoint
    from implab.train import evaluate, initial_checkpoint, train
    task = _task(ctx)
    sec = ctx.section("train")
    T = task.schedule.total_steps
    every = int(sec.get("eval_every", max(T // 10, 1)))
    ck = initial_checkpoint(task.net, ctx.seed, data_seed=ctx.seed)
    rows = [dict(step=0, **evaluate(task.net, ck.params, task.dataset))]
    while ck.step < T:
        ck = train(task.net, task.dataset, ck, None, task.schedule, min(every, T - ck.step))
        rows.append(dict(step=ck.step, **evaluate(task.net, ck.params, task.dataset)))
    ctx.table("train.csv", "train", rows, dict(seed=ctx.seed))
    save_checkpoint(ctx.out / "model.plck", ck, task.net.spec)
    ctx.outputs.append("model.plck")
    ctx.summary["final"] = rows[-1]
    replicates = int(sec.get("replicates", 1))
    if replicates > 1:
        ctx.json("baseline.json", _baseline(ctx, task, replicates).to_dict())


def cmd_imp(ctx: Context) -> None:
    from implab.experiments import imp_config_from, save_imp_run
    from implab.imp import records_table, run_imp
    task = _task(ctx)
    sec = ctx.section("imp")
    replicates = int(sec.get("replicates", task.n_replicates))
    base = _baseline(ctx, task, replicates) if replicates > 1 else None
    config = imp_config_from(sec, task.schedule, ctx.seed)
    records = run_imp(task.net, task.dataset, config, base)
    files = save_imp_run(ctx.out, task, config, records, base)
    ctx.outputs += ["manifest.json", "task.json", files["rewind"], files["next_mask"]]
    ctx.outputs += [f for e in files["levels"] for f in (e["checkpoint"], e["mask"])]
    if base is not None:
        ctx.outputs.append("baseline.json")
    meta = dict(tau=config.tau, variant=config.variant)
    if base is not None:
        meta.update(threshold=base.threshold, eps=base.eps)
    ctx.table("imp.csv", "imp", records_table(records), meta)
    ctx.summary.update(levels=len(records), final_sparsity=records[-1].sparsity,
                       first_nonmatching=next((r.level for r in records if not r.matching), None))


def cmd_barrier(ctx: Context) -> None:
    from implab.landscape import interpolate_errors
    (a, b), _, evaluate, eps, _, info = _endpoints(ctx, ("a", "b"))
    path = interpolate_errors(a, b, evaluate, _grid(ctx.section("barrier")))
    meta = dict(barrier=path.barrier, raw_barrier=path.raw_barrier, loss_barrier=path.loss_barrier, eps=eps)
    ctx.table("path.csv", "path", path.rows(), meta)
    ctx.summary.update(info, barrier=path.barrier, loss_barrier=path.loss_barrier, eps=eps,
                       connected=None if eps is None else bool(path.barrier < eps))


def cmd_matrix(ctx: Context) -> None:
    from implab.landscape import Evaluator, barrier_matrix
    run, _ = _load_run(ctx)
    sec = ctx.section("matrix")
    levels = _levels(sec.get("levels"), len(run.records))
    evaluate = Evaluator(run.task.net, run.task.dataset)
    bm = barrier_matrix([run.records[L].params for L in levels], evaluate, _grid(sec))
    eps = run.baseline.eps if run.baseline else sec.get("eps")
    relabel = lambda rows: [dict(r, i=levels[r["i"]], j=levels[r["j"]]) for r in rows]
    ctx.table("matrix.csv", "matrix", relabel(bm.rows("barrier")), dict(eps=eps, quantity="barrier"))
    ctx.table("matrix_max.csv", "matrix", relabel(bm.rows("max_error")), dict(eps=eps, quantity="max_error"))
    adjacent = [float(bm.barrier[k, k + 1]) for k in range(len(levels) - 1)]
    ctx.summary.update(levels=levels, adjacent_barriers=adjacent, eps=eps)


def cmd_slice(ctx: Context) -> None:
    from implab.landscape import plane_slice
    (a, b, c), _, evaluate, eps, threshold, info = _endpoints(ctx, ("a", "b", "c"))
    sec = ctx.section("slice")
    threshold = sec.get("threshold", threshold)
    try:
        sl = plane_slice(a, b, c, evaluate, int(sec.get("resolution", 51)), float(sec.get("margin", 0.25)),
                         threshold)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    ctx.table("slice.csv", "slice", sl.rows(),
              dict(threshold=threshold, anchors=sl.anchor_coords.tolist(), anchor_errors=sl.anchor_errors.tolist()))
    ctx.summary.update(info, anchor_errors=sl.anchor_errors.tolist(), threshold=threshold)


def cmd_robustness(ctx: Context) -> None:
    from implab.experiments import robustness_rows
    run, config = _load_run(ctx)
    if run.baseline is None:
        raise ConfigurationError("robustness needs a run with a dense baseline")
    rows = robustness_rows(run.task, run.records, run.baseline.eps, seed=ctx.seed, config=config)
    eps = run.baseline.eps
    ctx.table("robustness.csv", "robustness", rows, dict(eps=eps))
    ctx.summary.update(eps=eps, levels=len(rows),
                       robust_matching=sum(r["perturbed_barrier"] < eps for r in rows if r["matching"]))


def cmd_spectrum(ctx: Context) -> None:
    from implab.experiments import curvature_rows, random_pruning_rows
    from implab.spectral import slq_density
    run, config = _load_run(ctx)
    sec = ctx.section("spectrum")
    levels = _levels(sec.get("levels"), len(run.records))
    iterations, probes = int(sec.get("iterations", 64)), int(sec.get("probes", 4))
    task, records = run.task, run.records
    for L in levels:
        rec = records[L]
        dens = slq_density(task.net, rec.params, task.dataset.train, rec.mask,
                           iterations=min(iterations, rec.mask.n_surviving), probes=probes, seed=ctx.seed + L)
        ctx.table(f"density_{L:02d}.csv", "density", [dict(node=n, weight=w) for n, w in zip(dens.nodes, dens.weights)],
                  dict(level=L, dim=dens.dim, iterations=dens.iterations, probes=dens.probes))
    if sec.get("ratios") is not None:
        if run.baseline is None:
            raise ConfigurationError("pruning predictions need a run with a dense baseline")
        ratios = [float(r) for r in np.atleast_1d(sec["ratios"])]
        rows, fits = random_pruning_rows(task, records, run.baseline, levels, ratios, seed=ctx.seed,
                                         iterations=iterations, probes=probes, config=config)
        ctx.table("random_pruning.csv", "random_pruning", rows, dict(threshold=run.baseline.threshold))
        ctx.json("fits.json", fits)
        agree = [r["predicted_match"] == r["measured_match"] for r in rows]
        ctx.summary["prediction_agreement"] = float(np.mean(agree)) if agree else None
    n_random = int(sec.get("curvature_directions", 0))
    if n_random:
        rows = curvature_rows(task, records, levels, n_random, seed=ctx.seed)
        ctx.table("curvature.csv", "curvature", rows)
        ctx.summary["curvature_medians"] = {
            L: dict(magnitude=float(np.median([r["curvature"] for r in rows if r["level"] == L and r["kind"] == "magnitude"])),
                    random=float(np.median([r["curvature"] for r in rows if r["level"] == L and r["kind"] == "random"])))
            for L in levels}
    ctx.summary["levels"] = levels


def cmd_theory(ctx: Context) -> None:
    from implab.spectral import QuadraticWell, phase_diagram, threshold_dimension
    sec = ctx.section("theory")
    eps, R = float(sec.get("eps", 0.5)), float(sec.get("R", 1.0))
    try:
        if "eigenvalues" in sec:
            well = QuadraticWell(np.atleast_1d(sec["eigenvalues"]).astype(np.float64), eps, R)
        elif "dim" in sec and "radius" in sec:
            well = QuadraticWell.isotropic(int(sec["dim"]), float(sec["radius"]), R, eps)
        else:
            raise ConfigurationError("[theory] needs eigenvalues, or dim and radius")
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad [theory] section: {exc}") from exc
    pred = threshold_dimension(well)
    ctx.table("theory.csv", "theory", [dict(dim=pred.dim, eps=eps, R=R, d_star=pred.d_star, f_max=pred.f_max,
                                            n_nonpositive=pred.n_nonpositive)])
    ctx.summary.update(d_star=pred.d_star, f_max=pred.f_max, caveat=pred.caveat)
    trials = int(sec.get("trials", 0))
    if trials:
        d_values = sec.get("d_values")
        d_values = None if d_values is None else [int(d) for d in np.atleast_1d(d_values)]
        pd = phase_diagram(well, d_values, trials, seed=ctx.seed, axial=bool(sec.get("axial", False)))
        ctx.table("phase.csv", "phase", pd.rows(), dict(d_star=pd.d_star, crossing=pd.crossing))
        ctx.summary.update(crossing=pd.crossing)


def cmd_adaptive(ctx: Context) -> None:
    from implab.experiments import adaptive_vs_fixed, imp_config_from
    from implab.imp import records_table
    task = _task(ctx)
    sec = dict(ctx.section("adaptive"))
    fixed_levels = int(sec.pop("fixed_levels", 10))
    max_levels = int(sec.pop("max_levels", fixed_levels))
    replicates = int(sec.pop("replicates", task.n_replicates))
    base = _baseline(ctx, task, replicates)
    config = imp_config_from(sec, task.schedule, ctx.seed)
    fixed, adaptive = adaptive_vs_fixed(task, config, base, fixed_levels, max_levels=max_levels)
    rows = [dict(level=r.level, sparsity=r.sparsity, ratio=r.ratio, sweep_ratio=r.extra.get("sweep_ratio"),
                 flagged=r.extra.get("flagged"), test_error=r.test_error, matching=r.matching) for r in adaptive]
    ctx.table("adaptive.csv", "adaptive", rows, dict(threshold=base.threshold))
    ctx.table("imp_fixed.csv", "imp", records_table(fixed), dict(threshold=base.threshold))
    ctx.summary.update(fixed=dict(levels=len(fixed) - 1, surviving=fixed[-1].mask.n_surviving,
                                  matching=fixed[-1].matching),
                       adaptive=dict(levels=len(adaptive) - 1, surviving=adaptive[-1].mask.n_surviving,
                                     matching=adaptive[-1].matching))


def cmd_cdf(ctx: Context) -> None:
    from implab.experiments import reequilibration_rows
    run, config = _load_run(ctx)
    sec = ctx.section("cdf")
    n = len(run.records)
    levels = _levels(sec.get("levels", list(range(1, n - 1)) or [0]), n)
    summary, curves = reequilibration_rows(run.task, run.records, levels, config,
                                           float(sec.get("percentile", 0.2)))
    ctx.table("cdf.csv", "cdf", curves)
    ctx.table("cdf_summary.csv", "cdf_summary", summary)
    ctx.summary.update(levels=levels, sign_test=all(r["wr"] >= r["ft"] and r["lrr"] >= r["ft"] for r in summary))


def cmd_report(ctx: Context) -> None:
    from implab.plots import render_plots
    dirs = ctx.manifest.inputs.get("dirs") or ctx.manifest.inputs.get("run")
    if dirs is None:
        raise MissingInputError("[inputs] needs dirs (one or more output directories)")
    dirs = [Path(d) for d in (dirs if isinstance(dirs, list) else [dirs])]
    lines, entries = ["# Report", ""], []
    for d in dirs:
        if not d.is_dir():
            raise MissingInputError(f"report input is not a directory: {d}")
        lines += [f"## {d.name}", ""]
        summary = d / "summary.json"
        if summary.exists():
            doc = json.loads(summary.read_text())
            lines += [f"- kind: {doc.get('kind')}"] + [f"- {k}: {json.dumps(v, sort_keys=True)}"
                                                     for k, v in sorted(doc.get("results", {}).items())]
        for csv_path in sorted(d.glob("*.csv")):
            meta, rows = tables.read_table(csv_path)
            svg = render_plots(csv_path, ctx.out / f"{d.name}_{csv_path.stem}.svg")
            entries.append(dict(dir=str(d), table=csv_path.name, schema=meta["schema"], rows=len(rows),
                                plot=None if svg is None else svg.name))
            lines.append(f"- {csv_path.name} ({meta['schema']}, {len(rows)} rows)"
                         + (f": ![{csv_path.stem}]({svg.name})" if svg is not None else ""))
            if svg is not None:
                ctx.outputs.append(svg.name)
        lines.append("")
    (ctx.out / "report.md").write_text("\n".join(lines))
    ctx.outputs.append("report.md")
    ctx.summary["tables"] = entries


COMMANDS = {
    "train": (cmd_train, "train one dense network and log its metrics"),
    "imp": (cmd_imp, "dense baseline plus iterative magnitude pruning"),
    "barrier": (cmd_barrier, "error along the segment between two solutions"),
    "matrix": (cmd_matrix, "pairwise barriers between the levels of an IMP run"),
    "slice": (cmd_slice, "error on the plane through three solutions"),
    "robustness": (cmd_robustness, "IMP step versus a matched-norm random perturbation"),
    "spectrum": (cmd_spectrum, "Hessian densities, pruning predictions and direction curvature"),
    "theory": (cmd_theory, "intersection threshold of a quadratic well and its Monte Carlo check"),
    "adaptive": (cmd_adaptive, "adaptive-ratio IMP against the fixed-ratio run"),
    "cdf": (cmd_cdf, "surviving-weight distributions after WR, LRR and FT retraining"),
    "report": (cmd_report, "render plots and a summary for output directories"),
}
assert tuple(COMMANDS) == cfgmod.KINDS


def _summary_md(kind: str, results: dict, outputs) -> str:
    lines = [f"# {kind}", ""]
    lines += [f"- {k}: {json.dumps(v, sort_keys=True, default=_json_default)}" for k, v in sorted(results.items())]
    lines += ["", "Outputs:", ""] + [f"- {o}" for o in outputs]
    return "\n".join(lines) + "\n"


def run(manifest: cfgmod.ExperimentManifest) -> Context:
    """Execute one manifest; raises on hard errors."""
    if manifest.kind not in COMMANDS:
        raise UnknownKindError(f"unknown experiment kind {manifest.kind!r}; expected one of {list(COMMANDS)}")
    ctx = Context(manifest)
    COMMANDS[manifest.kind][0](ctx)
    doc = dict(kind=manifest.kind, seed=manifest.seed, config=manifest.config, inputs=manifest.inputs,
               results=ctx.summary, outputs=ctx.outputs + ["summary.json", "summary.md"])
    (ctx.out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    (ctx.out / "summary.md").write_text(_summary_md(manifest.kind, ctx.summary, doc["outputs"]))
    return ctx


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="implab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="kind", required=True, metavar="kind")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--out", help="output directory (default: [experiment] out, else ./out)")
    common.add_argument("--seed", type=int, help="global seed (overrides [experiment] seed)")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="count", default=0)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    sub.add_parser("run", parents=[common], help="run the kind named in the configuration")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("--threads must be positive")
            import torch
            torch.set_num_threads(args.threads)
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be nonnegative")
        if args.config is not None and not args.config.exists():
            raise MissingInputError(f"configuration file not found: {args.config}")
        config = cfgmod.load(args.config) if args.config is not None else {}
        exp = config.setdefault("experiment", {})
        if args.kind == "run":
            if "kind" not in exp:
                raise ConfigurationError("[experiment] must name a kind for 'run'")
            if exp["kind"] not in COMMANDS:
                raise UnknownKindError(f"unknown experiment kind {exp['kind']!r}")
        elif exp.setdefault("kind", args.kind) != args.kind:
            raise ConfigurationError(f"configuration is for {exp['kind']!r}, not {args.kind!r}")
        manifest = cfgmod.ExperimentManifest.from_config(config, args.out, args.seed)
        ctx = run(manifest)
    except UnknownKindError as exc:
        log.error("%s", exc)
        return EXIT_KIND
    except MissingInputError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_FORMAT
    except ConfigurationError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every hard error maps to a nonzero exit
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    print(ctx.out / "summary.md")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
