"""Command-line experiment runner.

Five subcommands:

  train     one prune/retrain run; history CSV + per-iteration checkpoints
  sweep     train across seeds and an optional config grid; combined CSV
  hessian   curvature report for saved checkpoints
  sample    draws, sample-quality metrics, and density grids from a checkpoint
  classify  neural-ODE classifier run with boundary/field/trajectory exports

Configuration comes from per-dataset defaults, an optional JSON file
(--config), and repeatable dotted overrides (--set train.lr=0.005). Every
command writes its artifacts (CSV + JSON sidecars + PNG figures) under the
configured output directory. Exit status: 0 ok, 2 usage, 3 bad config,
4 missing/unreadable checkpoint, 5 training or integration failure.
FLOWPRUNE_WORKERS bounds the sweep's process pool.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import cnf, data, odeint, prune, rng
from .config import (ConfigError, config_from_doc, config_to_doc, load_config,
                     parse_override, with_train_seed)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_TRAINING = 5

CKPT_PATTERN = re.compile(r"ckpt_iter_(\d+)\.ckpt$")


# ---------------------------------------------------------------------------
# one training job (also the sweep worker; must stay picklable)


def _splits_for(cfg):
    ds = data.make_dataset(cfg.dataset.kind, cfg.dataset.n, cfg.dataset.seed,
                           **cfg.dataset.geometry)
    return data.split(ds, cfg.dataset.fractions, seed=cfg.dataset.seed)


def _latest_checkpoint(out_dir: Path):
    best = None
    for p in out_dir.glob("ckpt_iter_*.ckpt"):
        m = CKPT_PATTERN.search(p.name)
        if m:
            k = int(m.group(1))
            if best is None or k > best[0]:
                best = (k, p)
    return best


def run_train_job(cfg_doc: dict, seed: int, out_dir: str) -> dict:
    """Train one seed under cfg_doc, resumable from its own checkpoints.

    Returns a summary dict; writes history.csv, ckpt_iter_*.ckpt, best.ckpt,
    and done.json under out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = with_train_seed(config_from_doc(cfg_doc), seed)
    doc = config_to_doc(cfg)
    done_path = out / "done.json"
    if done_path.exists():
        with open(done_path) as fh:
            return json.load(fh)

    splits = _splits_for(cfg)
    start_iter = 0
    history = None
    latest = _latest_checkpoint(out)
    if latest is not None:
        k, p = latest
        saved = ckpt_mod.load_checkpoint(str(p))
        model = ckpt_mod.model_from_checkpoint(saved)
        history = saved.history
        start_iter = k + 1
    else:
        model = cnf.make_flow(cfg.model, seed=seed, solver=cfg.solver,
                              divergence=cfg.divergence)

    # sparse_flow_train appends into this same object, so the callback sees
    # every row up to and including the iteration being checkpointed
    live_history = history if history is not None else prune.PruneHistory()

    def on_iteration(it, snapshot, record, adam_state):
        streams = {
            "next_batch": rng.stream(seed, "batch", it + 1, 0).state(),
            "next_hutch": rng.stream(seed, "hutch", it + 1, 0, 0).state(),
        }
        ck = ckpt_mod.Checkpoint(
            config=doc, iteration=it,
            params=snapshot.params.values, mask=snapshot.mask.bits,
            adam_m=None if adam_state is None else adam_state.m,
            adam_v=None if adam_state is None else adam_state.v,
            adam_t=0 if adam_state is None else adam_state.t,
            history=prune.PruneHistory(rows=list(live_history.rows)),
            streams=streams)
        ckpt_mod.save_checkpoint(ck, str(out / f"ckpt_iter_{it:03d}.ckpt"))

    _, _, hist, _ = prune.sparse_flow_train(
        model, splits, cfg.train, cfg.prune, on_iteration=on_iteration,
        start_iter=start_iter, history=live_history)

    hist.to_csv(str(out / "history.csv"), zero_seconds=cfg.deterministic)
    finite = [(r.val_nll, r.iter) for r in hist.rows if not math.isnan(r.val_nll)]
    if not finite:
        raise prune.NonFiniteGradientError("no finite validation NLL recorded")
    best_iter = min(finite)[1]
    best_ck = ckpt_mod.load_checkpoint(str(out / f"ckpt_iter_{best_iter:03d}.ckpt"))
    best_ck.history = hist
    ckpt_mod.save_checkpoint(best_ck, str(out / "best.ckpt"))
    summary = {
        "seed": int(seed),
        "best_iter": int(best_iter),
        "best_val_nll": float(min(finite)[0]),
        "rows": len(hist.rows),
        "out_dir": str(out),
    }
    with open(done_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _run_train_job_star(args):
    return run_train_job(*args)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config, kind=args.kind, overrides=args.set or [])
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    seed = cfg.train.seed if args.seed is None else args.seed
    summary = run_train_job(config_to_doc(cfg), seed, cfg.out_dir)
    from . import plots

    plots.history_figure(str(Path(cfg.out_dir) / "history.csv"),
                         str(Path(cfg.out_dir) / "history.png"))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _grid_cells(grid_specs):
    """--grid a.b=1|2 --grid c=x|y -> [{'a.b': 1, 'c': 'x'}, ...]"""
    axes = []
    for text in grid_specs:
        if "=" not in text:
            raise ConfigError(f"grid axis {text!r} is not path=v1|v2|...")
        path, raw = text.split("=", 1)
        values = []
        for piece in raw.split("|"):
            try:
                values.append(json.loads(piece))
            except json.JSONDecodeError:
                values.append(piece)
        if not values:
            raise ConfigError(f"grid axis {text!r} has no values")
        axes.append((path.strip(), values))
    cells = []
    for combo in product(*(vals for _, vals in axes)):
        cells.append({path: v for (path, _), v in zip(axes, combo)})
    return cells or [{}]


def _cell_name(cell: dict) -> str:
    if not cell:
        return "base"
    parts = []
    for k in sorted(cell):
        v = str(cell[k]).replace("/", "-")
        parts.append(f"{k.split('.')[-1]}-{v}")
    return "_".join(re.sub(r"[^A-Za-z0-9.+-]+", "-", p) for p in parts)


def assemble_sweep_csv(seed_dirs: dict, path: str) -> None:
    """Wide per-iteration table: one test-NLL column per seed, plus mean
    and median. Rows cover iterations present in every seed's history."""
    import csv

    histories = {s: prune.PruneHistory.from_csv(str(Path(d) / "history.csv"))
                 for s, d in sorted(seed_dirs.items())}
    common = None
    for h in histories.values():
        iters = {r.iter for r in h.rows if not math.isnan(r.test_nll)}
        common = iters if common is None else (common & iters)
    common = sorted(common or [])
    seeds = sorted(histories)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "prune_ratio", "params_remaining"]
                   + [f"test_nll_s{s}" for s in seeds]
                   + ["test_nll_mean", "test_nll_median"])
        for it in common:
            rows = {s: next(r for r in h.rows if r.iter == it)
                    for s, h in histories.items()}
            any_row = rows[seeds[0]]
            nlls = [rows[s].test_nll for s in seeds]
            w.writerow([it, repr(float(any_row.prune_ratio)),
                        any_row.params_remaining]
                       + [repr(float(v)) for v in nlls]
                       + [repr(float(np.mean(nlls))),
                          repr(float(np.median(nlls)))])


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, kind=args.kind, overrides=args.set or [])
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    # sweeps visit every prune level, so the early-stop guard is disabled
    cfg = replace(cfg, prune=replace(cfg.prune, patience=cfg.prune.max_iters))
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    else:
        seeds = [cfg.train.seed + i for i in range(3)]
    if not seeds:
        raise ConfigError("sweep needs at least one seed")

    cells = _grid_cells(args.grid or [])
    jobs = []
    cell_dirs = {}
    for cell in cells:
        name = _cell_name(cell)
        cell_overrides = [f"{k}={json.dumps(v)}" for k, v in cell.items()]
        cell_cfg = load_config(args.config, kind=args.kind,
                               overrides=(args.set or []) + cell_overrides)
        cell_cfg = replace(cell_cfg, prune=replace(cell_cfg.prune,
                                                   patience=cell_cfg.prune.max_iters))
        base = Path(cfg.out_dir) if len(cells) == 1 else Path(cfg.out_dir) / name
        cell_dirs[name] = {s: str(base / f"seed_{s}") for s in seeds}
        doc = config_to_doc(cell_cfg)
        jobs += [(doc, s, cell_dirs[name][s]) for s in seeds]

    workers = int(os.environ.get("FLOWPRUNE_WORKERS", "0")) or (os.cpu_count() or 1)
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        results = [_run_train_job_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_train_job_star, jobs))

    from . import plots

    for name, seed_dirs in cell_dirs.items():
        base = Path(cfg.out_dir) if len(cells) == 1 else Path(cfg.out_dir) / name
        sweep_csv = base / "sweep.csv"
        assemble_sweep_csv(seed_dirs, str(sweep_csv))
        plots.sweep_figure(str(sweep_csv), str(base / "nll_vs_ratio.png"))
    print(json.dumps({"jobs": len(results), "cells": len(cells),
                      "seeds": seeds, "out_dir": cfg.out_dir}, sort_keys=True))
    return EXIT_OK


def cmd_hessian(args) -> int:
    from . import hessian as hess_mod
    from . import plots

    out = Path(args.out or "runs/hessian")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.checkpoints:
        saved = ckpt_mod.load_checkpoint(path)
        model = ckpt_mod.model_from_checkpoint(saved)
        cfg = config_from_doc(saved.config)
        splits = _splits_for(cfg)
        tag = args.tag_prefix + Path(path).stem
        report = hess_mod.hessian_report(
            model, splits[0].points, tag=tag,
            n_probes=args.probes, fd_step=args.fd_step,
            power_iters=args.power_iters, seed=args.seed,
            solver_step=args.solver_step)
        rows.append(report)
        print(f"{tag}: lambda_max={report.lambda_max:.6g} "
              f"lambda_min={report.lambda_min:.6g} trace={report.trace:.6g}")
    csv_path = out / "hessian.csv"
    hess_mod.reports_to_csv(rows, str(csv_path))
    hess_mod.reports_to_csv(hess_mod.normalize_reports(rows),
                            str(out / "hessian_normalized.csv"))
    plots.hessian_figure(str(csv_path), str(out / "hessian.png"))
    return EXIT_OK


def cmd_sample(args) -> int:
    from . import eval as eval_mod
    from . import plots

    saved = ckpt_mod.load_checkpoint(args.checkpoint)
    model = ckpt_mod.model_from_checkpoint(saved)
    cfg = config_from_doc(saved.config)
    out = Path(args.out or Path(args.checkpoint).parent / "samples")
    out.mkdir(parents=True, exist_ok=True)

    draws = cnf.sample(model, args.n, seed=args.seed)
    eval_mod.points_to_csv(draws, str(out / "samples.csv"))

    dataset = data.make_dataset(cfg.dataset.kind, cfg.dataset.n,
                                cfg.dataset.seed, **cfg.dataset.geometry)
    quality = {"n": int(args.n), "seed": int(args.seed)}
    if dataset.mode_centers is not None:
        quality.update(eval_mod.quality_report(draws, dataset.mode_centers,
                                               dataset.mode_sigma))
    test_nll, _ = cnf.nll_with_cost(model, data.split(
        dataset, cfg.dataset.fractions, seed=cfg.dataset.seed)[2].points)
    quality["test_nll"] = float(test_nll)
    with open(out / "quality.json", "w") as fh:
        json.dump(quality, fh, indent=2, sort_keys=True)

    spec = eval_mod.GridSpec(x_range=(-args.extent, args.extent),
                             y_range=(-args.extent, args.extent),
                             resolution=args.grid)
    grid = eval_mod.export_density_grid(model, spec, str(out / "density.csv"))
    plots.samples_figure(dataset.points, draws, str(out / "samples.png"))
    plots.density_figure(grid, str(out / "density.png"))
    print(json.dumps(quality, sort_keys=True))
    return EXIT_OK


def cmd_classify(args) -> int:
    from . import eval as eval_mod
    from . import plots

    cfg = load_config(args.config, kind=args.kind or "moons",
                      overrides=args.set or [])
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    seed = cfg.train.seed if args.seed is None else args.seed
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = eval_mod.run_classifier_job(config_to_doc(cfg), seed, str(out))

    boundary = eval_mod.load_grid_csv(str(out / "boundary.csv"))
    plots.boundary_figure(boundary, str(out / "boundary.png"))
    plots.trajectory_figure(str(out / "trajectories.csv"),
                            str(out / "trajectories.png"))
    plots.field_figure(str(out / "field.csv"), str(out / "field.png"))
    plots.history_figure(str(out / "history.csv"), str(out / "history.png"),
                         ylabel="cross-entropy")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="flowprune",
        description="Train, prune, and analyze continuous normalizing flows "
                    "on 2D synthetic data.")
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--kind", help="dataset kind seeding the defaults",
                       choices=list(data.KINDS))
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="dotted config override, e.g. train.lr=0.005")
        p.add_argument("--out", help="output directory (overrides config)")

    p = sub.add_parser("train", help="one prune/retrain training run")
    common(p)
    p.add_argument("--seed", type=int, help="training seed (default from config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="train across seeds and a config grid")
    common(p)
    p.add_argument("--seeds", help="comma list, default: seed, seed+1, seed+2")
    p.add_argument("--grid", action="append", metavar="PATH=V1|V2",
                   help="grid axis over config values (repeatable)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("hessian", help="curvature report for checkpoints")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files")
    p.add_argument("--out", help="output directory")
    p.add_argument("--probes", type=int, default=32,
                   help="Hutchinson probes for the trace")
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--power-iters", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--solver-step", type=float, default=0.2,
                   help="fixed rk4 step used for curvature evaluations")
    p.add_argument("--tag-prefix", default="")
    p.set_defaults(fn=cmd_hessian)

    p = sub.add_parser("sample", help="draws + quality metrics from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--extent", type=float, default=6.0,
                   help="density grid half-width")
    p.add_argument("--grid", type=int, default=120, help="density grid resolution")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("classify", help="neural-ODE classifier on labeled data")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_classify)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"flowprune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"flowprune: missing file: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ckpt_mod.CheckpointError as exc:
        print(f"flowprune: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (odeint.IntegrationError, prune.NonFiniteGradientError,
            prune.PruneError) as exc:
        print(f"flowprune: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
