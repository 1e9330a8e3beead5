"""Command-line entry point: ``sparsemod <subcommand> [flags]``.

Exit status: 0 on success, 1 on runtime errors or failed checks, 2 on usage errors.
"""
import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .config import HYPER_KEYS, SPEC_KEYS, TRAIN_KEYS, apply_overrides, load_config, write_config
from .diagnostics import (SPARSITY_GRID, activation_sparsity, bound_terms, gradient_bound,
                          report)
from .gradients import CheckReport, DEFAULT_TOLERANCES, gradient_check
from .model import HyperParams, init_params
from .render import FrameLayout, render_frame, render_metrics
from .snapshot import make_header, read_run_log, write_run_log, RunLog
from .task import TaskSpec, build_probe_set, sample_dataset
from .training import (ATTN_MLP, RunArtifacts, TrainConfig, finetune, hyper_sweep, read_metrics_csv,
                       theory_mode, train, write_metrics_csv, write_sweep_csv)

log = logging.getLogger("sparsemod")

_FLAG_HELP = {
    "n_train": "training set size", "n_test": "test set size", "epochs": "number of epochs",
    "batch_size": "mini-batch size (0 = full batch)", "lr": "Adam learning rate",
    "mlp_lr_discount": "learning-rate multiplier for W and U", "betas": "Adam betas, e.g. '0.9 0.999'",
    "adam_eps": "Adam epsilon", "mask": "comma-separated trainable tensors from E,P,q,V,W,U (or 'all')",
    "seed": "master seed", "snapshot_every": "epochs between snapshots (0 = none)",
    "grad_log": "full_batch_norms or minibatch_norms", "check_bound": "assert the gradient bound in theory mode",
    "d": "embedding dimension", "h": "MLP hidden width", "norm_variant": "standard or smoothed",
    "L": "sequence length", "k": "sparsity index", "p": "vocabulary size",
}


def _add_config_flags(ap):
    ap.add_argument("--config", help="INI config file with [train], [hyper], [spec] sections")
    ap.add_argument("--theory-mode", action="store_true", help="freeze E and P (mask = q,V,W,U)")
    for key in TRAIN_KEYS + HYPER_KEYS + SPEC_KEYS:
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        ap.add_argument(*names, dest=f"cfg_{key}", metavar="VALUE", help=_FLAG_HELP.get(key))


class UsageError(Exception):
    pass


def _config_from_args(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        config = load_config(args.config) if args.config else TrainConfig()
        config = apply_overrides(config, overrides)
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    if args.theory_mode:
        config = theory_mode(config)
    return config


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _save_run(run, out):
    write_metrics_csv(run.metrics, os.path.join(out, "metrics.csv"))
    write_config(run.config, os.path.join(out, "config.echo"))
    rl = RunLog(make_header(run.config, run.probe))
    for s in run.snapshots:
        rl.append(s)
    write_run_log(rl, os.path.join(out, "run.jsonl"))


def _progress(every):
    def cb(row):
        if every and row.epoch % every == 0:
            log.info("epoch %d train_loss %.4f test_acc %.3f", row.epoch, row.train_loss, row.test_acc)
    return cb


def cmd_train(args):
    config = _config_from_args(args)
    out = _outdir(args.out)
    run = train(config, progress=_progress(args.log_every))
    _save_run(run, out)
    print(f"final test_acc {run.metrics[-1].test_acc:.4f} train_loss {run.metrics[-1].train_loss:.6f}")
    return 0


def _load_run(run_dir):
    """Rebuild a finished run from its directory (config.echo, metrics.csv, run.jsonl)."""
    config = load_config(os.path.join(run_dir, "config.echo"))
    metrics = read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
    rl = read_run_log(os.path.join(run_dir, "run.jsonl"))
    params = rl.snapshots[-1].params if rl.snapshots else None
    return RunArtifacts(config, metrics, rl.snapshots, params, build_probe_set(config.hyper.spec)), rl


def cmd_finetune(args):
    config = _config_from_args(args)
    out = _outdir(args.out)
    if args.from_run:
        pre, _ = _load_run(args.from_run)
        pretrained = pre.params
    else:
        pre_cfg = replace(config, epochs=args.pretrain_epochs or config.epochs, snapshot_every=0)
        pretrained = train(pre_cfg).params
    run = finetune(pretrained, args.new_p, config)
    _save_run(run, out)
    print(f"final test_acc {run.metrics[-1].test_acc:.4f}")
    return 0


def cmd_grad_check(args):
    tol = dict(DEFAULT_TOLERANCES)
    tol["closed_form_vs_backprop"] = args.engine_tol
    tol["closed_form_vs_fd"] = tol["backprop_vs_fd"] = args.fd_tol
    rep = CheckReport(tolerances=tol)
    spec = TaskSpec(L=args.L, k=args.k, p=args.p)
    for seed in range(args.seeds):
        hyper = HyperParams(d=args.d, h=args.h, spec=spec)
        params = init_params(hyper, seed)
        batch = sample_dataset(args.batch, spec, seed)
        gradient_check(params, batch, tol, step=args.step, report=rep)
    for pair, per in rep.errors.items():
        print(f"{pair:26s} " + " ".join(f"{t}={e:.2e}" for t, e in per.items()) + f"  (tol {tol[pair]:g})")
    if args.out:
        with open(os.path.join(_outdir(args.out), "grad_check.json"), "w") as fh:
            fh.write(rep.to_json())
    print("PASS" if rep.passed else f"FAIL {rep.failures()}")
    return 0 if rep.passed else 1


def cmd_bound_check(args):
    run, _ = _load_run(args.run)
    cfg = run.config
    train_set = sample_dataset(cfg.n_train, cfg.hyper.spec, cfg.seed, "data")
    failures = 0
    rows = []
    for snap in run.snapshots:
        B = float(np.max(np.abs(snap.params.E))) * args.b_scale
        rep = gradient_bound(snap.params, train_set, B=B)
        rows.append({"epoch": snap.epoch, "grad_norm": rep.grad_norm, "bound": rep.b_tilde * rep.error_term ** 0.5,
                     "slack": rep.slack})
        if not rep.holds:
            failures += 1
            print(f"epoch {snap.epoch}: grad {rep.grad_norm:.6g} > bound {rep.b_tilde * rep.error_term ** 0.5:.6g}")
    with open(os.path.join(_outdir(args.out or args.run), "bound_check.json"), "w") as fh:
        json.dump({"b_scale": args.b_scale, "theory_mode": cfg.theory_mode, "rows": rows,
                   "violations": failures}, fh, indent=2)
    print(f"{len(rows)} snapshots checked, {failures} violations")
    return 0 if failures == 0 else 1


def _parse_grid(items):
    grid = {}
    for item in items:
        key, _, vals = item.partition("=")
        if not vals:
            raise UsageError(f"grid entry {item!r} must look like key=v1,v2")
        cast = float if key in ("lr", "mlp_lr_discount") else int
        try:
            grid[key] = [cast(v) for v in vals.split(",")]
        except ValueError as exc:
            raise UsageError(f"grid entry {item!r}: {exc}") from exc
    return grid


def cmd_sweep(args):
    config = _config_from_args(args)
    out = _outdir(args.out)
    seeds = list(range(args.seeds))
    rows = hyper_sweep(_parse_grid(args.grid), seeds, config, workers=args.workers)
    write_sweep_csv(rows, seeds, os.path.join(out, "sweep.csv"))
    for r in rows:
        print(r.cell, f"mean {r.mean:.3f} std {r.std:.3f}")
    return 0


def _sparsity_job(job):
    config, grid = job
    run = train(config)
    train_set = sample_dataset(config.n_train, config.hyper.spec, config.seed, "data")
    frac = activation_sparsity(run.params, train_set, grid, config.hyper.smoothed)
    return run.metrics[-1].test_acc, list(map(float, frac))


def cmd_sparsity_sweep(args):
    config = replace(_config_from_args(args), snapshot_every=0)
    out = _outdir(args.out)
    grid = np.logspace(np.log10(args.eps_min), np.log10(args.eps_max), args.n_eps)
    jobs = [(replace(config, seed=s), grid) for s in range(args.seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sparsity_job, jobs))
    else:
        results = [_sparsity_job(j) for j in jobs]
    with open(os.path.join(out, "sparsity.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "test_acc"] + [f"eps_{e:.3e}" for e in grid])
        for s, (acc, frac) in enumerate(results):
            w.writerow([s, repr(acc)] + [repr(f) for f in frac])
    print(f"{len(results)} models, sparsity written to {out}/sparsity.csv")
    return 0


def cmd_render(args):
    run, rl = _load_run(args.run)
    out = _outdir(args.out or args.run)
    cfg = run.config
    layout = FrameLayout.from_probe(run.probe, history=[m.to_dict() for m in run.metrics],
                                    smoothed=cfg.hyper.smoothed)
    n = 0
    for snap in rl.snapshots:
        if args.every and snap.epoch % args.every and snap is not rl.snapshots[-1]:
            continue
        with open(os.path.join(out, f"frame_{snap.epoch:06d}.svg"), "w") as fh:
            fh.write(render_frame(snap, layout))
        n += 1
    with open(os.path.join(out, "metrics.svg"), "w") as fh:
        fh.write(render_metrics(run.metrics))
    print(f"wrote {n} frames and metrics.svg to {out}")
    return 0


def cmd_report(args):
    run, _ = _load_run(args.run)
    out = _outdir(args.out or args.run)
    rep = report(run)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
    print(f"drops {rep['events']['drops']} spikes {rep['events']['spikes']}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="sparsemod", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="extend the vocabulary of a trained model and keep training")
    _add_config_flags(p)
    p.add_argument("--new-p", type=int, required=True)
    p.add_argument("--from-run", help="run directory holding the pretrained model")
    p.add_argument("--pretrain-epochs", type=int, help="pretrain first when --from-run is absent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("grad-check", help="cross-check closed-form, backprop and finite-difference gradients")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--engine-tol", type=float, default=1e-10)
    p.add_argument("--fd-tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bound-check", help="check the gradient-norm bound on every snapshot of a run")
    p.add_argument("run")
    p.add_argument("--b-scale", type=float, default=1.0, help="multiply B by this factor (0.5 = violation fixture)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("sweep", help="hyperparameter sweep")
    _add_config_flags(p)
    p.add_argument("--grid", nargs="+", required=True, help="entries like lr=0.01,0.03 h=16,32")
    p.add_argument("--seeds", dest="seeds", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sparsity-sweep", help="activation sparsity over an epsilon grid for many seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", dest="seeds", type=int, default=20)
    p.add_argument("--eps-min", type=float, default=1e-5)
    p.add_argument("--eps-max", type=float, default=1e2)
    p.add_argument("--n-eps", type=int, default=29)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sparsity_sweep)

    p = sub.add_parser("render", help="write SVG frames and metrics.svg for a run")
    p.add_argument("run")
    p.add_argument("--every", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("report", help="write report.json for a run")
    p.add_argument("run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
