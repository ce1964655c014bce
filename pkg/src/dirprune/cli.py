"""Command-line entry point: ``dirprune <command> --config run.ini [overrides]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, load_config, parse_config
from .nn import NonFiniteError, grad_check, init_params
from .theory import FlowDivergence

OUT_ENV = "DIRPRUNE_OUT"

# flag -> config field
OVERRIDES = {
    "gamma": ("schedule.gamma", float),
    "c": ("optimizer.c", float),
    "mu": ("optimizer.mu", float),
    "schedule": ("schedule.kind", str),
    "seed_init": ("seeds.init", int),
    "seed_batch": ("seeds.batch", int),
    "epochs": ("schedule.epochs", int),
    "batch_size": ("schedule.batch_size", int),
    "optimizer": ("optimizer.kind", str),
}


def shipped_config(name):
    """Text of a config bundled with the package (``name`` without ``.ini``)."""
    return resources.files("dirprune.configs").joinpath(f"{name}.ini").read_text()


def _load(args):
    if args.config.startswith("builtin:"):
        cfg = parse_config(shipped_config(args.config.split(":", 1)[1]), source=args.config)
    else:
        cfg = load_config(args.config)
    over = {field: getattr(args, flag) for flag, (field, _) in OVERRIDES.items()
            if getattr(args, flag, None) is not None}
    return cfg.with_overrides(over) if over else cfg


def _out(args, cfg, command):
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{cfg.name}_{command}"


def cmd_train(args):
    cfg = _load(args)
    out = _out(args, cfg, "train")
    res = harness.run_experiment(cfg, out, resume=args.resume, stop_at=args.stop_at)
    last = res.rows[-1] if res.rows else {}
    print(json.dumps({"out": str(out), "step": last.get("step"), "train_loss": last.get("train_loss"),
                      "sparsity": last.get("sparsity")}))


def cmd_pair(args):
    cfg = _load(args)
    out = _out(args, cfg, "pair")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    pair = harness.paired_run(cfg, out_dir=out)
    print(json.dumps({"out": str(out), "streams_match": pair.streams_match,
                      "sgd_sparsity": pair.sgd.rows[-1]["sparsity"],
                      "grda_sparsity": pair.grda.rows[-1]["sparsity"]}))


def cmd_verify(args):
    cfg = _load(args)
    out = _out(args, cfg, "verify")
    gammas = tuple(args.gammas) if args.gammas else None
    cells = harness.verify_pipeline(cfg, out, gammas=gammas, t=args.t)
    for cell in cells:
        r = cell.report
        print(json.dumps({"gamma": r.gamma, "t": r.t, "lambda": r.lam, "residual_inf": r.residual_inf,
                          "support_match_fraction": r.support_match_fraction}))


def cmd_spectrum(args):
    cfg = _load(args)
    setup = harness.build(cfg)
    if args.checkpoint:
        _, arrays = harness.load_checkpoint(args.checkpoint)
        w = arrays["w"]
    else:
        w = setup.w0
    lm, pos = harness.spectrum_at(setup, w, top=args.top, keep_positive=args.keep_positive,
                                  method=args.method, max_steps=args.max_steps, tol=args.tol)
    out = _out(args, cfg, "spectrum")
    out.mkdir(parents=True, exist_ok=True)
    lm.to_csv(out / "spectrum_lm.csv")
    pos.to_csv(out / "spectrum_top_positive.csv", vectors_path=out / "eigenvectors_top_positive.csv")
    print(json.dumps({"largest_magnitude": lm.eigenvalues.tolist(),
                      "top_positive": pos.eigenvalues.tolist()}))


def cmd_project(args):
    cfg = _load(args)
    out = _out(args, cfg, "project")
    rows = harness.projection_series(cfg, out, every=args.every, top=args.top)
    for r in rows:
        print(json.dumps(r))


def cmd_connect(args):
    cfg = _load(args)
    out = _out(args, cfg, "connect")
    _, _, path, chord, _ = harness.connect_pipeline(cfg, out, epochs=args.curve_epochs,
                                                    lr=args.curve_lr, num_points=args.points,
                                                    resolution=args.resolution,
                                                    momentum=args.momentum)
    print(json.dumps({"out": str(out), "curve_max_loss": float(np.max(path.train_loss)),
                      "chord_max_loss": float(np.max(chord.train_loss))}))


def cmd_gradcheck(args):
    cfg = _load(args)
    setup = harness.build(cfg)
    rng = np.random.default_rng(args.seed)
    w = init_params(setup.model.spec, args.seed, scale=0.5) if args.random else setup.w0
    idx = rng.integers(0, len(setup.train), size=min(8, len(setup.train)))
    err = grad_check(setup.model, w, setup.train.subset(idx), eps=args.eps)
    print(json.dumps({"max_rel_err": float(err), "tol": args.tol, "ok": bool(err <= args.tol)}))
    return 0 if err <= args.tol else 3


def _common(p):
    p.add_argument("--config", required=True, help="config file, or builtin:<name>")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV}/<name>_<cmd>)")
    for flag, (_, typ) in OVERRIDES.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)


def make_parser():
    parser = argparse.ArgumentParser(prog="dirprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="single run with metrics and checkpoints")
    _common(p)
    p.add_argument("--resume", default=None)
    p.add_argument("--stop-at", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pair", help="paired SGD/gRDA run on a shared minibatch stream")
    _common(p)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("verify-dp", help="pruning-prediction check across a learning-rate ladder")
    _common(p)
    p.add_argument("--gammas", type=float, nargs="+", default=None)
    p.add_argument("--t", type=float, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("spectrum", help="Hessian eigenpairs at a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--top", type=int, default=30)
    p.add_argument("--keep-positive", type=int, default=10)
    p.add_argument("--method", choices=("lanczos", "dense"), default="lanczos")
    p.add_argument("--max-steps", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("project", help="top-eigenspace share of w_gRDA - w_SGD along a paired run")
    _common(p)
    p.add_argument("--every", type=int, default=None)
    p.add_argument("--top", type=int, default=None)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("connect", help="Bezier curve between the SGD and gRDA endpoints")
    _common(p)
    p.add_argument("--curve-epochs", type=int, default=10)
    p.add_argument("--curve-lr", type=float, default=None)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--resolution", type=int, default=21)
    p.add_argument("--momentum", type=float, default=0.0)
    p.set_defaults(func=cmd_connect)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random", action="store_true", help="check at random weights instead of w0")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        rc = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, FlowDivergence, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
