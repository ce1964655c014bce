"""Experiment orchestration: single and paired SGD/gRDA runs, metrics, checkpoints
and the verification pipelines driven by the CLI.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .connectivity import BezierCurve, chord_curve, eval_path, plane_grid, train_curve
from .nn import (Dataset, MinibatchStream, Mlp, NetworkSpec, NonFiniteError, init_params,
                 make_synthetic, next_batch)
from .optim import GrdaState, LrSchedule, TuningFn, grda_step_scheduled, lr_at, sgd_step
from .pruning import export_csv, ratio_l2_l1, score, sparsity
from .spectral import (Spectrum, TopSubspace, dense_eig, dense_hessian, hvp_oracle, lanczos_topk,
                       projection_fraction, zero_space)
from .theory import lambda_at, verify_dp

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "epoch", "train_loss", "train_acc", "test_loss", "test_acc", "sparsity",
                 "l2_l1_ratio", "l2_l1_bound", "gamma", "g_tilde"]
CKPT_MAGIC = b"DPCKPT01"


class NumericFailure(NonFiniteError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class Setup:
    model: Mlp
    train: Dataset
    test: Dataset
    w0: np.ndarray
    schedule: LrSchedule
    steps_per_epoch: int
    total_steps: int


def build(cfg: RunConfig) -> Setup:
    net, data, sch = cfg.sections["network"], cfg.sections["data"], cfg.sections["schedule"]
    model = Mlp(NetworkSpec(net["layer_widths"], net["activation"], net["loss"], net["bias"]))
    if data["kind"] == "csv":
        train = Dataset.from_csv(data["train_path"])
        test = Dataset.from_csv(data["test_path"]) if data["test_path"] else None
    else:
        dims = data["dims"][0] if data["kind"] == "rank_deficient_regression" else data["dims"]
        full = make_synthetic(data["kind"], data["seed"], data["n_train"] + data["n_test"], dims,
                              rank=data["rank"] or None, noise=data["noise"],
                              input_scale=data["input_scale"])
        n = data["n_train"]
        train = Dataset(full.inputs[:n], full.targets[:n], meta=full.meta)
        test = Dataset(full.inputs[n:], full.targets[n:]) if data["n_test"] else None
    if train.inputs.shape[1] != model.spec.layer_widths[0]:
        raise ConfigError("network.layer_widths", f"input width must be {train.inputs.shape[1]}")
    scale = net["init_scale"] or None
    w0 = init_params(model.spec, cfg["seeds.init"], scale=scale)
    spe = -(-len(train) // sch["batch_size"])
    total = sch["steps"] if sch["steps"] > 0 else sch["epochs"] * spe
    schedule = LrSchedule(sch["kind"], sch["gamma"], sch["drops"], sch["epochs"])
    return Setup(model, train, test, w0, schedule, spe, total)


def gamma_for_step(setup, k):
    """Learning rate of step ``k`` (1-based) from the epoch it falls in."""
    epochs = setup.total_steps / setup.steps_per_epoch
    frac = min(1.0, ((k - 1) // setup.steps_per_epoch) / epochs)
    return lr_at(setup.schedule, frac)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, header, arrays):
    """Binary checkpoint: magic, u64 header length, JSON header, little-endian float64 block."""
    offsets, blobs, pos = {}, [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8").ravel()
        offsets[name] = [pos, a.size]
        blobs.append(a.tobytes())
        pos += a.size
    header = dict(header, fields=offsets)
    hb = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        block = np.frombuffer(fh.read(), dtype="<f8")
    arrays = {k: block[o:o + n].astype(np.float64) for k, (o, n) in header["fields"].items()}
    return header, arrays


# -- training legs ---------------------------------------------------------------


@dataclass
class LegResult:
    kind: str
    w: np.ndarray
    rows: list
    stream_hash: str
    snapshots: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    state: object = None


def _metrics_row(setup, kind, step, w, g_tilde, test_every):
    model, train, test = setup.model, setup.train, setup.test
    row = {"step": step, "epoch": step / setup.steps_per_epoch,
           "train_loss": model.loss(w, train.inputs, train.targets),
           "train_acc": model.accuracy(w, train.inputs, train.targets),
           "test_loss": None, "test_acc": None,
           "sparsity": sparsity(w), "gamma": gamma_for_step(setup, max(step, 1)),
           "g_tilde": g_tilde if kind == "grda" else 0.0}
    if test is not None and (test_every == "row" or step % setup.steps_per_epoch == 0):
        row["test_loss"] = model.loss(w, test.inputs, test.targets)
        row["test_acc"] = model.accuracy(w, test.inputs, test.targets)
    try:
        r = ratio_l2_l1(w)
        row["l2_l1_ratio"], row["l2_l1_bound"] = r.ratio, r.lower_bound
    except ValueError:
        row["l2_l1_ratio"] = row["l2_l1_bound"] = None
    return row


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write_rows(path, rows, append):
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt_cell(row[k]) for k in METRIC_FIELDS])


def _truncate_metrics(path, last_step):
    """Drop rows logged after ``last_step`` so a resumed run can append cleanly."""
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    keep = [lines[0]] + [r for r in lines[1:] if int(r[0]) <= last_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def _chain(h, idx):
    return hashlib.sha256(bytes.fromhex(h) + np.asarray(idx, dtype="<i8").tobytes()).hexdigest()


def run_leg(cfg, kind=None, out_dir=None, resume=None, stop_at=None, snapshot_every=0, setup=None):
    """Train one optimizer leg.

    ``kind`` overrides ``optimizer.kind``.  With ``out_dir`` the metrics CSV and
    checkpoints are written there.  ``stop_at`` ends the run early (a
    checkpoint is written), ``resume`` continues from a checkpoint file.
    ``snapshot_every`` keeps weight vectors in memory at that step cadence.
    """
    setup = setup or build(cfg)
    kind = kind or cfg["optimizer.kind"]
    opt = cfg.sections["optimizer"]
    tf = TuningFn(opt["c"], opt["mu"]) if kind == "grda" else None
    lg = cfg.sections["logging"]
    sch = cfg.sections["schedule"]
    stream = MinibatchStream(cfg["seeds.batch"], len(setup.train), sch["batch_size"],
                             shuffle=sch["sampling"] == "shuffle")
    X, Y = setup.train.inputs, setup.train.targets
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = out / f"metrics_{kind}.csv" if out is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    step = 0
    h = hashlib.sha256(b"stream").hexdigest()
    w = setup.w0.copy()
    state = GrdaState.init(w, tf) if kind == "grda" else None
    if resume is not None:
        header, arrays = load_checkpoint(resume)
        if header["config_hash"] != cfg.hash():
            raise ConfigError("checkpoint", "config hash does not match the checkpoint")
        if header["kind"] != kind:
            raise ConfigError("checkpoint", f"checkpoint is for leg {header['kind']!r}")
        step, h = header["step"], header["stream_hash"]
        stream.position = header["stream_position"]
        w = arrays["w"].copy()
        if kind == "grda":
            state = GrdaState(v=arrays["v"].copy(), w=w.copy(), tf=tf, n=header["n"],
                              g_tilde=float(arrays["g_tilde"][0]), w0=arrays["w0"].copy())
        if metrics_path is not None and metrics_path.exists():
            _truncate_metrics(metrics_path, step)

    result = LegResult(kind, w, [], h)
    end = setup.total_steps if stop_at is None else min(stop_at, setup.total_steps)

    def checkpoint(at_step, w_cur, st, hh):
        if out is None:
            return None
        header = {"config_hash": cfg.hash(), "kind": kind, "step": at_step,
                  "stream_position": stream.position, "stream_hash": hh, "dim": int(w_cur.size),
                  "n": st.n if st is not None else at_step, "c": opt["c"], "mu": opt["mu"],
                  "schedule": sch["kind"]}
        arrays = {"w": w_cur}
        if st is not None:
            arrays.update(v=st.v, w0=st.w0, g_tilde=np.array([st.g_tilde]))
        path = out / "checkpoints" / f"{kind}_step{at_step:08d}.ckpt"
        save_checkpoint(path, header, arrays)
        result.checkpoints.append(path)
        return path

    pending = []

    def flush():
        if metrics_path is not None and pending:
            _write_rows(metrics_path, pending, append=True)
        pending.clear()

    if metrics_path is not None and resume is None:
        _write_rows(metrics_path, [], append=False)

    def log_row(at_step, w_cur, st):
        row = _metrics_row(setup, kind, at_step, w_cur, st.g_tilde if st is not None else 0.0,
                           lg["test_every"])
        result.rows.append(row)
        pending.append(row)

    if resume is None:
        log_row(0, w, state)
        if snapshot_every:
            result.snapshots[0] = w.copy()
    last_ckpt = None
    try:
        while step < end:
            idx = next_batch(stream)
            h = _chain(h, idx)
            gamma = gamma_for_step(setup, step + 1)
            g = setup.model.grad(w, X[idx], Y[idx])
            if kind == "grda":
                state = grda_step_scheduled(state, g, gamma)
                w = state.w
            else:
                w = sgd_step(w, g, gamma)
            step += 1
            if step % lg["cadence"] == 0:
                log_row(step, w, state)
            if snapshot_every and step % snapshot_every == 0:
                result.snapshots[step] = w.copy()
            if lg["checkpoint_every"] and step % lg["checkpoint_every"] == 0 and step < end:
                flush()
                last_ckpt = checkpoint(step, w, state, h)
    except NonFiniteError as exc:
        flush()
        raise NumericFailure(f"non-finite values at step {step + 1}: {exc}", last_ckpt) from exc
    flush()
    checkpoint(step, w, state, h)
    result.w, result.stream_hash, result.state = w, h, state
    return result


def run_experiment(cfg, out_dir, resume=None, stop_at=None):
    """One leg with metrics and checkpoints on disk plus a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    written = ["config.ini"]
    try:
        res = run_leg(cfg, out_dir=out, resume=resume, stop_at=stop_at)
    except (OSError, NumericFailure) as exc:
        manifest = {"status": "failed", "error": str(exc),
                    "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        raise
    written += [f"metrics_{res.kind}.csv"] + [str(p.relative_to(out)) for p in res.checkpoints]
    notes = res.state.tf.notes if res.state is not None else []
    manifest = {"status": "ok", "config_hash": cfg.hash(), "kind": res.kind,
                "final_step": res.rows[-1]["step"] if res.rows else None, "files": written,
                "notes": notes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return res


@dataclass
class PairedResult:
    sgd: LegResult
    grda: LegResult
    setup: Setup

    @property
    def streams_match(self):
        return self.sgd.stream_hash == self.grda.stream_hash


def paired_run(cfg, out_dir=None, snapshot_every=0):
    """SGD and gRDA from the same initializer on the same minibatch sequence."""
    setup = build(cfg)
    legs = {}
    for kind in ("sgd", "grda"):
        legs[kind] = run_leg(cfg, kind=kind, out_dir=out_dir, snapshot_every=snapshot_every,
                             setup=setup)
    res = PairedResult(legs["sgd"], legs["grda"], setup)
    if out_dir is not None:
        log_path = Path(out_dir) / "stream_log.json"
        log_path.write_text(json.dumps({"sgd": res.sgd.stream_hash, "grda": res.grda.stream_hash,
                                        "match": res.streams_match}, indent=2))
    if not res.streams_match:
        raise RuntimeError("paired legs consumed different minibatch sequences")
    return res


# -- pipelines ------------------------------------------------------------------


def flat_space(setup, w, tol_abs=1e-10, tol_rel=1e-6):
    H = dense_hessian(setup.model, w, setup.train)
    spec = dense_eig(H)
    return spec, zero_space(spec, tol_abs, tol_rel)


def verify_pipeline(cfg, out_dir=None, gammas=None, t=None):
    """Paired runs at a fixed physical time across a ladder of learning rates.

    For each ``gamma`` the runs take ``round(t / gamma)`` steps; the flat space
    of the Hessian at the SGD endpoint gives the scores, and the gRDA endpoint
    is compared with the pruned SGD endpoint at ``lambda = c sqrt(gamma) t^mu``.
    """
    v = cfg.sections["verify"]
    gammas = tuple(gammas or v["gammas"])
    t = t or v["t"]
    if not gammas or t <= 0:
        raise ConfigError("verify.gammas", "need a nonempty gamma ladder and t > 0")
    c, mu = cfg["optimizer.c"], cfg["optimizer.mu"]
    reports = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for gamma in gammas:
        steps = int(round(t / gamma))
        sub = cfg.with_overrides({"schedule.gamma": gamma, "schedule.steps": steps,
                                  "schedule.kind": "constant", "logging.cadence": steps,
                                  "logging.checkpoint_every": 0})
        pair = paired_run(sub)
        _, zs = flat_space(pair.setup, pair.sgd.w, v["tol_abs"], v["tol_rel"])
        sc = score(zs, pair.sgd.w)
        lam = lambda_at(c, gamma, steps * gamma, mu)
        rep = verify_dp(pair.sgd.w, pair.grda.w, lam, sc, gamma=gamma, t=steps * gamma, c=c, mu=mu)
        if out is not None:
            tag = f"gamma_{gamma:.0e}"
            coord = out / f"dp_{tag}.csv"
            export_csv(coord, pair.sgd.w, sc, _Solution(rep.prediction))
            rep.per_coordinate_path = str(coord)
            body = json.loads(rep.to_json())
            body.update(zero_space_dim=zs.dim, zero_tol=zs.tol_used,
                        deviation_inf=float(np.max(np.abs(pair.grda.w - pair.sgd.w))),
                        sgd_inf=float(np.max(np.abs(pair.sgd.w))),
                        grda_sparsity=sparsity(pair.grda.w))
            (out / f"report_{tag}.json").write_text(json.dumps(body, indent=2, sort_keys=True))
        reports.append(VerifyCell(rep, pair, zs))
    return reports


@dataclass
class VerifyCell:
    report: object
    pair: PairedResult
    zero_space: object


@dataclass
class _Solution:
    w_hat: np.ndarray

    @property
    def pruned_mask(self):
        return self.w_hat == 0


def spectrum_at(setup, w, top=30, keep_positive=10, method="lanczos", max_steps=1000, tol=1e-6,
                seed=0):
    """Largest-magnitude Hessian eigenpairs at ``w`` and the leading positive ones."""
    d = w.size
    if method == "dense":
        full = dense_eig(dense_hessian(setup.model, w, setup.train))
        order = np.argsort(-np.abs(full.eigenvalues), kind="stable")[:top]
        order = order[np.argsort(-full.eigenvalues[order])]
        lm = Spectrum(full.eigenvalues[order], full.eigenvectors[:, order])
    else:
        lm = lanczos_topk(hvp_oracle(setup.model, w, setup.train), d, min(top, d),
                          max_steps=max_steps, tol=tol, seed=seed)
    return lm, lm.top_positive(keep_positive)


def projection_series(cfg, out_dir=None, every=None, top=None, baseline_draws=100, seed=0):
    """Share of ``w_gRDA - w_SGD`` inside the top Hessian eigenspace along a paired run."""
    every = every or cfg["logging.cadence"]
    top = top or cfg["verify.top"]
    pair = paired_run(cfg, snapshot_every=every)
    rng = np.random.default_rng(seed)
    rows = []
    for step in sorted(pair.sgd.snapshots):
        ws, wg = pair.sgd.snapshots[step], pair.grda.snapshots[step]
        delta = wg - ws
        if not np.any(delta):
            continue
        _, pos = spectrum_at(pair.setup, ws, top=min(3 * top, ws.size), keep_positive=top,
                             method="dense")
        P = TopSubspace(pos.eigenvectors.T)
        rand = [projection_fraction(P, rng.normal(size=ws.size)) for _ in range(baseline_draws)]
        rows.append({"step": step, "fraction": projection_fraction(P, delta),
                     "random_baseline": float(np.mean(rand)), "k": P.P.shape[0]})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "projection.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "fraction", "random_baseline", "k"])
            writer.writeheader()
            for r in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


def connect_pipeline(cfg, out_dir=None, epochs=10, lr=None, num_points=21, resolution=21,
                     momentum=0.0):
    """Train both endpoints, fit a Bezier curve between them and map the loss plane."""
    pair = paired_run(cfg)
    setup = pair.setup
    lr = lr or cfg["schedule.gamma"]
    curve0 = BezierCurve.init(pair.sgd.w, pair.grda.w)
    curve = train_curve(setup.model, setup.train, curve0, epochs, lr,
                        batch_size=cfg["schedule.batch_size"], seed=cfg["seeds.batch"],
                        momentum=momentum)
    path = eval_path(curve, setup.model, setup.train, setup.test, num_points)
    chord = eval_path(chord_curve(pair.sgd.w, pair.grda.w), setup.model, setup.train, setup.test,
                      num_points)
    grid = None
    if np.linalg.norm(curve.w - 0.5 * (curve.w1 + curve.w2)) > 0:
        try:
            grid = plane_grid(setup.model, setup.train, curve.w1, curve.w2, curve.w, resolution,
                              curve=curve)
        except ValueError:
            grid = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "path.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "train_loss", "test_error", "chord_train_loss", "chord_test_error"])
            for i, t in enumerate(path.t):
                writer.writerow([repr(float(t)), repr(float(path.train_loss[i])),
                                 repr(float(path.test_error[i])), repr(float(chord.train_loss[i])),
                                 repr(float(chord.test_error[i]))])
        if grid is not None:
            grid.to_csv(out / "plane.csv", sidecar=out / "plane.json")
    return pair, curve, path, chord, grid
