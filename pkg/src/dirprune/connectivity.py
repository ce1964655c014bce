"""Quadratic Bezier paths between two minimizers and loss evaluation on the
plane through three anchor points.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .nn import Dataset, MinibatchStream, NonFiniteError, as_model, next_batch


@dataclass(frozen=True)
class BezierCurve:
    """``(1-t)^2 w1 + t^2 w2 + 2 t (1-t) w``; only the control ``w`` is trained."""

    w1: np.ndarray
    w2: np.ndarray
    w: np.ndarray

    @classmethod
    def init(cls, w1, w2):
        w1 = np.array(w1, dtype=np.float64)
        w2 = np.array(w2, dtype=np.float64)
        return cls(w1, w2, 0.5 * (w1 + w2))


def bezier_point(curve, t):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t == 0.0:
        return curve.w1.copy()
    if t == 1.0:
        return curve.w2.copy()
    # same polynomial written as offsets from w1: the Bernstein weights sum to one
    # only up to rounding, this form returns w1 exactly when all three points agree
    return curve.w1 + t ** 2 * (curve.w2 - curve.w1) + 2 * t * (1 - t) * (curve.w - curve.w1)


def control_gradient(model, curve, t, X=None, Y=None):
    """Gradient of ``loss(theta_w(t))`` with respect to the control point."""
    return 2 * t * (1 - t) * as_model(model).grad(bezier_point(curve, t), X, Y)


def train_curve(model, dataset, curve, epochs, lr, batch_size=1, seed=0, momentum=0.0,
                steps_per_epoch=None):
    """Fit the control point with SGD on losses at random points of the curve.

    A fresh ``t ~ U(0, 1)`` is drawn for every minibatch step.  ``dataset`` may
    be None for data-free analytic losses, in which case ``steps_per_epoch``
    sets the epoch length (default 100).
    """
    if dataset is None:
        stream = None
        steps = steps_per_epoch or 100
    else:
        stream = MinibatchStream(seed, len(dataset), batch_size)
        steps = steps_per_epoch or stream.steps_per_epoch
    rng = np.random.default_rng([seed, 2])
    w = curve.w.copy()
    buf = np.zeros_like(w)
    for _ in range(epochs * steps):
        t = rng.uniform()
        X = Y = None
        if stream is not None:
            idx = next_batch(stream)
            X, Y = dataset.inputs[idx], dataset.targets[idx]
        g = control_gradient(model, BezierCurve(curve.w1, curve.w2, w), t, X, Y)
        if momentum:
            buf = momentum * buf + g
            g = buf
        w = w - lr * g
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("curve training diverged")
    return BezierCurve(curve.w1, curve.w2, w)


def _loss(model, w, data):
    model = as_model(model)
    if data is None:
        return model.loss(w, None, None)
    return model.loss(w, data.inputs, data.targets)


def _error(model, w, data):
    model = as_model(model)
    if data is None:
        return float("nan")
    if isinstance(data, Dataset) and data.is_classification:
        return 1.0 - model.accuracy(w, data.inputs, data.targets)
    return _loss(model, w, data)


@dataclass
class PathEvaluation:
    t: np.ndarray
    train_loss: np.ndarray
    test_error: np.ndarray


def eval_path(curve, model, train, test=None, num_points=61):
    if num_points < 2:
        raise ValueError("need at least two points")
    ts = np.linspace(0.0, 1.0, num_points)
    pts = [bezier_point(curve, t) for t in ts]
    return PathEvaluation(ts, np.array([_loss(model, p, train) for p in pts]),
                          np.array([_error(model, p, test) for p in pts]))


def chord_curve(w1, w2):
    """The straight segment written as a Bezier curve (control at the midpoint)."""
    return BezierCurve.init(w1, w2)


@dataclass
class PlaneGrid:
    origin: np.ndarray
    axes: np.ndarray  # (2, d), orthonormal rows
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # (len(ys), len(xs))
    anchors: np.ndarray  # plane coordinates of w1, w2, w3
    curve_xy: np.ndarray = None

    def point(self, x, y):
        return self.origin + x * self.axes[0] + y * self.axes[1]

    def coords(self, w):
        return self.axes @ (np.asarray(w) - self.origin)

    def to_csv(self, path, sidecar=None):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "loss"])
            for i, y in enumerate(self.ys):
                for j, x in enumerate(self.xs):
                    writer.writerow([repr(float(x)), repr(float(y)), repr(float(self.loss[i, j]))])
        if sidecar is not None:
            meta = {
                "origin": self.origin.tolist(),
                "axes": self.axes.tolist(),
                "anchors": {k: v.tolist() for k, v in zip(("w1", "w2", "w3"), self.anchors)},
                "curve_xy": None if self.curve_xy is None else self.curve_xy.tolist(),
            }
            with open(sidecar, "w") as fh:
                json.dump(meta, fh, indent=2)


def plane_grid(model, dataset, w1, w2, w3, resolution=21, extent=1.2, curve=None, curve_points=61):
    """Loss on a grid over the plane through ``w1, w2, w3``.

    Axes come from Gram-Schmidt on ``(w2 - w1, w3 - w1)`` with ``w1`` at the
    origin.  A scalar ``extent`` scales the bounding box of the anchor
    projections about its center; a 4-tuple ``(xmin, xmax, ymin, ymax)`` is
    used as is.
    """
    w1, w2, w3 = (np.asarray(w, dtype=np.float64) for w in (w1, w2, w3))
    a, b = w2 - w1, w3 - w1
    gram = np.array([[a @ a, a @ b], [a @ b, b @ b]])
    if np.linalg.det(gram) <= 1e-12:
        raise ValueError("anchors are collinear")
    u = a / np.linalg.norm(a)
    v = b - (u @ b) * u
    v = v - (u @ v) * u
    v /= np.linalg.norm(v)
    axes = np.vstack([u, v])
    anchors = np.array([[0.0, 0.0], axes @ a, axes @ b])
    if np.isscalar(extent):
        lo, hi = anchors.min(axis=0), anchors.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * extent
        box = (mid[0] - half[0], mid[0] + half[0], mid[1] - half[1], mid[1] + half[1])
    else:
        box = tuple(float(e) for e in extent)
    xs = np.linspace(box[0], box[1], resolution)
    ys = np.linspace(box[2], box[3], resolution)
    loss = np.array([[_loss(model, w1 + x * u + y * v, dataset) for x in xs] for y in ys])
    curve_xy = None
    if curve is not None:
        curve_xy = np.array([axes @ (bezier_point(curve, t) - w1)
                             for t in np.linspace(0, 1, curve_points)])
    return PlaneGrid(w1, axes, xs, ys, loss, anchors, curve_xy)
