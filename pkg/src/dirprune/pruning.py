"""Directional-pruning scores, the closed-form pruned solution and sparsity metrics."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import DimensionError
from .spectral import project


@dataclass(frozen=True)
class PruneScore:
    s: np.ndarray
    theta: np.ndarray
    zero_coords: int = 0


@dataclass(frozen=True)
class DPSolution:
    w_hat: np.ndarray
    lam: float
    pruned_mask: np.ndarray


def score(zs, w_sgd):
    """Per-coordinate score ``sign(w_j) * (P0 sign(w))_j``.

    Exact zeros in ``w_sgd`` get sign 0; they are counted and reported with a
    warning because the score is only meaningful for nonzero coordinates.
    """
    w = np.asarray(w_sgd, dtype=np.float64)
    if w.shape[0] != zs.basis.shape[0]:
        raise DimensionError("w_sgd does not match the zero-space dimension")
    sgn = np.sign(w)
    zeros = int(np.count_nonzero(sgn == 0))
    if zeros:
        warnings.warn(f"{zeros} coordinate(s) of w_sgd are exactly zero; using sign 0", stacklevel=2)
    theta = project(zs, sgn)
    return PruneScore(sgn * theta, theta, zeros)


def _scores(sc):
    return sc.s if isinstance(sc, PruneScore) else np.asarray(sc, dtype=np.float64)


def dp_solve(w_sgd, lam, sc):
    """Minimizer of ``0.5 |w_sgd - w|^2 + lam * sum_j s_j |w_j|``.

    Coordinates with positive score are shrunk (and zeroed once
    ``lam * s_j >= |w_j|``), negative scores push the magnitude up.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    w = np.asarray(w_sgd, dtype=np.float64)
    s = _scores(sc)
    w_hat = np.sign(w) * np.maximum(np.abs(w) - lam * s, 0.0)
    return DPSolution(w_hat, float(lam), w_hat == 0)


def dp_objective(w_sgd, w, lam, sc):
    w_sgd = np.asarray(w_sgd, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != w_sgd.shape:
        raise DimensionError("w and w_sgd differ in shape")
    return float(0.5 * np.sum((w_sgd - w) ** 2) + lam * np.sum(_scores(sc) * np.abs(w)))


def _objective_1d(w_sgd, x, lam, s):
    return 0.5 * (w_sgd - x) ** 2 + lam * s * np.abs(x)


def dp_brute(w_sgd_j, lam, s_j, grid_half_width=None, grid_step=1e-4):
    """Grid search for the one-coordinate pruning problem.

    The grid minimum is compared with the exact objective at the candidate
    points (``0`` and the stationary points of both smooth branches) and the
    best of all of them is returned.  Raises if the grid minimizer sits on the
    boundary of the grid.
    """
    need = abs(w_sgd_j) + lam * abs(s_j) + 1.0
    W = need if grid_half_width is None else grid_half_width
    if W < need:
        raise ValueError(f"grid half-width {W} must be at least {need}")
    n = int(np.ceil(W / grid_step))
    grid = np.arange(-n, n + 1) * grid_step
    vals = _objective_1d(w_sgd_j, grid, lam, s_j)
    i = int(np.argmin(vals))
    if i == 0 or i == grid.size - 1:
        raise ValueError("grid minimizer on the boundary; widen the grid")
    cands = [grid[i], 0.0]
    pos = w_sgd_j - lam * s_j
    neg = w_sgd_j + lam * s_j
    if pos > 0:
        cands.append(pos)
    if neg < 0:
        cands.append(neg)
    cvals = [_objective_1d(w_sgd_j, c, lam, s_j) for c in cands]
    return float(cands[int(np.argmin(cvals))])


def magnitude_prune(w, tau):
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    w = np.array(w, dtype=np.float64)
    w[np.abs(w) <= tau] = 0.0
    return w


def sparsity(w):
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("empty vector")
    return float(np.count_nonzero(w == 0)) / w.size


class L2L1(NamedTuple):
    ratio: float
    lower_bound: float


def ratio_l2_l1(w):
    """``|w|_2 / |w|_1`` over the nonzero support and its lower bound ``d_support ** -0.5``."""
    w = np.asarray(w, dtype=np.float64)
    nz = w[w != 0]
    if nz.size == 0:
        raise ValueError("ratio undefined for the zero vector")
    a = np.abs(nz) / np.max(np.abs(nz))  # rescale so tiny magnitudes do not underflow when squared
    return L2L1(float(np.sqrt(a @ a) / np.sum(a)), float(nz.size ** -0.5))


def export_csv(path, w_sgd, sc, solution):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "w_sgd", "theta", "s", "w_hat", "pruned"])
        for j, (w, th, s, wh, pr) in enumerate(zip(w_sgd, sc.theta, sc.s, solution.w_hat,
                                                   solution.pruned_mask)):
            writer.writerow([j, repr(float(w)), repr(float(th)), repr(float(s)), repr(float(wh)), int(pr)])
