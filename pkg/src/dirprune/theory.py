"""Continuous-time checks: gradient flow, the principal matrix solution, the
threshold-induced drift of the dual process and the SGD/gRDA comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .pruning import dp_solve


class FlowDivergence(FloatingPointError):
    pass


class SignChangeError(ValueError):
    pass


def rk4(f, y0, t0, t1, dt, blowup=1e12):
    """Classical Runge-Kutta from ``t0`` to ``t1``; returns times and states."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-12)))
    h = (t1 - t0) / n
    y = np.array(y0, dtype=np.float64)
    times = [t0]
    states = [y.copy()]
    t = t0
    for i in range(n):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (i + 1) * h
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > blowup:
            raise FlowDivergence(f"integration diverged at t={t:g}")
        times.append(t)
        states.append(y.copy())
    return np.array(times), states


@dataclass
class FlowTrajectory:
    times: np.ndarray
    states: list
    dt_used: float

    def at(self, t):
        """State at the stored time nearest to ``t``."""
        i = int(np.argmin(np.abs(self.times - t)))
        return self.states[i]

    @property
    def end(self):
        return self.states[-1]


def gradient_flow(grad, w0, T, dt):
    """Integrate ``dw/dt = -grad(w)`` from ``w0`` over ``[0, T]`` with RK4."""
    times, states = rk4(lambda t, w: -grad(w), w0, 0.0, T, dt)
    return FlowTrajectory(times, states, (T / (len(times) - 1)) if len(times) > 1 else dt)


@dataclass
class PrincipalSolution:
    t: float
    s: float
    Phi: np.ndarray


def principal_solution(hessian_at, t, s, dt):
    """Solve ``dPhi/dtau = -H(tau) Phi`` from ``Phi(s, s) = I`` up to ``tau = t``."""
    if t < s:
        raise ValueError("need t >= s")
    d = np.asarray(hessian_at(s)).shape[0]
    if t == s:
        return PrincipalSolution(t, s, np.eye(d))
    _, states = rk4(lambda tau, P: -np.asarray(hessian_at(tau)) @ P, np.eye(d), s, t, dt)
    return PrincipalSolution(t, s, states[-1])


class ConstantHessianPropagator:
    """Exact ``Phi(t, s) = expm(-H (t - s))`` through an eigendecomposition of ``H``."""

    def __init__(self, H):
        H = np.asarray(H, dtype=np.float64)
        self.lam, self.V = np.linalg.eigh(0.5 * (H + H.T))

    def matrix(self, t, s):
        return (self.V * np.exp(-self.lam * (t - s))) @ self.V.T

    def apply(self, t, s, x):
        """Rows ``Phi(t, s_k) x_k`` for arrays ``s`` (m,) and ``x`` (m, d)."""
        coef = (x @ self.V) * np.exp(-np.outer(t - np.asarray(s), self.lam))
        return coef @ self.V.T


class TabulatedPropagator:
    """``Phi(t, s)`` for a time-varying Hessian, tabulated on a grid in ``s``.

    Integrates ``dPhi(t, s)/ds = Phi(t, s) H(s)`` backwards from ``s = t`` and
    interpolates linearly between grid points.
    """

    def __init__(self, hessian_at, t, dt):
        times, states = rk4(lambda s, P: -P @ np.asarray(hessian_at(t - s)),
                            np.eye(np.asarray(hessian_at(t)).shape[0]), 0.0, t, dt)
        self.t = t
        self.s_grid = t - times[::-1]
        self.table = np.array(states[::-1])

    def apply(self, t, s, x):
        if t != self.t:
            raise ValueError("propagator was tabulated for a different t")
        s = np.asarray(s)
        i = np.clip(np.searchsorted(self.s_grid, s) - 1, 0, len(self.s_grid) - 2)
        w = ((s - self.s_grid[i]) / (self.s_grid[i + 1] - self.s_grid[i]))[:, None, None]
        P = (1 - w) * self.table[i] + w * self.table[i + 1]
        return np.einsum("mij,mj->mi", P, x)


@dataclass
class DeltaEstimate:
    """``delta = delta1 + delta2``; ``limit`` is ``P0 sign(w)`` when a zero space was given."""

    t: float
    delta: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    limit: np.ndarray = None
    limit_gap: float = None
    nodes: int = 0


def _trajectory_signs(trajectory):
    signs = np.sign(np.array(trajectory.states))
    flips = np.any(signs[1:] != signs[0], axis=1)
    if np.any(flips):
        k = int(np.argmax(flips)) + 1
        raise SignChangeError(f"coordinate sign change at t={trajectory.times[k]:g}")
    return signs[0]


def delta_quadrature(c, mu, trajectory, zs, t, propagator, rtol=1e-8, max_level=24):
    """Drift ``c mu int_0^t s^(mu-1) Phi(t, s) sign(w(s)) ds`` of the dual process.

    With ``u = s^mu`` the integral becomes ``c int_0^(t^mu) Phi(t, u^(1/mu)) sign du``
    and has no endpoint singularity.  Composite Simpson nodes are doubled until
    successive estimates agree to ``rtol``.  Trajectories whose coordinate
    signs change are rejected, so the sign-change term is identically zero.
    """
    sgn = _trajectory_signs(trajectory)
    d = sgn.size
    zero = np.zeros(d)
    if c == 0:
        return DeltaEstimate(t, zero.copy(), zero.copy(), zero.copy(), nodes=0)
    U = t ** mu
    prev = None
    for level in range(2, max_level + 1):
        m = 2 ** level
        u = np.linspace(0.0, U, m + 1)
        s = u ** (1.0 / mu)
        vals = propagator.apply(t, s, np.broadcast_to(sgn, (m + 1, d)))
        wts = np.ones(m + 1)
        wts[1:-1:2] = 4.0
        wts[2:-1:2] = 2.0
        est = c * (U / m / 3.0) * (wts @ vals)
        if prev is not None and np.max(np.abs(est - prev)) <= rtol * max(np.max(np.abs(est)), 1e-300):
            break
        prev = est
    limit = project_sign(zs, sgn) if zs is not None else None
    gap = None if limit is None else float(np.max(np.abs(est / (c * t ** mu) - limit)))
    return DeltaEstimate(t, est, est.copy(), zero.copy(), limit=limit, limit_gap=gap, nodes=m + 1)


def project_sign(zs, sgn):
    return zs.basis @ (zs.basis.T @ sgn)


def lambda_at(c, gamma, t, mu):
    """Pruning strength ``c sqrt(gamma) t^mu`` matched to gRDA at physical time ``t``."""
    return c * math.sqrt(gamma) * t ** mu


@dataclass
class DeviationReport:
    gamma: float
    t: float
    lam: float
    residual_inf: float
    residual_l2: float
    support_match_fraction: float
    per_coordinate: np.ndarray = field(repr=False)
    prediction: np.ndarray = field(repr=False)
    per_coordinate_path: str = None

    def to_json(self):
        d = asdict(self)
        d.pop("per_coordinate")
        d.pop("prediction")
        d["lambda"] = d.pop("lam")
        return json.dumps(d, indent=2, sort_keys=True)


def verify_dp(sgd_end, grda_end, lam, sc, gamma=float("nan"), t=float("nan"), c=None, mu=None):
    """Compare a gRDA endpoint with the pruned SGD endpoint it should match.

    When ``c`` and ``mu`` are given, ``lam`` must equal ``lambda_at(c, gamma, t, mu)``.
    """
    sgd_end = np.asarray(sgd_end, dtype=np.float64)
    grda_end = np.asarray(grda_end, dtype=np.float64)
    if sgd_end.shape != grda_end.shape:
        raise ValueError("endpoint dimensions differ")
    if c is not None and mu is not None:
        want = lambda_at(c, gamma, t, mu)
        if not math.isclose(lam, want, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError(f"lambda {lam} does not match c*sqrt(gamma)*t^mu = {want}")
    pred = dp_solve(sgd_end, lam, sc).w_hat
    r = grda_end - pred
    support = np.mean((grda_end != 0) == (pred != 0))
    return DeviationReport(float(gamma), float(t), float(lam), float(np.max(np.abs(r))),
                           float(np.linalg.norm(r)), float(support), r, pred)
