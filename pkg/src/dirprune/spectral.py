"""Hessians, eigensolvers, the flat subspace and curvature diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import DimensionError, NonFiniteError, _batch_xy, as_model

DENSE_LIMIT = 2000


class LanczosNotConverged(RuntimeError):
    def __init__(self, msg, residuals):
        super().__init__(msg)
        self.residuals = residuals


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues sorted descending with matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray = field(default=None, compare=False)

    def __len__(self):
        return self.eigenvalues.size

    def top_positive(self, keep):
        """The ``keep`` largest strictly positive eigenpairs."""
        mask = self.eigenvalues > 0
        vals = self.eigenvalues[mask][:keep]
        vecs = self.eigenvectors[:, mask][:, :keep]
        res = None if self.residuals is None else self.residuals[mask][:keep]
        return Spectrum(vals, vecs, res)

    def to_csv(self, path, vectors_path=None):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "eigenvalue"] + (["residual"] if self.residuals is not None else []))
            for i, lam in enumerate(self.eigenvalues):
                row = [i, repr(float(lam))]
                if self.residuals is not None:
                    row.append(repr(float(self.residuals[i])))
                writer.writerow(row)
        if vectors_path is not None:
            np.savetxt(vectors_path, self.eigenvectors, delimiter=",", fmt="%.17g")


@dataclass(frozen=True)
class ZeroSpace:
    basis: np.ndarray
    tol_used: float

    @property
    def dim(self):
        return self.basis.shape[1]


@dataclass(frozen=True)
class TopSubspace:
    P: np.ndarray

    @classmethod
    def from_spectrum(cls, spectrum, k=10):
        return cls(np.ascontiguousarray(spectrum.top_positive(k).eigenvectors.T))


def _loss_grad(model, batch):
    X, Y = _batch_xy(batch)
    model = as_model(model)
    return lambda w: model.grad(w, X, Y)


def hessian_step(params):
    return 1e-4 * (1.0 + np.max(np.abs(params), initial=0.0))


def dense_hessian(model, params, batch, step=None):
    """Hessian by central differences of the analytic gradient, symmetrized."""
    w = np.asarray(params, dtype=np.float64)
    d = w.size
    if d > DENSE_LIMIT:
        raise ValueError(f"dense Hessian refused for d={d} > {DENSE_LIMIT}")
    grad = _loss_grad(model, batch)
    h = hessian_step(w) if step is None else step
    H = np.empty((d, d))
    for j in range(d):
        wp = w.copy()
        wm = w.copy()
        wp[j] += h
        wm[j] -= h
        H[:, j] = (grad(wp) - grad(wm)) / (2.0 * h)
    if not np.all(np.isfinite(H)):
        raise NonFiniteError("non-finite Hessian entries")
    return 0.5 * (H + H.T)


def hvp(model, params, batch, vec, eps=1e-5):
    """Hessian-vector product by a central difference along ``vec``.

    The probe step is ``eps * (1 + |w|_inf) / |vec|`` so the perturbation has a
    fixed size in parameter space regardless of the length of ``vec``.
    """
    w = np.asarray(params, dtype=np.float64)
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != w.shape:
        raise DimensionError("vector and parameters differ in shape")
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("hvp of the zero vector")
    grad = _loss_grad(model, batch)
    h = eps * (1.0 + np.max(np.abs(w))) / nv
    return (grad(w + h * v) - grad(w - h * v)) / (2.0 * h)


def hvp_oracle(model, params, batch, eps=1e-5):
    return lambda v: hvp(model, params, batch, v, eps=eps)


def dense_eig(matrix, sym_tol=1e-10):
    Q = np.asarray(matrix, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DimensionError("expected a square matrix")
    scale = max(1.0, np.max(np.abs(Q), initial=0.0))
    if np.max(np.abs(Q - Q.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
    order = np.argsort(vals)[::-1]
    return Spectrum(vals[order], vecs[:, order])


def lanczos_topk(matvec, d, k, max_steps=1000, tol=1e-6, seed=0):
    """Largest-magnitude eigenpairs of a symmetric operator.

    Lanczos with full reorthogonalization.  A pair is accepted once its
    residual ``|A y - theta y|`` is below ``tol * max|theta|``.  When the
    Krylov space becomes invariant before ``k`` pairs are found, the iteration
    restarts from a fresh random vector orthogonal to the current basis.
    Returns the ``k`` pairs sorted by eigenvalue, largest first.
    """
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    rng = np.random.default_rng(seed)
    steps = min(max_steps, d)
    Q = np.zeros((d, steps + 1))
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    q = rng.normal(size=d)
    Q[:, 0] = q / np.linalg.norm(q)
    m = 0
    result = None
    for m in range(1, steps + 1):
        qj = Q[:, m - 1]
        u = np.asarray(matvec(qj), dtype=np.float64)
        alpha[m - 1] = qj @ u
        u -= Q[:, :m] @ (Q[:, :m].T @ u)
        u -= Q[:, :m] @ (Q[:, :m].T @ u)
        b = np.linalg.norm(u)
        anorm = max(np.max(np.abs(alpha[:m])), np.max(beta[:m], initial=0.0), 1e-300)
        if m == d:
            b = 0.0
        elif b <= 1e-12 * anorm:
            # invariant subspace: continue from a new direction, T decouples
            r = rng.normal(size=d)
            r -= Q[:, :m] @ (Q[:, :m].T @ r)
            r -= Q[:, :m] @ (Q[:, :m].T @ r)
            u, b = r, 0.0
            Q[:, m] = r / np.linalg.norm(r)
        else:
            Q[:, m] = u / b
        beta[m - 1] = b
        if m >= k and (m % 5 == 0 or m == steps):
            result = _ritz(Q[:, :m], alpha[:m], beta[:m], k)
            vals, vecs, res = result
            if np.all(res <= tol * np.max(np.abs(vals))):
                return Spectrum(vals, vecs, res)
    if result is None:
        result = _ritz(Q[:, :m], alpha[:m], beta[:m], k)
    vals, vecs, res = result
    if m == d or np.all(res <= tol * np.max(np.abs(vals))):
        return Spectrum(vals, vecs, res)
    raise LanczosNotConverged(f"Lanczos did not converge in {max_steps} steps", res)


def _ritz(Qm, alpha, beta, k):
    T = np.diag(alpha) + np.diag(beta[:-1], 1) + np.diag(beta[:-1], -1)
    theta, S = np.linalg.eigh(T)
    pick = np.argsort(-np.abs(theta), kind="stable")[:k]
    theta, S = theta[pick], S[:, pick]
    res = np.abs(beta[-1] * S[-1, :])
    order = np.argsort(theta)[::-1]
    vecs = Qm @ S[:, order]
    return theta[order], vecs, res[order]


def zero_space(spectrum, tol_abs=1e-10, tol_rel=1e-6):
    """Eigenvectors whose eigenvalue magnitude is below ``max(tol_abs, tol_rel * max|lambda|)``."""
    if len(spectrum) == 0:
        raise ValueError("empty spectrum")
    tol = max(tol_abs, tol_rel * np.max(np.abs(spectrum.eigenvalues)))
    mask = np.abs(spectrum.eigenvalues) <= tol
    return ZeroSpace(spectrum.eigenvectors[:, mask].copy(), float(tol))


def project(zs, vec):
    v = np.asarray(vec, dtype=np.float64)
    if v.shape[0] != zs.basis.shape[0]:
        raise DimensionError("vector does not match the zero-space dimension")
    B = zs.basis
    return B @ (B.T @ v)


def principal_angles(A, B):
    """Principal angles (radians) between the column spans of ``A`` and ``B``."""
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    if qa.shape[1] < qb.shape[1]:
        qa, qb = qb, qa
    # sines from the residual of qb after projecting onto span(qa); accurate for tiny angles
    s = np.linalg.svd(qb - qa @ (qa.T @ qb), compute_uv=False)
    return np.sort(np.arcsin(np.clip(s, 0.0, 1.0)))[::-1]


def grad_covariance(model, params, dataset):
    """Covariance of per-example gradients about their mean (normalized by N)."""
    X, Y = _batch_xy(dataset)
    if len(X) < 2:
        raise ValueError("gradient covariance needs at least two examples")
    G = as_model(model).per_example_grads(params, X, Y)
    C = G - G.mean(axis=0)
    S = C.T @ C / len(X)
    return 0.5 * (S + S.T)


def projection_fraction(top, delta):
    P = top.P if isinstance(top, TopSubspace) else np.asarray(top)
    delta = np.asarray(delta, dtype=np.float64)
    nd = np.linalg.norm(delta)
    if nd == 0:
        raise ValueError("projection fraction of a zero vector")
    return float(min(1.0, np.linalg.norm(P @ delta) / nd))
