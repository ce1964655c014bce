"""Small fully connected networks with exact reverse-mode gradients.

Everything works on a flat float64 parameter vector.  Layer ``l`` stores its
weight matrix of shape ``(fan_in, fan_out)`` row-major, followed by its bias
when the network is built with biases.  Besides the MLP there are two analytic helper
models (a quadratic bowl and a ring-shaped valley) that share the same
``loss``/``grad`` surface and are used as exactly solvable testbeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("squared_error", "cross_entropy")


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces inf/nan."""


class DimensionError(ValueError):
    pass


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _as_params(params, dim):
    w = np.asarray(params, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != dim:
        raise DimensionError(f"expected parameter vector of length {dim}, got shape {w.shape}")
    return w


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.targets)
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"row counts disagree: {x.shape[0]} inputs vs {y.shape[0]} targets")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def is_classification(self):
        return self.targets.ndim == 1 and np.issubdtype(self.targets.dtype, np.integer)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.targets[idx])

    def to_csv(self, path):
        p = self.inputs.shape[1]
        header = [f"x{i}" for i in range(p)]
        if self.is_classification:
            header.append("label")
            rows = (list(map(repr, map(float, x))) + [str(int(y))]
                    for x, y in zip(self.inputs, self.targets))
        else:
            y2 = self.targets.reshape(len(self), -1)
            header += [f"y{i}" for i in range(y2.shape[1])]
            rows = (list(map(repr, map(float, x))) + list(map(repr, map(float, y))) for x, y in zip(self.inputs, y2))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = [row for row in reader]
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        if "label" in header:
            j = header.index("label")
            targets = np.array([int(r[j]) for r in data], dtype=np.int64)
        else:
            ycols = [i for i, h in enumerate(header) if h.startswith("y")]
            targets = np.array([[float(r[i]) for i in ycols] for r in data])
        inputs = np.array([[float(r[i]) for i in xcols] for r in data])
        return cls(inputs, targets)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a fully connected network.

    ``layer_widths`` lists the input width first and the output width last.
    The activation is applied after every hidden layer; the output layer is
    always linear.
    """

    layer_widths: tuple
    activation: str = "tanh"
    loss: str = "squared_error"
    bias: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "cross_entropy" and widths[-1] < 2:
            raise ValueError("cross_entropy needs an output width of at least 2")

    @property
    def dim(self):
        return sum(a * b + (b if self.bias else 0)
                   for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def unflatten(self, params):
        """Split a flat vector into ``[(W, b), ...]`` views (b is None without biases)."""
        w = _as_params(params, self.dim)
        layers, pos = [], 0
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = w[pos:pos + a * b].reshape(a, b)
            pos += a * b
            bias = None
            if self.bias:
                bias = w[pos:pos + b]
                pos += b
            layers.append((W, bias))
        return layers


class Mlp:
    """Loss and gradient evaluation for the network described by a :class:`NetworkSpec`."""

    def __init__(self, spec):
        self.spec = spec

    def __repr__(self):
        return f"Mlp({self.spec!r})"

    def __eq__(self, other):
        return isinstance(other, Mlp) and other.spec == self.spec

    def __hash__(self):
        return hash(self.spec)

    @property
    def dim(self):
        return self.spec.dim

    def _forward(self, params, X):
        layers = self.spec.unflatten(params)
        acts, pre = [X], []
        a = X
        for i, (W, b) in enumerate(layers):
            z = a @ W
            if b is not None:
                z = z + b
            pre.append(z)
            a = z if i == len(layers) - 1 else _activate(self.spec.activation, z)
            acts.append(a)
        _check_finite(a, "network output")
        return layers, acts, pre

    def _prepare(self, X, Y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[0] == 0:
            raise ValueError("empty batch")
        if X.shape[1] != self.spec.layer_widths[0]:
            raise DimensionError(f"input width {X.shape[1]} != {self.spec.layer_widths[0]}")
        Y = np.asarray(Y)
        if self.spec.loss == "squared_error":
            Y = Y.astype(np.float64).reshape(X.shape[0], self.spec.layer_widths[-1])
        else:
            Y = Y.astype(np.int64).reshape(X.shape[0])
        return X, Y

    def _per_example_loss(self, out, Y):
        if self.spec.loss == "squared_error":
            return np.sum((out - Y) ** 2, axis=1)
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=1))
        return logz - shifted[np.arange(len(Y)), Y]

    def _output_delta(self, out, Y):
        # derivative of the per-example (unaveraged) loss w.r.t. the output
        if self.spec.loss == "squared_error":
            return 2.0 * (out - Y)
        p = _softmax(out)
        p[np.arange(len(Y)), Y] -= 1.0
        return p

    def outputs(self, params, X):
        X = np.asarray(X, dtype=np.float64)
        return self._forward(params, X if X.ndim == 2 else X[None, :])[1][-1]

    def loss(self, params, X, Y):
        X, Y = self._prepare(X, Y)
        _, acts, _ = self._forward(params, X)
        val = float(np.mean(self._per_example_loss(acts[-1], Y)))
        _check_finite(val, "loss")
        return val

    def _backward(self, params, X, Y, per_example):
        X, Y = self._prepare(X, Y)
        layers, acts, pre = self._forward(params, X)
        n = X.shape[0]
        delta = self._output_delta(acts[-1], Y)
        if not per_example:
            delta = delta / n
        pieces = []
        for i in range(len(layers) - 1, -1, -1):
            W, b = layers[i]
            a_prev = acts[i]
            if per_example:
                gW = np.einsum("ni,nj->nij", a_prev, delta).reshape(n, -1)
                gb = delta if b is not None else None
            else:
                gW = (a_prev.T @ delta).ravel()
                gb = delta.sum(axis=0) if b is not None else None
            pieces.append((gW, gb))
            if i > 0:
                delta = (delta @ W.T) * _activate_grad(self.spec.activation, pre[i - 1])
        out = []
        for gW, gb in reversed(pieces):
            out.append(gW)
            if gb is not None:
                out.append(gb)
        g = np.concatenate(out, axis=-1)
        _check_finite(g, "gradient")
        return g

    def grad(self, params, X, Y):
        return self._backward(params, X, Y, per_example=False)

    def per_example_grads(self, params, X, Y):
        return self._backward(params, X, Y, per_example=True)

    def accuracy(self, params, X, Y):
        if self.spec.loss != "cross_entropy":
            return float("nan")
        X, Y = self._prepare(X, Y)
        pred = np.argmax(self.outputs(params, X), axis=1)
        return float(np.mean(pred == Y))


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(kind, z):
    if kind == "relu":
        # subgradient at 0 is taken to be 0
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class QuadraticLoss:
    """The bowl ``0.5 (w - w*)^T H (w - w*)``; batches are ignored."""

    hessian: np.ndarray
    minimizer: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.hessian, dtype=np.float64)
        w = np.asarray(self.minimizer, dtype=np.float64).ravel()
        if H.shape != (w.size, w.size):
            raise DimensionError("hessian and minimizer shapes disagree")
        object.__setattr__(self, "hessian", H)
        object.__setattr__(self, "minimizer", w)

    @property
    def dim(self):
        return self.minimizer.size

    def loss(self, params, X=None, Y=None):
        r = _as_params(params, self.dim) - self.minimizer
        return float(0.5 * r @ self.hessian @ r)

    def grad(self, params, X=None, Y=None):
        return self.hessian @ (_as_params(params, self.dim) - self.minimizer)

    def per_example_grads(self, params, X, Y):
        return np.tile(self.grad(params), (len(X), 1))

    def accuracy(self, params, X=None, Y=None):
        return float("nan")


@dataclass(frozen=True)
class RingValley:
    """``(|w|^2 - radius^2)^2`` plus a small quadratic term along extra axes.

    The zero set of the first two coordinates is a circle, so two minimizers on
    the circle are joined by a curved valley while the straight chord between
    them climbs over the ridge.
    """

    dim: int = 2
    radius: float = 1.0

    def loss(self, params, X=None, Y=None):
        w = _as_params(params, self.dim)
        r2 = w[0] ** 2 + w[1] ** 2
        return float((r2 - self.radius ** 2) ** 2 + np.sum(w[2:] ** 2))

    def grad(self, params, X=None, Y=None):
        w = _as_params(params, self.dim)
        r2 = w[0] ** 2 + w[1] ** 2
        g = 2.0 * w.copy()
        g[:2] = 4.0 * (r2 - self.radius ** 2) * w[:2]
        return g

    def per_example_grads(self, params, X, Y):
        return np.tile(self.grad(params), (len(X), 1))

    def accuracy(self, params, X=None, Y=None):
        return float("nan")


def as_model(model):
    """Wrap a bare :class:`NetworkSpec`; other models pass through unchanged."""
    return Mlp(model) if isinstance(model, NetworkSpec) else model


def _batch_xy(batch):
    if batch is None:
        return None, None
    if isinstance(batch, Dataset):
        return batch.inputs, batch.targets
    return batch


def forward(model, params, batch):
    """Mean per-example loss of ``model`` at ``params`` on ``batch``.

    ``batch`` is a :class:`Dataset` or an ``(inputs, targets)`` pair.
    """
    X, Y = _batch_xy(batch)
    return as_model(model).loss(params, X, Y)


def gradient(model, params, batch):
    X, Y = _batch_xy(batch)
    return as_model(model).grad(params, X, Y)


def grad_check(model, params, batch, eps=1e-5):
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = np.asarray(params, dtype=np.float64)
    g = gradient(model, w, batch)
    worst = 0.0
    for j in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[j] += eps
        wm[j] -= eps
        fd = (forward(model, wp, batch) - forward(model, wm, batch)) / (2.0 * eps)
        worst = max(worst, abs(g[j] - fd) / max(1.0, abs(g[j])))
    return worst


def init_params(spec, seed, scale=None):
    """Gaussian initializer; ``scale=None`` gives fan-in scaled std per layer."""
    rng = np.random.default_rng(seed)
    parts = []
    for a, b in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        std = scale if scale is not None else 1.0 / np.sqrt(a)
        parts.append(rng.normal(0.0, std, size=a * b))
        if spec.bias:
            parts.append(np.zeros(b))
    return np.concatenate(parts)


class MinibatchStream:
    """Replayable stream of minibatch index sets.

    The batch at a given position depends only on ``(seed, position)``.  With
    ``shuffle=False`` (the default) every batch is an i.i.d. uniform draw with
    replacement; with ``shuffle=True`` each epoch walks a fresh permutation,
    and the last batch of an epoch may be short.  Indices are 0-based.
    """

    def __init__(self, seed, n, batch_size, position=0, shuffle=False):
        if n < 1 or batch_size < 1:
            raise ValueError("n and batch_size must be positive")
        self.seed = int(seed)
        self.n = int(n)
        self.batch_size = int(batch_size)
        self.position = int(position)
        self.shuffle = bool(shuffle)
        self._block_len = max(1, 2 ** 16 // self.batch_size)
        self._cache_key = None
        self._cache = None

    @property
    def steps_per_epoch(self):
        return -(-self.n // self.batch_size)

    def indices_at(self, position):
        if self.shuffle:
            epoch, k = divmod(position, self.steps_per_epoch)
            if self._cache_key != ("perm", epoch):
                rng = np.random.default_rng([self.seed, 1, epoch])
                self._cache = rng.permutation(self.n)
                self._cache_key = ("perm", epoch)
            return self._cache[k * self.batch_size:(k + 1) * self.batch_size].copy()
        block, k = divmod(position, self._block_len)
        if self._cache_key != ("iid", block):
            rng = np.random.default_rng([self.seed, 0, block])
            self._cache = rng.integers(0, self.n, size=(self._block_len, self.batch_size))
            self._cache_key = ("iid", block)
        return self._cache[k].copy()

    def state(self):
        return {"seed": self.seed, "n": self.n, "batch_size": self.batch_size,
                "position": self.position, "shuffle": self.shuffle}


def next_batch(stream):
    idx = stream.indices_at(stream.position)
    stream.position += 1
    return idx


def make_synthetic(kind, seed, n, dims, rank=None, noise=0.1, input_scale=0.5):
    """Deterministic synthetic datasets.

    ``rank_deficient_regression``: ``dims`` is the input dimension ``p``.
    Inputs lie in a random ``rank``-dimensional subspace, so the Hessian of a
    bias-free linear model has the orthogonal complement as its exact null
    space.  Both bases are returned in ``meta`` (``row_basis``,
    ``null_basis``), together with the teacher weights.

    ``blobs``: ``dims`` is ``(p, classes)``; Gaussian clusters with integer
    labels.
    """
    rng = np.random.default_rng(seed)
    if kind == "rank_deficient_regression":
        p = int(dims if np.isscalar(dims) else dims[0])
        rank = p if rank is None else int(rank)
        if not 1 <= rank <= p:
            raise ValueError(f"rank must be in [1, {p}], got {rank}")
        Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
        row, null = Q[:, :rank], Q[:, rank:]
        z = rng.normal(0.0, input_scale, size=(n, rank))
        X = z @ row.T
        teacher = row @ rng.normal(size=rank)
        y = X @ teacher + noise * rng.normal(size=n)
        return Dataset(X, y[:, None], meta={"row_basis": row, "null_basis": null, "teacher": teacher})
    if kind == "blobs":
        p, classes = (int(d) for d in dims)
        if classes < 2:
            raise ValueError("blobs need at least 2 classes")
        centers = rng.normal(0.0, 3.0, size=(classes, p))
        labels = rng.integers(0, classes, size=n)
        X = centers[labels] + rng.normal(size=(n, p))
        return Dataset(X, labels.astype(np.int64), meta={"centers": centers})
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def load_dataset(path):
    return Dataset.from_csv(Path(path))
