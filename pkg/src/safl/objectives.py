"""Client and server loss functions with exact and stochastic gradients.

Three families are provided: diagonal quadratics (exact constants, Gaussian
gradient noise), multinomial logistic regression and a small fully
connected network.  Objectives are immutable after construction; every
stochastic call takes its own generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import DimensionError, NonFiniteError


@dataclass(frozen=True)
class Constants:
    L: float | None
    mu: float | None
    sigma_bound: float | None


class Objective(Protocol):
    dim: int

    def loss(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...

    def stochastic_gradient(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def constants(self) -> Constants: ...


def as_point(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"model point must be a vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("model point has non-finite entries")
    return x


def _checked(g: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient has non-finite entries")
    return g


def exact_gradient(x, obj: Objective) -> np.ndarray:
    return _checked(obj.gradient(as_point(x, obj.dim)))


def stochastic_gradient(x, obj: Objective, rng: np.random.Generator) -> np.ndarray:
    return _checked(obj.stochastic_gradient(as_point(x, obj.dim), rng))


def objective_constants(obj: Objective) -> Constants:
    return obj.constants()


# --------------------------------------------------------------------------
# quadratic


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """F(x) = 0.5 (x - c)^T H (x - c) with diagonal H.

    ``hessian`` is the diagonal of H.  Stochastic gradients add i.i.d.
    N(0, sigma^2) noise per coordinate, so E||g - grad F||^2 = d sigma^2.
    """

    hessian: np.ndarray
    center: np.ndarray
    grad_noise_std: float = 0.0

    def __post_init__(self):
        c = as_point(self.center)
        h = np.asarray(self.hessian, dtype=np.float64)
        if h.ndim == 0:
            h = np.full(c.shape[0], float(h))
        if h.shape != c.shape:
            raise DimensionError(f"hessian diagonal {h.shape} does not match center {c.shape}")
        if not np.all(np.isfinite(h)) or np.any(h <= 0):
            raise ValueError("hessian must be positive definite")
        if self.grad_noise_std < 0:
            raise ValueError("grad_noise_std must be non-negative")
        h.setflags(write=False)
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "hessian", h)
        object.__setattr__(self, "center", c)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def loss(self, x):
        r = x - self.center
        return 0.5 * float(r @ (self.hessian * r))

    def gradient(self, x):
        return self.hessian * (x - self.center)

    def stochastic_gradient(self, x, rng):
        g = self.hessian * (x - self.center)
        if self.grad_noise_std > 0:
            g = g + self.grad_noise_std * rng.standard_normal(self.dim)
        return g

    def constants(self):
        return Constants(
            L=float(self.hessian.max()),
            mu=float(self.hessian.min()),
            sigma_bound=float(np.sqrt(self.dim) * self.grad_noise_std),
        )


# --------------------------------------------------------------------------
# logistic regression


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(z: np.ndarray, y: np.ndarray) -> float:
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


@dataclass(frozen=True, eq=False)
class LogisticObjective:
    """Multinomial logistic loss, weights stored as a flattened (p, C) matrix.

    There is no separate bias; append a constant feature column if one is
    wanted.  Minibatches are drawn with replacement.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    l2_reg: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DimensionError("features must be (n, p) with n labels")
        if X.shape[0] == 0:
            raise ValueError("empty dataset")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels out of range")
        if self.batch_size < 1 or self.l2_reg < 0:
            raise ValueError("batch_size must be positive and l2_reg non-negative")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def dim(self) -> int:
        return self.features.shape[1] * self.n_classes

    def _weights(self, x):
        return x.reshape(self.features.shape[1], self.n_classes)

    def _loss_on(self, x, X, y):
        W = self._weights(x)
        return _cross_entropy(X @ W, y) + 0.5 * self.l2_reg * float(x @ x)

    def _grad_on(self, x, X, y):
        W = self._weights(x)
        P = _softmax(X @ W)
        P[np.arange(len(y)), y] -= 1.0
        return (X.T @ P).ravel() / len(y) + self.l2_reg * x

    def loss(self, x):
        return self._loss_on(x, self.features, self.labels)

    def gradient(self, x):
        return self._grad_on(x, self.features, self.labels)

    def stochastic_gradient(self, x, rng):
        idx = rng.integers(0, self.features.shape[0], size=self.batch_size)
        return self._grad_on(x, self.features[idx], self.labels[idx])

    def predict(self, x, X):
        return np.argmax(np.asarray(X) @ self._weights(x), axis=1)

    def constants(self):
        # softmax cross-entropy has Hessian <= 0.5 I in the logits
        n = self.features.shape[0]
        spectral = np.linalg.norm(self.features, 2) ** 2 / n if self.features.any() else 0.0
        L = 0.5 * spectral + self.l2_reg
        # per-sample gradient norm <= sqrt(2) ||x_i||; with-replacement batch
        max_row = float(np.sqrt((self.features**2).sum(axis=1).max()))
        sigma = np.sqrt(2.0 / self.batch_size) * max_row
        return Constants(L=float(L), mu=self.l2_reg if self.l2_reg > 0 else None, sigma_bound=float(sigma))


# --------------------------------------------------------------------------
# small MLP


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, z: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a, z: (z > 0).astype(np.float64)),
}


@dataclass(frozen=True, eq=False)
class MlpObjective:
    """Fully connected classifier with softmax cross-entropy output.

    Parameters are packed layer by layer as (W_l row-major, b_l).
    """

    layer_sizes: tuple[int, ...]
    features: np.ndarray
    labels: np.ndarray
    activation: str = "tanh"
    batch_size: int = 16
    l2_reg: float = 0.0
    _shapes: tuple = field(init=False, repr=False)
    _XT: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("layer_sizes needs at least input and output sizes, all positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != sizes[0] or y.shape != (X.shape[0],):
            raise DimensionError("features must be (n, layer_sizes[0]) with n labels")
        if y.min() < 0 or y.max() >= sizes[-1]:
            raise ValueError("labels out of range")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "_shapes", tuple(zip(sizes[:-1], sizes[1:])))
        object.__setattr__(self, "_XT", np.ascontiguousarray(X.T))

    @property
    def dim(self) -> int:
        return sum(i * o + o for i, o in self._shapes)

    def unpack(self, x):
        params, off = [], 0
        for i, o in self._shapes:
            W = x[off : off + i * o].reshape(i, o)
            off += i * o
            b = x[off : off + o]
            off += o
            params.append((W, b))
        return params

    def init_point(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        parts = []
        for i, o in self._shapes:
            parts.append(scale * rng.standard_normal(i * o) / np.sqrt(i))
            parts.append(np.zeros(o))
        return np.concatenate(parts)

    # Internally samples run along the second axis: reductions over a handful
    # of classes per sample are far cheaper on (C, n) than on (n, C).
    def _forward(self, x, XT):
        act, _ = _ACTIVATIONS[self.activation]
        params = self.unpack(x)
        acts, pre = [XT], []
        a = XT
        last = len(params) - 1
        for li, (W, b) in enumerate(params):
            z = W.T @ a + b[:, None]
            pre.append(z)
            a = z if li == last else act(z)
            acts.append(a)
        return params, acts, pre

    @staticmethod
    def _ce_cols(Z, y):
        Z = Z - Z.max(axis=0)
        lse = np.log(np.exp(Z).sum(axis=0))
        return float(np.mean(lse - Z[y, np.arange(len(y))]))

    def _loss_on(self, x, XT, y):
        _, acts, _ = self._forward(x, XT)
        return self._ce_cols(acts[-1], y) + 0.5 * self.l2_reg * float(x @ x)

    def _grad_on(self, x, XT, y, with_loss=False):
        _, dact = _ACTIVATIONS[self.activation]
        params, acts, pre = self._forward(x, XT)
        Z = acts[-1] - acts[-1].max(axis=0)
        E = np.exp(Z)
        S = E.sum(axis=0)
        cols = np.arange(len(y))
        if with_loss:
            loss = float(np.mean(np.log(S) - Z[y, cols])) + 0.5 * self.l2_reg * float(x @ x)
        delta = E / S
        delta[y, cols] -= 1.0
        delta /= len(y)
        grads = []
        for li in range(len(params) - 1, -1, -1):
            W, _ = params[li]
            grads.append(delta.sum(axis=1))
            grads.append((acts[li] @ delta.T).ravel())
            if li > 0:
                delta = (W @ delta) * dact(acts[li], pre[li - 1])
        g = np.concatenate(grads[::-1]) + self.l2_reg * x
        return (loss, g) if with_loss else g

    def loss(self, x):
        return self._loss_on(x, self._XT, self.labels)

    def gradient(self, x):
        return self._grad_on(x, self._XT, self.labels)

    def loss_and_gradient(self, x):
        return self._grad_on(x, self._XT, self.labels, with_loss=True)

    def stochastic_gradient(self, x, rng):
        idx = rng.integers(0, self.features.shape[0], size=self.batch_size)
        return self._grad_on(x, self._XT[:, idx], self.labels[idx])

    def predict(self, x, X):
        _, acts, _ = self._forward(x, np.asarray(X, dtype=np.float64).T)
        return np.argmax(acts[-1], axis=0)

    def constants(self):
        # no global smoothness or variance bound for unconstrained weights
        return Constants(L=None, mu=None, sigma_bound=None)


def estimate_smoothness(obj: Objective, points, rng: np.random.Generator, radius: float = 0.1, pairs: int = 50) -> float:
    """Largest observed ||grad(x) - grad(y)|| / ||x - y|| near the given points."""
    best = 0.0
    for p in points:
        p = as_point(p, obj.dim)
        gp = obj.gradient(p)
        for _ in range(pairs):
            v = rng.standard_normal(obj.dim)
            v *= radius / np.linalg.norm(v)
            best = max(best, float(np.linalg.norm(obj.gradient(p + v) - gp) / radius))
    return best
