"""Client populations, server objectives, data partitioning and participation.

Quadratic populations share one diagonal Hessian, which keeps the global
optimum, the gradient dissimilarity sigma_G and the biased FedAvg fixed
point available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, qmc

from .errors import DimensionError
from .objectives import Constants, LogisticObjective, MlpObjective, Objective, QuadraticObjective, as_point


@dataclass(frozen=True)
class ClientSpec:
    id: int
    objective: Objective
    weight: float
    sample_count: int = 0


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    clients: tuple[ClientSpec, ...]
    global_optimum: np.ndarray | None = None
    sigma_g: float | None = None
    constants: Constants = field(default_factory=lambda: Constants(None, None, None))
    # one objective over the concatenated client data, valid when the
    # weights are proportional to client sample counts
    pooled: Objective | None = None

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if not self.clients:
            raise ValueError("population needs at least one client")
        dims = {c.objective.dim for c in self.clients}
        if len(dims) != 1:
            raise DimensionError(f"clients disagree on dimension: {sorted(dims)}")
        if [c.id for c in self.clients] != list(range(len(self.clients))):
            raise ValueError("client ids must be 0..M-1 in order")
        w = np.array([c.weight for c in self.clients])
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("client weights must lie in (0, 1] and sum to 1")
        quad = None
        if self.is_common_quadratic():
            C = np.stack([c.objective.center for c in self.clients])
            quad = (self.clients[0].objective.hessian, C, w, w @ C)
        object.__setattr__(self, "_quad", quad)

    @property
    def M(self) -> int:
        return len(self.clients)

    @property
    def dim(self) -> int:
        return self.clients[0].objective.dim

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clients])

    def loss(self, x) -> float:
        if self._quad is not None:
            h, C, w, _ = self._quad
            return 0.5 * float(w @ (((x - C) ** 2) @ h))
        if self.pooled is not None:
            return self.pooled.loss(x)
        return float(sum(c.weight * c.objective.loss(x) for c in self.clients))

    def gradient(self, x) -> np.ndarray:
        if self._quad is not None:
            # sum_i w_i H (x - c_i) collapses to H (x - sum_i w_i c_i)
            h, _, _, c_mean = self._quad
            return h * (x - c_mean)
        if self.pooled is not None:
            return self.pooled.gradient(x)
        g = np.zeros(self.dim)
        for c in self.clients:
            g += c.weight * c.objective.gradient(x)
        return g

    def loss_and_gradient(self, x) -> tuple[float, np.ndarray]:
        if self.pooled is not None and hasattr(self.pooled, "loss_and_gradient"):
            return self.pooled.loss_and_gradient(x)
        return self.loss(x), self.gradient(x)

    def exact_gradient(self, x) -> np.ndarray:
        return self.gradient(as_point(x, self.dim))

    def is_common_quadratic(self) -> bool:
        objs = [c.objective for c in self.clients]
        if not all(isinstance(o, QuadraticObjective) for o in objs):
            return False
        h0 = objs[0].hessian
        return all(np.array_equal(o.hessian, h0) for o in objs)


def _balanced(M: int) -> np.ndarray:
    return np.full(M, 1.0 / M)


def _normalise_weights(weights, M: int) -> np.ndarray:
    if weights is None or (isinstance(weights, str) and weights == "balanced"):
        return _balanced(M)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (M,) or np.any(w <= 0):
        raise ValueError("weights must be M positive numbers")
    return w / w.sum()


def quadratic_population(centers, hessian, sigma=0.0, weights=None) -> PopulationSpec:
    """Population of quadratics sharing the diagonal Hessian ``hessian``.

    ``sigma`` is one noise level for everyone or one per client; the
    population's declared bound uses the largest.
    """
    C = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    M, d = C.shape
    h = np.asarray(hessian, dtype=np.float64)
    if h.ndim == 0:
        h = np.full(d, float(h))
    if h.shape != (d,):
        raise DimensionError("hessian diagonal must have length d")
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        raise ValueError("hessian must be positive definite")
    w = _normalise_weights(weights, M)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (M,))
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    clients = tuple(
        ClientSpec(i, QuadraticObjective(h, C[i], float(sig[i])), float(w[i])) for i in range(M)
    )
    # anchored at C[0] so identical centers give x* and sigma_G without rounding
    x_star = C[0] + w @ (C - C[0])
    sigma_g = float(np.max(np.linalg.norm(h * (C - x_star), axis=1)))
    consts = Constants(L=float(h.max()), mu=float(h.min()), sigma_bound=float(np.sqrt(d) * sig.max()))
    return PopulationSpec(clients, x_star, sigma_g, consts)


def unit_directions(M: int, d: int, seed: int) -> np.ndarray:
    """M unit vectors in R^d from a scrambled Halton sequence."""
    if d == 1:
        return np.where(np.arange(M) % 2 == 0, 1.0, -1.0)[:, None]
    u = qmc.Halton(d=d, scramble=True, seed=seed).random(M)
    z = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def make_quadratic_population(
    M: int,
    d: int,
    center_spread: float,
    hessian=1.0,
    sigma=0.0,
    weights=None,
    seed: int = 0,
    center=None,
) -> PopulationSpec:
    """Clients c_i = c_bar + spread * (u_i - sum_j w_j u_j) around ``center``.

    Re-centering puts the weighted mean of the centers exactly at ``center``,
    and sigma_G grows linearly with the spread.
    """
    if M < 1 or d < 1:
        raise ValueError("M and d must be at least 1")
    if center_spread < 0:
        raise ValueError("center_spread must be non-negative")
    w = _normalise_weights(weights, M)
    c_bar = np.zeros(d) if center is None else as_point(center, d)
    u = unit_directions(M, d, seed)
    u = u - w @ u
    return quadratic_population(c_bar + center_spread * u, hessian, sigma, w)


def fedavg_fixed_point(pop: PopulationSpec, included) -> np.ndarray:
    """Fixed point of noiseless FedAvg when exactly ``included`` participate.

    With a shared Hessian every local step contracts towards c_i by the same
    factor, so averaging lands on the plain mean of the included centers for
    any K >= 1 and step in (0, 1/L).
    """
    if not pop.is_common_quadratic():
        raise ValueError("fixed point is closed-form only for quadratics with a common Hessian")
    ids = sorted(set(int(i) for i in included))
    if not ids:
        raise ValueError("included set is empty")
    return np.mean([pop.clients[i].objective.center for i in ids], axis=0)


# --------------------------------------------------------------------------
# server objective


@dataclass(frozen=True, eq=False)
class ServerObjective:
    objective: Objective
    n_T: int | None = None
    grad_noise_std: float | None = None
    shift: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.objective.dim


def make_quadratic_server(pop: PopulationSpec, sigma_s: float, shift=None) -> ServerObjective:
    """Server holding the exact population quadratic, optionally displaced."""
    if not pop.is_common_quadratic():
        raise ValueError("quadratic server needs a common-Hessian quadratic population")
    h = pop.clients[0].objective.hessian
    center = pop.global_optimum.copy()
    delta = None
    if shift is not None:
        delta = as_point(shift, pop.dim)
        center = center + delta
    return ServerObjective(QuadraticObjective(h, center, float(sigma_s)), None, float(sigma_s), delta)


def make_data_server(objective: Objective) -> ServerObjective:
    n = getattr(objective, "features", None)
    return ServerObjective(objective, None if n is None else int(n.shape[0]))


# --------------------------------------------------------------------------
# datasets and partitions


def label_partition(labels, p: int, M: int, rng: np.random.Generator, samples_per_class: int | None = None):
    """Split sample indices over M clients so each holds exactly p classes.

    Client i is given classes perm[(i*p + j) mod C], j < p, so class usage
    is as even as the counts allow; each class's samples are shuffled and
    split into near-equal chunks among the clients that use it.  With
    ``samples_per_class`` only that many samples of each class are handed
    out.  Returns a list of M sorted index arrays.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    C = len(classes)
    if not 1 <= p <= C:
        raise ValueError(f"p must be in [1, {C}], got {p}")
    if M < 1:
        raise ValueError("M must be positive")
    perm = classes[rng.permutation(C)]
    owners: dict[int, list[int]] = {int(c): [] for c in classes}
    for i in range(M):
        for j in range(p):
            owners[int(perm[(i * p + j) % C])].append(i)
    parts: list[list[np.ndarray]] = [[] for _ in range(M)]
    for c in classes:
        users = owners[int(c)]
        if not users:
            continue
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        if samples_per_class is not None:
            idx = idx[:samples_per_class]
        if len(idx) < len(users):
            raise ValueError(f"class {c} has {len(idx)} samples for {len(users)} clients")
        for u, chunk in zip(users, np.array_split(idx, len(users))):
            parts[u].append(chunk)
    return [np.sort(np.concatenate(ch)) for ch in parts]


def logistic_population(features, labels, parts, n_classes: int, l2_reg=0.0, batch_size=64) -> PopulationSpec:
    """Balanced (lambda_i = 1/M) population of logistic clients."""
    M = len(parts)
    clients = []
    for i, idx in enumerate(parts):
        obj = LogisticObjective(features[idx], labels[idx], n_classes, l2_reg, batch_size)
        clients.append(ClientSpec(i, obj, 1.0 / M, len(idx)))
    Ls = [c.objective.constants().L for c in clients]
    pooled = None
    sizes = {len(idx) for idx in parts}
    if len(sizes) == 1:
        allidx = np.concatenate(parts)
        pooled = LogisticObjective(features[allidx], labels[allidx], n_classes, l2_reg, batch_size)
    return PopulationSpec(tuple(clients), None, None, Constants(max(Ls), None, None), pooled)


def mlp_population(datasets, layer_sizes, activation="tanh", batch_size=16) -> PopulationSpec:
    """Balanced population of MLP clients; pooled evaluation when sizes match."""
    M = len(datasets)
    clients = tuple(
        ClientSpec(i, MlpObjective(tuple(layer_sizes), X, y, activation, batch_size), 1.0 / M, len(y))
        for i, (X, y) in enumerate(datasets)
    )
    pooled = None
    if len({len(y) for _, y in datasets}) == 1:
        X = np.concatenate([X for X, _ in datasets])
        y = np.concatenate([y for _, y in datasets])
        pooled = MlpObjective(tuple(layer_sizes), X, y, activation, batch_size)
    return PopulationSpec(clients, None, None, Constants(None, None, None), pooled)


def synthetic_blobs(M: int, n_per_client: int, rng: np.random.Generator, shift: float = 1.0, skew: float = 0.8):
    """Two-class Gaussian data per client with client-specific drift and label skew.

    Class k sits at (+-1.5, 0) rotated by a client angle; a fraction ``skew``
    of each client's labels comes from its favoured class.
    """
    out = []
    for i in range(M):
        angle = 2 * math.pi * i / M
        offset = shift * np.array([math.cos(angle), math.sin(angle)])
        fav = i % 2
        y = np.where(rng.random(n_per_client) < 0.5 + (skew - 0.5), fav, 1 - fav).astype(np.int64)
        mu = np.where(y[:, None] == 0, -1.5, 1.5) * np.array([1.0, 0.0])
        X = mu + offset + rng.standard_normal((n_per_client, 2))
        out.append((X, y))
    return out


# --------------------------------------------------------------------------
# participation


_VARIANTS = ("full", "uniform", "excluded", "adversarial")


@dataclass(frozen=True)
class ParticipationProcess:
    variant: str
    M: int
    m: int | None = None
    s: int = 0

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}")
        m = self.M if self.variant == "full" else self.m
        if m is None:
            raise ValueError(f"{self.variant} participation needs m")
        if self.variant != "excluded" and self.s:
            raise ValueError("only the excluded variant takes s")
        if self.M < 1 or not 1 <= m <= self.M - self.s or self.s < 0:
            raise ValueError(f"infeasible participation: M={self.M}, m={m}, s={self.s}")
        object.__setattr__(self, "m", m)

    @property
    def capacity(self) -> float:
        return self.m / self.M

    @property
    def excluded_count(self) -> int:
        return self.s

    @property
    def eligible(self) -> range:
        return range(self.M - self.s)


def sample_participation(proc: ParticipationProcess, M: int, round: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Client ids taking part in ``round``, sorted ascending.

    ``round`` is not consumed here; callers key ``rng`` by it, so the same
    (process, seed, round) always gives the same set.
    """
    if M != proc.M:
        raise ValueError(f"process built for M={proc.M}, called with M={M}")
    if proc.variant == "full":
        return tuple(range(M))
    if proc.variant == "adversarial":
        return tuple(range(proc.m))
    pool = M - proc.s
    chosen = rng.choice(pool, size=proc.m, replace=False)
    return tuple(sorted(int(i) for i in chosen))
