"""SAFARI and FedAvg round loops plus the admissible-q diagnostics.

Randomness layout (see ``safl.rng``): round r draws its Bernoulli(q) coin
from ``("coin", r)``, its client set from ``("participation", r)``, client
i's minibatch noise from ``("client-noise", r, i)`` and the server's from
``("server-noise", r)``.  Because none of these streams feed each other,
``run_safari`` with q=1 replays ``run_fedavg`` exactly and q=0 replays
``run_centralized_sgd`` exactly.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .objectives import Objective, as_point
from .population import ClientSpec, ParticipationProcess, PopulationSpec, ServerObjective, sample_participation
from .rng import stream

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e12

CLIENT = "client"
SERVER = "server"


@dataclass
class SafariConfig:
    q: float = 0.5
    eta_c: float | None = None
    eta_s: float = 0.1
    K: int = 1
    R: int = 100
    couple_steps: bool = False
    seed: int = 0
    x0: np.ndarray | None = None
    rs_rc_band: tuple[float, float] | None = None
    track_local_grads: bool = True
    # SGD steps taken per server round; 1 is the plain algorithm
    server_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must lie in [0, 1]")
        if self.K < 1 or self.R < 1 or self.server_steps < 1:
            raise ValueError("K, R and server_steps must be at least 1")
        if self.eta_s < 0:
            raise ValueError("eta_s must be non-negative")
        if self.couple_steps:
            coupled = 2.0 * self.eta_s / self.K
            if self.eta_c is not None and not math.isclose(self.eta_c, coupled, rel_tol=1e-15, abs_tol=0.0):
                raise ValueError(f"couple_steps requires eta_c = 2 eta_s / K = {coupled!r}")
            self.eta_c = coupled
        if self.eta_c is None:
            self.eta_c = self.eta_s
        if self.eta_c < 0:
            raise ValueError("eta_c must be non-negative")


@dataclass(frozen=True)
class RoundRecord:
    """Metrics of the iterate produced by round ``round`` (i.e. x_{round+1})."""

    round: int
    kind: str
    grad_norm_sq: float
    dist_sq: float | None
    loss: float
    participating: tuple[int, ...] | None


@dataclass
class DiagnosticStats:
    g1: float = 0.0
    g2: float = 0.0
    g3: list[float] = field(default_factory=list)
    g4: list[float | None] = field(default_factory=list)


@dataclass
class RunSummary:
    final_grad_norm_sq: float
    final_dist_sq: float | None
    min_grad_norm_sq: float
    n_client_rounds: int
    n_server_rounds: int
    rs_rc_ratio: float
    diagnostics: DiagnosticStats | None = None
    slope: float | None = None
    test_accuracy: float | None = None
    final_x: np.ndarray | None = None

    def core(self) -> dict:
        """Fields that are pure functions of the round records."""
        return {
            "final_grad_norm_sq": self.final_grad_norm_sq,
            "final_dist_sq": self.final_dist_sq,
            "min_grad_norm_sq": self.min_grad_norm_sq,
            "n_client_rounds": self.n_client_rounds,
            "n_server_rounds": self.n_server_rounds,
            "rs_rc_ratio": self.rs_rc_ratio,
        }


def summarize(records: Sequence[RoundRecord]) -> RunSummary:
    if not records:
        raise ValueError("no records to summarize")
    n_c = sum(1 for r in records if r.kind == CLIENT)
    n_s = len(records) - n_c
    return RunSummary(
        final_grad_norm_sq=records[-1].grad_norm_sq,
        final_dist_sq=records[-1].dist_sq,
        min_grad_norm_sq=min(r.grad_norm_sq for r in records),
        n_client_rounds=n_c,
        n_server_rounds=n_s,
        rs_rc_ratio=(n_s / n_c) if n_c else math.inf,
    )


# --------------------------------------------------------------------------
# building blocks


def _diverged(x) -> bool:
    # NaN fails the comparison, so this also catches non-finite entries
    return not float(x @ x) <= DIVERGENCE_NORM**2


def _check_iterate(x, round_index, last, records):
    if _diverged(x):
        raise DivergenceError(
            f"iterate diverged at round {round_index}", last_state=last, round_index=round_index, records=records
        )


def _local_steps(x_r, obj: Objective, K: int, eta_c: float, rng, collect: bool):
    x = x_r.copy()
    gsum = np.zeros_like(x) if collect else None
    for _ in range(K):
        if collect:
            gsum += obj.gradient(x)
        g = obj.stochastic_gradient(x, rng)
        x = x - eta_c * g
        if _diverged(x):
            raise DivergenceError("local update diverged", last_state=x_r)
    return x, gsum


def local_update(x_r, client: ClientSpec | Objective, K: int, eta_c: float, rng: np.random.Generator) -> np.ndarray:
    """K local SGD steps on one client, starting from x_r."""
    if eta_c < 0:
        raise ValueError("eta_c must be non-negative")
    obj = client.objective if isinstance(client, ClientSpec) else client
    x, _ = _local_steps(as_point(x_r, obj.dim), obj, K, eta_c, rng, False)
    return x


def aggregate(models: Mapping[int, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean, summed in a canonical order.

    A mapping is summed in ascending client id; a bare sequence is first put
    in lexicographic order of its entries, so any permutation of the input
    gives the same bits.
    """
    if isinstance(models, Mapping):
        items = [np.asarray(models[k], dtype=np.float64) for k in sorted(models)]
    else:
        items = [np.asarray(m, dtype=np.float64) for m in models]
        if items:
            order = np.lexsort(np.stack(items, axis=1)[::-1])
            items = [items[i] for i in order]
    if not items:
        raise ValueError("cannot aggregate an empty list of models")
    if len({m.shape for m in items}) != 1:
        raise ValueError("models have different dimensions")
    acc = items[0].copy()
    for m in items[1:]:
        acc += m
    return acc / len(items)


def server_step(x_r, server: ServerObjective | Objective, eta_s: float, rng: np.random.Generator) -> np.ndarray:
    if eta_s < 0:
        raise ValueError("eta_s must be non-negative")
    obj = server.objective if isinstance(server, ServerObjective) else server
    x = as_point(x_r, obj.dim)
    x_new = x - eta_s * obj.stochastic_gradient(x, rng)
    if _diverged(x_new):
        raise DivergenceError("server step diverged", last_state=x)
    return x_new


# --------------------------------------------------------------------------
# round loops


class _Evaluator:
    def __init__(self, pop: PopulationSpec):
        self.pop = pop
        self.x_star = pop.global_optimum
        self.f_star = None
        if self.x_star is not None:
            self.f_star = [c.objective.loss(self.x_star) for c in pop.clients]

    def record(self, r, kind, x, participating):
        loss, g = self.pop.loss_and_gradient(x)
        dist = None if self.x_star is None else float(np.sum((x - self.x_star) ** 2))
        return RoundRecord(r, kind, float(g @ g), dist, float(loss), participating)

    def g4(self, x, ids):
        if self.x_star is None:
            return None
        return sum(self.pop.clients[i].objective.loss(x) - self.f_star[i] for i in ids) / len(ids)


def _initial_point(pop: PopulationSpec, cfg: SafariConfig) -> np.ndarray:
    if cfg.x0 is None:
        return np.zeros(pop.dim)
    return as_point(cfg.x0, pop.dim).copy()


def _server_round(x, server, cfg: SafariConfig, r: int, records=None):
    x_r = x
    try:
        for j in range(cfg.server_steps):
            x = server_step(x, server, cfg.eta_s, stream(cfg.seed, "server-noise", r, j))
    except DivergenceError as exc:
        raise DivergenceError(f"server diverged at round {r}", last_state=x_r, round_index=r, records=records) from exc
    return x


def _run(pop, proc, server, cfg: SafariConfig, q: float):
    ev = _Evaluator(pop)
    x = _initial_point(pop, cfg)
    records: list[RoundRecord] = []
    diag = DiagnosticStats()
    g_prev = pop.gradient(x)
    gn_prev = float(g_prev @ g_prev)
    for r in range(cfg.R):
        client_round = stream(cfg.seed, "coin", r).random() < q
        diag.g3.append(gn_prev)
        if client_round:
            ids = sample_participation(proc, pop.M, r, stream(cfg.seed, "participation", r))
            locals_: dict[int, np.ndarray] = {}
            gsum = np.zeros(pop.dim) if cfg.track_local_grads else None
            for i in ids:
                try:
                    xi, gi = _local_steps(
                        x, pop.clients[i].objective, cfg.K, cfg.eta_c,
                        stream(cfg.seed, "client-noise", r, i), cfg.track_local_grads,
                    )
                except DivergenceError as exc:
                    raise DivergenceError(
                        f"client {i} diverged at round {r}", last_state=x, round_index=r, records=records
                    ) from exc
                locals_[i] = xi
                if gsum is not None:
                    gsum += gi
            if gsum is not None:
                gsum /= len(ids)
                diag.g2 = max(diag.g2, float(gsum @ gsum))
            diag.g4.append(ev.g4(x, ids))
            x_new = aggregate(locals_)
            kind = CLIENT
        else:
            diag.g1 = max(diag.g1, gn_prev)
            diag.g4.append(None)
            ids = None
            x_new = _server_round(x, server, cfg, r, records)
            kind = SERVER
        _check_iterate(x_new, r, x, records)
        x = x_new
        rec = ev.record(r, kind, x, ids)
        records.append(rec)
        gn_prev = rec.grad_norm_sq
    summary = summarize(records)
    summary.diagnostics = diag
    summary.final_x = x
    _check_band(summary, cfg)
    return summary, records


def _check_band(summary: RunSummary, cfg: SafariConfig):
    if cfg.rs_rc_band is None:
        return
    lo, hi = cfg.rs_rc_band
    if not lo <= summary.rs_rc_ratio <= hi:
        msg = f"realized R_s/R_c = {summary.rs_rc_ratio:.4g} outside admissible band [{lo}, {hi}]"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


def run_safari(pop: PopulationSpec, proc: ParticipationProcess, server: ServerObjective | None, cfg: SafariConfig):
    """Run SAFARI for cfg.R rounds; returns (RunSummary, list of RoundRecord)."""
    if server is None and cfg.q < 1.0:
        raise ValueError("server rounds need a server objective (q < 1)")
    if server is not None and server.dim != pop.dim:
        raise ValueError("server and population dimensions differ")
    return _run(pop, proc, server, cfg, cfg.q)


def run_fedavg(pop: PopulationSpec, proc: ParticipationProcess, cfg: SafariConfig):
    """FedAvg: every round is a client round and no server data is used."""
    return _run(pop, proc, None, cfg, 1.0)


def run_centralized_sgd(pop: PopulationSpec, server: ServerObjective, cfg: SafariConfig):
    """Plain SGD on the server objective, evaluated against the population."""
    ev = _Evaluator(pop)
    x = _initial_point(pop, cfg)
    records = []
    for r in range(cfg.R):
        x_new = _server_round(x, server, cfg, r, records)
        _check_iterate(x_new, r, x, records)
        x = x_new
        records.append(ev.record(r, SERVER, x, None))
    summary = summarize(records)
    summary.final_x = x
    return summary, records


# --------------------------------------------------------------------------
# admissible-q diagnostics


@dataclass(frozen=True)
class QBound:
    """Outcome of an admissible-q formula.

    ``status`` is "ok" when the formula gives a value in (0, 1), "vacuous"
    when the fraction is <= 0 (clamped to 1) and "undefined" when the
    denominator vanishes or changes sign.
    """

    q_max: float | None
    fraction: float | None
    status: str


_TINY = np.nextafter(0.0, 1.0)


def _clamp(num: float, den: float) -> QBound:
    if den == 0.0:
        if num > 0:
            return QBound(None, None, "undefined")
        return QBound(1.0, -math.inf if num < 0 else 0.0, "vacuous")
    if den < 0:
        return QBound(None, num / den, "undefined")
    frac = num / den
    if frac <= 0:
        return QBound(1.0, frac, "vacuous")
    return QBound(max(1.0 / (frac + 1.0), _TINY), frac, "ok")


def q_bound_nonconvex(sigma_g_sq: float, g1: float, g2: float, K: int, L: float, eta_s: float) -> QBound:
    """Largest q admitted by the non-convex convergence condition."""
    if L * eta_s >= 1:
        raise ValueError("requires L * eta_s < 1")
    num = 4.0 * sigma_g_sq - 4.0 * g2 * (1.0 / (2.0 * K**2) - 2.0 * L * eta_s**2 / K**2)
    den = (1.0 - L * eta_s) * g1
    return _clamp(num, den)


def q_bound_strongly_convex(g3: float, g4: float, L: float, mu: float, eta_bar: float) -> QBound:
    """Largest q admitted by the strongly convex condition.

    ``eta_bar`` is eta_c K mu / 2 (= 2 eta_s L mu / (L + mu) under coupling).
    """
    if eta_bar < 0 or mu <= 0 or L < mu:
        raise ValueError("need 0 < mu <= L and eta_bar >= 0")
    if eta_bar > 4 * L * mu / (L + mu) ** 2 * (1 + 1e-12):
        raise ValueError("eta_s exceeds 2 / (L + mu)")
    r = L * eta_bar / mu
    num = (4 * eta_bar / mu**2) * (1 + 30 * r * (1 + 2 * r)) * g3 - (4 / mu) * g4
    den = (1 / (L + mu) - (L + mu) ** 2 * eta_bar / (4 * L**2 * mu**2)) * g3
    return _clamp(num, den)
