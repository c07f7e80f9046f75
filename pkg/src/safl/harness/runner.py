"""Scenario orchestration: expand a config into cells, run them, write files.

Each cell is one point of the sweep grid plus one seed.  Federated cells
write ``<stem>.csv`` (one row per round) and ``<stem>.json`` (summary);
learnability cells write only the JSON and the scenario also gets a
``table.csv``.  ``manifest.json`` is written last.

Workers compute file contents and hand them back; only the parent process
touches the output directory, so one worker and many workers produce the
same bytes.
"""

from __future__ import annotations

import copy
import dataclasses
import io
import itertools
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..errors import ConfigError, DataError
from ..fedopt import (
    SafariConfig,
    q_bound_nonconvex,
    q_bound_strongly_convex,
    run_centralized_sgd,
    run_fedavg,
    run_safari,
)
from ..learnability import (
    ImpossibilityInstance,
    ThresholdInstance,
    centralized_baseline,
    check_positively_related,
    impossibility_failure_rate,
    pac_rate_experiment,
    rare_count_tail,
    safl_excess,
)
from ..population import (
    ParticipationProcess,
    fedavg_fixed_point,
    label_partition,
    logistic_population,
    make_data_server,
    make_quadratic_population,
    make_quadratic_server,
    mlp_population,
    synthetic_blobs,
)
from ..objectives import LogisticObjective
from ..rng import stream
from .config import ExperimentConfig
from .mnist import load_mnist_idx

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "kind", "grad_norm_sq", "dist_sq", "loss", "n_participants")
FL_SCENARIOS = ("sconvex-rate", "nonconvex-rate", "fedavg-bias", "speedup", "mnist-lr")

# sweep axis -> (section, key) it overrides; "mk" sets two keys
_AXES = ("R", "q", "s", "p", "n_T", "mk")
_AXIS_TARGET = {
    "R": ("algorithm", "R"),
    "q": ("algorithm", "q"),
    "s": ("participation", "s"),
    "p": ("participation", "p"),
    "n_T": ("data", "n_T"),
}


@dataclass(frozen=True)
class Cell:
    axes: tuple[tuple[str, object], ...]
    seed: int

    @property
    def stem(self) -> str:
        parts = []
        for name, value in self.axes:
            if name == "mk":
                value = f"{value[0]}x{value[1]}"
            parts.append(f"{name}{value}")
        parts.append(f"seed{self.seed}")
        return "_".join(parts)

    def as_dict(self) -> dict:
        d = {name: (list(v) if isinstance(v, (list, tuple)) else v) for name, v in self.axes}
        d["seed"] = self.seed
        return d


def fmt(v) -> str:
    """CSV float formatting: 17 significant digits round-trips a double."""
    if v is None:
        return ""
    return format(float(v), ".17g")


def jsonable(v):
    if isinstance(v, dict):
        return {k: jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


# --------------------------------------------------------------------------
# cells


def expand_cells(cfg: ExperimentConfig) -> list[Cell]:
    if cfg.scenario == "impossibility":
        lv = cfg.learnability
        grid = [(("omega", w), ("n", n)) for w in lv.omega for n in lv.n]
    elif cfg.scenario in ("pac", "positively-related"):
        grid = [()]
    else:
        axes = [(name, getattr(cfg.sweep, name)) for name in _AXES if getattr(cfg.sweep, name)]
        if cfg.scenario == "speedup" and not cfg.sweep.mk:
            axes.append(("mk", [[2, 2], [8, 8]]))
        names = [a for a, _ in axes]
        grid = [
            tuple((n, tuple(v) if isinstance(v, list) else v) for n, v in zip(names, combo))
            for combo in itertools.product(*(vals for _, vals in axes))
        ]
    if cfg.scenario == "positively-related":
        return [Cell((), cfg.sweep.seeds[0])]
    return [Cell(axes, seed) for axes in grid for seed in cfg.sweep.seeds]


def resolve(cfg: ExperimentConfig, cell: Cell) -> ExperimentConfig:
    """The config with this cell's axis values written in."""
    c = copy.deepcopy(cfg)
    for name, value in cell.axes:
        if name == "mk":
            c.participation.m, c.algorithm.K = int(value[0]), int(value[1])
        elif name in _AXIS_TARGET:
            section, key = _AXIS_TARGET[name]
            setattr(getattr(c, section), key, value)
    return c


def server_step_size(alg, R: int) -> float:
    if alg.step_schedule == "log_over_r":
        return alg.step_scale * math.log(R) / R
    if alg.step_schedule == "inv_sqrt_r":
        return alg.step_scale / math.sqrt(R)
    return alg.eta_s


def _participation(cfg: ExperimentConfig) -> ParticipationProcess:
    pp, M = cfg.participation, cfg.population.M
    try:
        if pp.variant == "full":
            return ParticipationProcess("full", M)
        return ParticipationProcess(pp.variant, M, pp.m, pp.s if pp.variant == "excluded" else 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _safari_config(cfg: ExperimentConfig, seed: int, x0, *, q=None, eta_c=None, K=None, server_steps=1) -> SafariConfig:
    alg = cfg.algorithm
    band = None
    if alg.rs_rc_low is not None and alg.rs_rc_high is not None:
        band = (alg.rs_rc_low, alg.rs_rc_high)
    try:
        return SafariConfig(
            q=alg.q if q is None else q,
            eta_c=alg.eta_c if eta_c is None else eta_c,
            eta_s=server_step_size(alg, alg.R),
            K=alg.K if K is None else K,
            R=alg.R,
            couple_steps=alg.couple_steps,
            seed=seed,
            x0=x0,
            rs_rc_band=band,
            track_local_grads=alg.track_local_grads,
            server_steps=server_steps,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _dispatch(alg_name: str, pop, proc, server, scfg: SafariConfig):
    if alg_name == "fedavg":
        return run_fedavg(pop, proc, scfg)
    if alg_name == "sgd":
        return run_centralized_sgd(pop, server, scfg)
    return run_safari(pop, proc, server, scfg)


def records_csv(records) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in records:
        n = 0 if r.participating is None else len(r.participating)
        buf.write(f"{r.round},{r.kind},{fmt(r.grad_norm_sq)},{fmt(r.dist_sq)},{fmt(r.loss)},{n}\n")
    return buf.getvalue()


def record_summary(records, tail_fraction: float) -> dict:
    """Summary fields that are pure functions of the round records."""
    n_c = sum(1 for r in records if r.kind == "client")
    n_s = len(records) - n_c
    start = int(math.floor(len(records) * (1.0 - tail_fraction)))
    start = min(max(start, 0), len(records) - 1)
    tail = [r.grad_norm_sq for r in records[start:]]
    return {
        "final_grad_norm_sq": records[-1].grad_norm_sq,
        "final_dist_sq": records[-1].dist_sq,
        "min_grad_norm_sq": min(r.grad_norm_sq for r in records),
        "tail_mean_grad_norm_sq": math.fsum(tail) / len(tail),
        "n_client_rounds": n_c,
        "n_server_rounds": n_s,
        "rs_rc_ratio": (n_s / n_c) if n_c else math.inf,
    }


def _diagnostics(summary, pop, scfg: SafariConfig) -> dict:
    d = summary.diagnostics
    if d is None:
        return {}
    out = {"g1": d.g1, "g2": d.g2, "g3_mean": float(np.mean(d.g3)) if d.g3 else None}
    g4 = [v for v in d.g4 if v is not None]
    out["g4_mean"] = float(np.mean(g4)) if g4 else None
    L, mu = pop.constants.L, pop.constants.mu
    if pop.sigma_g is not None and L is not None and L * scfg.eta_s < 1:
        b = q_bound_nonconvex(pop.sigma_g**2, d.g1, d.g2, scfg.K, L, scfg.eta_s)
        out["q_bound_nonconvex"] = {"q_max": b.q_max, "status": b.status}
    if mu and L and out["g3_mean"] is not None and out["g4_mean"] is not None:
        eta_bar = scfg.eta_c * scfg.K * mu / 2.0
        try:
            b = q_bound_strongly_convex(out["g3_mean"], out["g4_mean"], L, mu, eta_bar)
            out["q_bound_strongly_convex"] = {"q_max": b.q_max, "status": b.status}
        except ValueError as exc:
            out["q_bound_strongly_convex"] = {"q_max": None, "status": f"n/a: {exc}"}
    return out


def _fl_files(cell, cfg, scfg, summary, records, extra) -> dict[str, str]:
    doc = {
        "scenario": cfg.scenario,
        "cell": cell.as_dict(),
        "algorithm": cfg.algorithm.algorithm,
        "params": {"q": scfg.q, "eta_c": scfg.eta_c, "eta_s": scfg.eta_s, "K": scfg.K, "R": scfg.R,
                   "server_steps": scfg.server_steps, "tail_fraction": cfg.algorithm.tail_fraction},
        "participation": dataclasses.asdict(cfg.participation),
        "summary": record_summary(records, cfg.algorithm.tail_fraction),
        **extra,
    }
    return {f"{cell.stem}.csv": records_csv(records), f"{cell.stem}.json": dumps(doc)}


# --------------------------------------------------------------------------
# federated scenarios


def build_quadratic(cfg: ExperimentConfig):
    P = cfg.population
    pop = make_quadratic_population(P.M, P.d, P.spread, P.hessian, P.sigma, seed=P.pop_seed)
    shift = None
    if P.shift:
        shift = np.zeros(P.d)
        shift[0] = P.shift
    return pop, make_quadratic_server(pop, P.sigma_s, shift)


def _quadratic_cell(cfg: ExperimentConfig, cell: Cell):
    pop, server = build_quadratic(cfg)
    proc = _participation(cfg)
    x0 = np.full(pop.dim, cfg.algorithm.x0)
    scfg = _safari_config(cfg, cell.seed, x0)
    summary, records = _dispatch(cfg.algorithm.algorithm, pop, proc, server, scfg)
    x_star = pop.global_optimum
    fixed = fedavg_fixed_point(pop, proc.eligible)
    extra = {
        "final_x": summary.final_x,
        "diagnostics": _diagnostics(summary, pop, scfg),
        "oracle": {
            "x_star": x_star,
            "sigma_g": pop.sigma_g,
            "included_mean": fixed,
            "bias_closed_form": float(np.sum((fixed - x_star) ** 2)),
            "fixed_point_dist": float(np.linalg.norm(summary.final_x - fixed)),
        },
    }
    return _fl_files(cell, cfg, scfg, summary, records, extra)


def build_mlp(cfg: ExperimentConfig):
    P = cfg.population
    data = synthetic_blobs(P.M, P.n_per_client, stream(P.pop_seed, "data"))
    pop = mlp_population(data, (2, P.hidden, 2), P.activation, P.batch_size)
    server = make_data_server(pop.pooled)
    x0 = pop.clients[0].objective.init_point(stream(P.pop_seed, "init"))
    return pop, server, x0


def _mlp_cell(cfg: ExperimentConfig, cell: Cell):
    pop, server, x0 = build_mlp(cfg)
    q = None
    if cfg.scenario == "speedup" and not any(n == "q" for n, _ in cell.axes):
        q = 1.0 - 1.0 / (cfg.participation.m * cfg.algorithm.K)
    proc = _participation(cfg)
    scfg = _safari_config(cfg, cell.seed, x0, q=q)
    summary, records = _dispatch(cfg.algorithm.algorithm, pop, proc, server, scfg)
    extra = {"diagnostics": _diagnostics(summary, pop, scfg), "final_x": summary.final_x}
    return _fl_files(cell, cfg, scfg, summary, records, extra)


def mnist_paths(cfg: ExperimentConfig) -> list[Path]:
    D = cfg.data
    names = ("train_images", "train_labels", "test_images", "test_labels")
    paths = []
    for name in names:
        value = getattr(D, name)
        if value is None:
            raise DataError(f"dataset not found: data.{name} is not set")
        p = Path(value)
        if not p.is_file():
            raise DataError(f"dataset not found: {p}")
        paths.append(p)
    return paths


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _mnist_cell(cfg: ExperimentConfig, cell: Cell):
    D, P = cfg.data, cfg.population
    tr_i, tr_l, te_i, te_l = mnist_paths(cfg)
    Xtr, ytr = load_mnist_idx(tr_i, tr_l)
    Xte, yte = load_mnist_idx(te_i, te_l)
    Xtr, Xte = _with_bias(Xtr), _with_bias(Xte)
    parts = label_partition(ytr, cfg.participation.p, P.M, stream(P.pop_seed, "partition"))
    pop = logistic_population(Xtr, ytr, parts, 10, D.l2_reg, D.batch_size)
    t_idx = stream(P.pop_seed, "data", 0, 1).choice(len(ytr), size=D.n_T, replace=False)
    server = make_data_server(LogisticObjective(Xtr[t_idx], ytr[t_idx], 10, D.l2_reg, D.batch_size))
    mean_size = float(np.mean([len(p) for p in parts]))
    K = D.local_epochs * math.ceil(mean_size / D.batch_size)
    server_steps = D.server_epochs * math.ceil(D.n_T / D.batch_size)
    c = copy.deepcopy(cfg)
    c.algorithm.R, c.algorithm.eta_s, c.algorithm.step_schedule = D.rounds, D.server_lr, "constant"
    c.algorithm.couple_steps = False
    scfg = _safari_config(c, cell.seed, None, eta_c=D.local_lr, K=K, server_steps=server_steps)
    alg = "fedavg" if scfg.q == 1.0 else c.algorithm.algorithm
    summary, records = _dispatch(alg, pop, _participation(c), server, scfg)
    acc = float(np.mean(pop.clients[0].objective.predict(summary.final_x, Xte) == yte))
    extra = {"test_accuracy": acc, "diagnostics": {}}
    return _fl_files(cell, c, scfg, summary, records, extra)


# --------------------------------------------------------------------------
# learnability scenarios


def _impossibility_cell(cfg: ExperimentConfig, cell: Cell):
    a = dict(cell.axes)
    try:
        inst = ImpossibilityInstance(cfg.learnability.M, int(a["n"]), float(a["omega"]), cfg.learnability.trials)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    fail = impossibility_failure_rate(inst, cell.seed)
    tail = rare_count_tail(inst, cell.seed)
    doc = {
        "scenario": cfg.scenario,
        "cell": cell.as_dict(),
        "M": inst.M,
        "epsilon": inst.epsilon,
        "risk_threshold": inst.risk_threshold,
        "budget": inst.budget,
        "failure": {"successes": fail.successes, "trials": fail.trials, "fraction": fail.fraction,
                    "low": fail.low, "high": fail.high},
        "rare_tail": {"successes": tail.successes, "trials": tail.trials, "fraction": tail.fraction,
                      "low": tail.low, "high": tail.high},
    }
    return {f"{cell.stem}.json": dumps(doc)}


def threshold_instance(cfg: ExperimentConfig, lambda1: float) -> ThresholdInstance:
    lv = cfg.learnability
    try:
        return ThresholdInstance(lv.a, lv.b, lv.a2, lv.b2, lv.t_star, lambda1, 1.0 - lambda1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _pac_cell(cfg: ExperimentConfig, cell: Cell):
    lv = cfg.learnability
    f = lv.server_fraction
    if not 0.0 < f <= 1.0:
        raise ConfigError("learnability.server_fraction must lie in (0, 1]")
    inst = threshold_instance(cfg, 1.0 - f)
    rate = pac_rate_experiment(inst, lv.n_grid, lv.pac_trials, cell.seed)
    n_T_grid = cfg.sweep.n_T or [max(1, int(round(f * n))) for n in lv.n_grid]
    compare = []
    for n_T in n_T_grid:
        n_S = int(round(n_T * (1.0 - f) / f))
        s = safl_excess(inst, n_T, n_S, lv.pac_trials, cell.seed)
        c = centralized_baseline(inst, n_T, lv.pac_trials, cell.seed)
        compare.append({"n_T": n_T, "n_S": n_S, "safl": s, "centralized": c})
    doc = {
        "scenario": cfg.scenario,
        "cell": cell.as_dict(),
        "rate": {
            "n": rate.n_grid,
            "mean_excess": rate.mean_excess,
            "used": rate.used,
            "slope": None if rate.fit is None else rate.fit.slope,
            "r2": None if rate.fit is None else rate.fit.r2,
        },
        "compare": compare,
    }
    return {f"{cell.stem}.json": dumps(doc)}


def _positively_related_cell(cfg: ExperimentConfig, cell: Cell):
    lv = cfg.learnability
    inst = threshold_instance(cfg, lv.mixture_lambda1)
    grid = np.linspace(lv.a2, lv.b2, lv.t_grid_points)
    alpha, beta = check_positively_related(inst, grid)
    rows = [
        {"t": float(t), "eps_Q": inst.excess_error(t, "Q"), "eps_P": inst.excess_error(t, "P")}
        for t in grid
    ]
    doc = {"scenario": cfg.scenario, "cell": cell.as_dict(), "alpha": alpha, "beta": beta, "grid": rows}
    return {f"{cell.stem}.json": dumps(doc)}


_CELL_RUNNERS = {
    "sconvex-rate": _quadratic_cell,
    "fedavg-bias": _quadratic_cell,
    "nonconvex-rate": _mlp_cell,
    "speedup": _mlp_cell,
    "mnist-lr": _mnist_cell,
    "impossibility": _impossibility_cell,
    "pac": _pac_cell,
    "positively-related": _positively_related_cell,
}


def run_cell(cfg: ExperimentConfig, cell: Cell) -> dict[str, str]:
    """Compute one cell's output files (name -> content) without writing."""
    return _CELL_RUNNERS[cfg.scenario](resolve(cfg, cell), cell)


def _run_cell_args(args):
    return run_cell(*args)


def _table(cfg: ExperimentConfig, outputs: list[dict[str, str]]) -> str | None:
    """Flat, plot-ready table for the learnability scenarios."""
    docs = [json.loads(v) for files in outputs for k, v in files.items() if k.endswith(".json")]
    buf = io.StringIO()
    if cfg.scenario == "impossibility":
        buf.write("omega,n,seed,failure_fraction,failure_low,failure_high,tail_fraction\n")
        for d in docs:
            c, f = d["cell"], d["failure"]
            buf.write(f"{fmt(c['omega'])},{c['n']},{c['seed']},{fmt(f['fraction'])},{fmt(f['low'])},"
                      f"{fmt(f['high'])},{fmt(d['rare_tail']['fraction'])}\n")
    elif cfg.scenario == "pac":
        buf.write("seed,n,mean_excess,n_T,n_S,safl_excess,centralized_excess\n")
        for d in docs:
            seed = d["cell"]["seed"]
            for n, e, cmp in itertools.zip_longest(d["rate"]["n"], d["rate"]["mean_excess"], d["compare"]):
                cmp = cmp or {}
                buf.write(",".join([str(seed), "" if n is None else str(n), fmt(e), str(cmp.get("n_T", "")),
                                    str(cmp.get("n_S", "")), fmt(cmp.get("safl")), fmt(cmp.get("centralized"))]) + "\n")
    elif cfg.scenario == "positively-related":
        buf.write("t,eps_Q,eps_P\n")
        for d in docs:
            for row in d["grid"]:
                buf.write(f"{fmt(row['t'])},{fmt(row['eps_Q'])},{fmt(row['eps_P'])}\n")
    else:
        return None
    return buf.getvalue()


def preflight(cfg: ExperimentConfig) -> None:
    """Checks that must pass before any output file is created."""
    if cfg.scenario == "mnist-lr":
        mnist_paths(cfg)
    if cfg.scenario in FL_SCENARIOS:
        _participation(cfg)
        for cell in expand_cells(cfg):
            c = resolve(cfg, cell)
            if cfg.scenario != "mnist-lr":
                _participation(c)
                _safari_config(c, cell.seed, None)


def run_experiment(cfg: ExperimentConfig, workers: int = 1, output: Path | None = None) -> Path:
    """Run every cell of ``cfg`` and write the output directory; returns its path."""
    preflight(cfg)
    out = Path(output) if output is not None else cfg.output
    cells = expand_cells(cfg)
    jobs = [(cfg, cell) for cell in cells]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell_args, jobs))
    else:
        outputs = [run_cell(*job) for job in jobs]
    out.mkdir(parents=True, exist_ok=True)
    for files in outputs:
        for name, content in files.items():
            (out / name).write_text(content)
    table = _table(cfg, outputs)
    if table is not None:
        (out / "table.csv").write_text(table)
    manifest = {
        "scenario": cfg.scenario,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": cfg.sweep.seeds,
        "cells": [{"stem": c.stem, **c.as_dict(), "files": sorted(f)} for c, f in zip(cells, outputs)],
        "versions": {
            "safl": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    manifest["config"]["experiment"].pop("output", None)
    (out / "manifest.json").write_text(dumps(manifest))
    log.info("wrote %d cells to %s", len(cells), out)
    return out
