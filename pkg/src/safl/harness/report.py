"""Re-derive summaries from files on disk and evaluate the scenario checks.

Nothing here imports the simulator: per-run numbers are recomputed from the
CSV text, so a pass means the serialized outputs support the claim.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError
from .fitting import fit_loglog_slope, sign_test_greater

# pass/fail targets per scenario
SCONVEX_SLOPE = (-1.3, -0.7)
NONCONVEX_SLOPE_MAX = -0.35
PAC_SLOPE = (-1.25, -0.75)
NO_WORSE_RATIO = 1.15
FIXED_POINT_TOL = 1e-6
BIAS_REL_TOL = 0.10
IMPOSSIBILITY_LOW = 0.05
RARE_TAIL_MAX = 0.85 + 0.02
ALPHA_TARGET, BETA_TARGET, FIT_TOL = 0.5, 1.0, 0.01
SIGN_TEST_LEVEL = 0.05
MNIST_FEDAVG_MAX, MNIST_GAIN_MIN, MNIST_IID_GAP = 0.70, 0.10, 0.02


@dataclass
class Check:
    name: str
    value: str
    target: str
    passed: bool


@dataclass
class ScenarioReport:
    directory: Path
    scenario: str
    checks: list[Check] = field(default_factory=list)
    mismatches: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches and all(c.passed for c in self.checks)


def _num(s: str):
    return None if s == "" else float(s)


def read_records(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no rows")
    return [
        {
            "round": int(r["round"]),
            "kind": r["kind"],
            "grad_norm_sq": float(r["grad_norm_sq"]),
            "dist_sq": _num(r["dist_sq"]),
            "loss": float(r["loss"]),
            "n_participants": int(r["n_participants"]),
        }
        for r in rows
    ]


def reduce_records(rows: list[dict], tail_fraction: float) -> dict:
    """Summary of one run's CSV rows (the JSON ``summary`` block)."""
    g = [r["grad_norm_sq"] for r in rows]
    n_client = sum(r["kind"] == "client" for r in rows)
    n_server = len(rows) - n_client
    start = min(max(int(math.floor(len(rows) * (1.0 - tail_fraction))), 0), len(rows) - 1)
    ratio = n_server / n_client if n_client else None
    return {
        "final_grad_norm_sq": g[-1],
        "final_dist_sq": rows[-1]["dist_sq"],
        "min_grad_norm_sq": min(g),
        "tail_mean_grad_norm_sq": math.fsum(g[start:]) / len(g[start:]),
        "n_client_rounds": n_client,
        "n_server_rounds": n_server,
        "rs_rc_ratio": ratio,
    }


def load_dir(directory: Path) -> tuple[dict, list[dict]]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no manifest.json in {directory}")
    manifest = json.loads(mpath.read_text())
    docs = []
    for cell in manifest["cells"]:
        jpath = directory / f"{cell['stem']}.json"
        if not jpath.is_file():
            raise DataError(f"missing cell summary {jpath}")
        doc = json.loads(jpath.read_text())
        doc["_stem"] = cell["stem"]
        cpath = directory / f"{cell['stem']}.csv"
        if cpath.is_file():
            tail = doc.get("params", {}).get("tail_fraction", 0.5)
            doc["_reduced"] = reduce_records(read_records(cpath), tail)
        docs.append(doc)
    return manifest, docs


def _mismatches(docs) -> list[str]:
    out = []
    for d in docs:
        if "_reduced" not in d:
            continue
        for key, value in d["_reduced"].items():
            if d["summary"].get(key) != value:
                out.append(f"{d['_stem']}: {key} json={d['summary'].get(key)!r} csv={value!r}")
    return out


def _by(docs, key):
    groups = defaultdict(list)
    for d in docs:
        groups[d["cell"][key]].append(d)
    return dict(sorted(groups.items()))


def _slope_check(name, docs, field_, target_desc, ok) -> list[Check]:
    if not docs or "R" not in docs[0]["cell"]:
        return []
    groups = _by(docs, "R")
    if len(groups) < 3:
        return []
    xs = list(groups)
    ys = [float(np.mean([d["_reduced"][field_] for d in g])) for g in groups.values()]
    fit = fit_loglog_slope(xs, ys)
    return [Check(name, f"{fit.slope:.4f} (r2 {fit.r2:.3f})", target_desc, ok(fit.slope))]


def _sconvex(docs):
    lo, hi = SCONVEX_SLOPE
    return _slope_check("slope of mean final dist_sq vs R", docs, "final_dist_sq", f"in [{lo}, {hi}]",
                        lambda s: lo <= s <= hi)


def _nonconvex(docs):
    return _slope_check("slope of mean min grad_norm_sq vs R", docs, "min_grad_norm_sq",
                        f"<= {NONCONVEX_SLOPE_MAX}", lambda s: s <= NONCONVEX_SLOPE_MAX)


def _fedavg_bias(docs):
    worst = max(d["oracle"]["fixed_point_dist"] for d in docs)
    bias = docs[0]["oracle"]["bias_closed_form"]
    plateau = float(np.mean([d["_reduced"]["final_dist_sq"] for d in docs]))
    rel = abs(plateau / bias - 1.0)
    return [
        Check("max |x_R - included mean|", f"{worst:.3e}", f"<= {FIXED_POINT_TOL:g}", worst <= FIXED_POINT_TOL),
        Check("plateau / closed-form bias", f"{plateau / bias:.4f}", f"within {BIAS_REL_TOL:.0%}", rel <= BIAS_REL_TOL),
    ]


def _speedup(docs):
    groups = defaultdict(dict)
    for d in docs:
        groups[tuple(d["cell"]["mk"])][d["cell"]["seed"]] = d["_reduced"]["tail_mean_grad_norm_sq"]
    if len(groups) < 2:
        return []
    keys = sorted(groups, key=lambda mk: (mk[0] * mk[1], mk))
    small, big = groups[keys[0]], groups[keys[-1]]
    seeds = sorted(set(small) & set(big))
    wins = sum(big[s] < small[s] for s in seeds)
    p = sign_test_greater(wins, len(seeds))
    desc = f"floor {keys[-1][0]}x{keys[-1][1]} < {keys[0][0]}x{keys[0][1]}"
    return [Check(desc, f"{wins}/{len(seeds)} wins, p={p:.2e}", f"p < {SIGN_TEST_LEVEL}", p < SIGN_TEST_LEVEL)]


def _mnist(docs):
    acc = defaultdict(list)
    for d in docs:
        pp = d["participation"]
        acc[(pp["p"], pp["s"], d["params"]["q"])].append(d["test_accuracy"])
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    checks = []
    fed, saf = mean.get((1, 4, 1.0)), mean.get((1, 4, 0.8))
    if fed is not None:
        checks.append(Check("FedAvg accuracy p=1 s=4", f"{fed:.4f}", f"<= {MNIST_FEDAVG_MAX}", fed <= MNIST_FEDAVG_MAX))
        if saf is not None:
            checks.append(Check("SAFARI gain p=1 s=4", f"{saf - fed:+.4f}", f">= {MNIST_GAIN_MIN}",
                                saf - fed >= MNIST_GAIN_MIN))
    fed10, saf10 = mean.get((10, 4, 1.0)), mean.get((10, 4, 0.8))
    if fed10 is not None and saf10 is not None:
        gap = abs(saf10 - fed10)
        checks.append(Check("|SAFARI - FedAvg| p=10", f"{gap:.4f}", f"<= {MNIST_IID_GAP}", gap <= MNIST_IID_GAP))
    return checks


def _impossibility(docs):
    checks = []
    for d in docs:
        c, f = d["cell"], d["failure"]
        checks.append(Check(f"failure rate omega={c['omega']} n={c['n']}", f"{f['fraction']:.4f} (low {f['low']:.4f})",
                            f"low > {IMPOSSIBILITY_LOW}", f["low"] > IMPOSSIBILITY_LOW))
        t = d["rare_tail"]["fraction"]
        checks.append(Check(f"rare tail omega={c['omega']} n={c['n']}", f"{t:.4f}", f"<= {RARE_TAIL_MAX:.2f}",
                            t <= RARE_TAIL_MAX))
    per = defaultdict(dict)
    for d in docs:
        per[(d["cell"]["omega"], d["cell"]["seed"])][d["cell"]["n"]] = d["failure"]["fraction"]
    for (omega, _), by_n in sorted(per.items()):
        ns = sorted(by_n)
        for a, b in zip(ns, ns[1:]):
            checks.append(Check(f"no decrease omega={omega} n {a}->{b}", f"{by_n[a]:.4f} -> {by_n[b]:.4f}",
                                "non-decreasing", by_n[b] >= by_n[a]))
    return checks


def _pac(docs):
    lo, hi = PAC_SLOPE
    checks = []
    for d in docs:
        s = d["rate"]["slope"]
        checks.append(Check(f"PAC slope seed={d['cell']['seed']}", "n/a" if s is None else f"{s:.4f}",
                            f"in [{lo}, {hi}]", s is not None and lo <= s <= hi))
        for row in d["compare"]:
            ratio = row["safl"] / row["centralized"] if row["centralized"] > 0 else math.inf
            checks.append(Check(f"SA-FL/centralized n_T={row['n_T']}", f"{ratio:.4f}", f"<= {NO_WORSE_RATIO}",
                                ratio <= NO_WORSE_RATIO))
    return checks


def _positively_related(docs):
    d = docs[0]
    a, b = d["alpha"], d["beta"]
    return [
        Check("beta", f"{b:.6f}", f"{BETA_TARGET} +- {FIT_TOL}", b is not None and abs(b - BETA_TARGET) <= FIT_TOL),
        Check("alpha", f"{a:.6f}", f"{ALPHA_TARGET} +- {FIT_TOL}", abs(a - ALPHA_TARGET) <= FIT_TOL),
    ]


_CHECKS = {
    "sconvex-rate": _sconvex,
    "nonconvex-rate": _nonconvex,
    "fedavg-bias": _fedavg_bias,
    "speedup": _speedup,
    "mnist-lr": _mnist,
    "impossibility": _impossibility,
    "pac": _pac,
    "positively-related": _positively_related,
}


def report_dir(directory) -> ScenarioReport:
    manifest, docs = load_dir(Path(directory))
    scenario = manifest["scenario"]
    rep = ScenarioReport(Path(directory), scenario)
    rep.mismatches = _mismatches(docs)
    rep.checks = _CHECKS[scenario](docs)
    return rep


def format_reports(reports: list[ScenarioReport]) -> str:
    lines = []
    for rep in reports:
        lines.append(f"{rep.directory} [{rep.scenario}]")
        if rep.mismatches:
            lines.append(f"  summary mismatches: {len(rep.mismatches)}")
            lines.extend(f"    {m}" for m in rep.mismatches[:10])
        else:
            lines.append("  summaries match CSV records")
        if not rep.checks:
            lines.append("  (no checks apply to this sweep)")
        width = max((len(c.name) for c in rep.checks), default=0)
        for c in rep.checks:
            mark = "PASS" if c.passed else "FAIL"
            lines.append(f"  {mark}  {c.name.ljust(width)}  {c.value}  [{c.target}]")
    return "\n".join(lines) + "\n"
