"""Print mean per-R summaries for a rate sweep directory.

    python3 scripts/rate_table.py runs/sconvex-rate [final_dist_sq]
"""

import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from safl.harness.fitting import fit_loglog_slope
from safl.harness.report import load_dir


def main(directory: str, field: str = "final_dist_sq") -> None:
    _, docs = load_dir(Path(directory))
    by_r = defaultdict(list)
    for d in docs:
        by_r[d["cell"]["R"]].append(d["_reduced"][field])
    rs = sorted(by_r)
    means = [float(np.mean(by_r[r])) for r in rs]
    print(f"{'R':>8}  {'seeds':>5}  mean {field}")
    for r, m in zip(rs, means):
        print(f"{r:>8}  {len(by_r[r]):>5}  {m:.6g}")
    if len(rs) >= 3:
        fit = fit_loglog_slope(rs, means)
        print(f"log-log slope {fit.slope:.4f}  r2 {fit.r2:.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
