"""Pick (lambda_q, lambda_h) for the combined regularizer on the tuning seeds.

Prints the sweep table and the grid point with the best mean test accuracy.
The result is copied by hand into ``advreg/benchmark.py``.
"""

import itertools
import sys

import numpy as np

from advreg import benchmark
from advreg.evaluation import lambda_sweep, write_sweep_csv


def main(out=None):
    exp = benchmark.default_experiment()
    grid = list(itertools.product(benchmark.TUNING_GRID_Q, benchmark.TUNING_GRID_H))
    rows = lambda_sweep(exp, grid, benchmark.TUNING_SEEDS, probe=False)
    if out:
        write_sweep_csv(rows, out)
    means = {}
    for lq, lh in grid:
        accs = [r["test_accuracy"] for r in rows if (r["lambda_q"], r["lambda_h"]) == (lq, lh)]
        means[(lq, lh)] = float(np.mean(accs))
        print(f"lambda_q={lq:<6} lambda_h={lh:<6} mean test acc={means[(lq, lh)]:.4f}")
    best = max(grid, key=lambda k: (means[k], -k[0], -k[1]))
    print(f"best: lambda_q={best[0]} lambda_h={best[1]}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
