#!/usr/bin/env python3
"""Theory-side posterior KL of SGLD and SGWORLD against learning rate, with log-log slopes."""

import argparse

import numpy as np

from sgdthermo import experiments, models, stationary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=9)
    ap.add_argument("--m", type=int, default=10)
    args = ap.parse_args()
    model = models.linearized_regression()
    data = models.gen_regression_dataset(200, 0.1, 1)
    etas = np.logspace(-7, -5, args.points)
    rows = np.array(experiments.posterior_kl_table(model, data, etas, args.m))
    print(f"{'eta':>10} {'sgld':>12} {'sgworld':>12} {'uncorrected':>12}")
    for r in rows:
        print(" ".join(f"{v:12.4e}" for v in r))
    for k, name in ((1, "sgld"), (2, "sgworld")):
        print(f"slope {name}: {stationary.loglog_slope(etas, rows[:, k]):.2f}")


if __name__ == "__main__":
    main()
