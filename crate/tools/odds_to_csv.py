#!/usr/bin/env python3
"""Convert an ODDS .mat file (keys X, y) to the CSV layout dhag reads.

    python tools/odds_to_csv.py thyroid.mat thyroid.csv

Columns are f0..f{d-1} followed by label (1 = anomaly).
"""
import argparse
import csv

from scipy.io import loadmat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("mat")
    ap.add_argument("csv")
    args = ap.parse_args()

    mat = loadmat(args.mat)
    x, y = mat["X"], mat["y"].ravel()
    with open(args.csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"f{j}" for j in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
    print(f"{len(y)} rows, {x.shape[1]} features, {int(y.sum())} anomalies")


if __name__ == "__main__":
    main()
