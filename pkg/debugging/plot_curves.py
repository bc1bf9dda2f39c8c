#!/usr/bin/env python3
"""plot_curves.py – render observable curves from one or more lrei.py CSV files.

    python debugging/plot_curves.py results/af2_qllg.csv results/af2_qll.csv --columns energy mz
"""
import argparse
import csv
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams["font.size"] = 9
plt.rcParams["axes.linewidth"] = 0.5
plt.rcParams["figure.figsize"] = [6.0, 3.5]


def load(path: Path):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    return header, rows


parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("csv", nargs="+", type=Path)
parser.add_argument("--columns", nargs="+", help="observable columns (default: all)")
parser.add_argument("--out", type=Path, default=Path("curves.png"))
args = parser.parse_args()

columns = args.columns
fig, axes = None, None
for path in args.csv:
    if not path.is_file():
        print(f"❌ {path} not found")
        sys.exit(1)
    header, rows = load(path)
    if columns is None:
        columns = header[1:]
    if axes is None:
        fig, axes = plt.subplots(len(columns), 1, sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], columns):
        if col not in header:
            print(f"⚠️  {path.name} has no column {col!r}")
            continue
        ax.plot(rows[:, 0], rows[:, header.index(col)], lw=1, label=path.stem)
        ax.set_ylabel(col)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)

axes[-1, 0].set_xlabel("t")
axes[0, 0].legend(frameon=False)
fig.tight_layout()
fig.savefig(args.out, dpi=150)
print(f"💾 wrote {args.out}")
