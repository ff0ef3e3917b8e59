"""Summarize a uq run directory: error-map maxima and probe PDF overlap.

    python3 scripts/uq_report.py runs/desk_case1
"""

import sys
from pathlib import Path

import numpy as np

from fieldreg.field import read_csv


def overlay_l1(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    y, a, b = data.T
    a = a / np.trapezoid(a, y)
    b = b / np.trapezoid(b, y)
    return float(np.trapezoid(np.abs(a - b), y))


def main(run_dir):
    run = Path(run_dir)
    for path in sorted(run.glob("error_*.csv")):
        print(f"{path.stem:24s} max {read_csv(path).data.max():.4f}")
    for path in sorted(run.glob("pdf_overlay_*.csv")):
        print(f"{path.stem:24s} L1 {overlay_l1(path):.4f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/desk_case1")
