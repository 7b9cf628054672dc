"""Regenerate the bundled smiley point set (src/qbayes/data/smiley.csv).

Two compact eyes and a curved mouth, 256 points each.  Points are
interleaved feature by feature so every chunk of consecutive rows
contains all three features in equal proportion.
"""

import csv
import pathlib

import numpy as np

N_PER_FEATURE = 256


def make_points(seed: int = 20230101) -> np.ndarray:
    rng = np.random.default_rng(seed)
    left = rng.normal([-3.0, 16.0], [0.45, 0.6], size=(N_PER_FEATURE, 2))
    right = rng.normal([3.0, 16.0], [0.45, 0.6], size=(N_PER_FEATURE, 2))
    u = rng.uniform(-4.0, 4.0, N_PER_FEATURE)
    mouth = np.column_stack([u, 7.5 + 0.18 * u**2 + rng.normal(0.0, 0.25, N_PER_FEATURE)])
    out = np.empty((3 * N_PER_FEATURE, 2))
    out[0::3], out[1::3], out[2::3] = left, right, mouth
    return out


def main() -> None:
    path = pathlib.Path(__file__).resolve().parents[1] / "src" / "qbayes" / "data" / "smiley.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in make_points():
            w.writerow([f"{x:.6f}", f"{y:.6f}"])


if __name__ == "__main__":
    main()
