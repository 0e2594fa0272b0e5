#!/usr/bin/env python3
"""Project feature rows to 2-D with PCA.

Protocol: one comma-separated feature vector per stdin line; one "x,y"
line per input row on stdout, in input order. Deterministic: each
principal axis gets a fixed sign (largest-magnitude loading positive),
so identical input always yields identical output.
"""

import sys

import numpy as np


def main() -> int:
    lines = [line for line in sys.stdin if line.strip()]
    if not lines:
        return 0
    x = np.array(
        [[float(v) for v in line.split(",")] for line in lines], dtype=np.float64
    )
    x -= x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    k = min(2, vt.shape[0])
    axes = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    points = x @ axes.T
    if k < 2:
        points = np.hstack([points, np.zeros((points.shape[0], 2 - k))])
    for p in points:
        sys.stdout.write(f"{p[0]:.6f},{p[1]:.6f}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
