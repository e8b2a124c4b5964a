"""Frechet distance straight from the formula, using scipy's general sqrtm.

Samples come from a counter-based splitmix64 stream so the C++ tests can
regenerate them bit-for-bit; see frechet_samples() in the unit tests.
"""
import json
import sys

import numpy as np
from scipy import linalg

MASK = (1 << 64) - 1


def splitmix(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def uniform(seed, k):
    return (splitmix((seed * 0x100000001B3 + k) & MASK) >> 11) * 2.0 ** -53


def samples(seed, n, d, shift):
    out = np.empty((n, d))
    for i in range(n):
        prev = 0.0
        for j in range(d):
            u = uniform(seed, i * d + j)
            v = (u - 0.5) * (1.0 + 0.02 * j) + shift * (j % 3) + 0.5 * prev
            out[i, j] = v
            prev = v
    return out


def frechet(x, y):
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    s1, s2 = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
    covmean = linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))


def main(out):
    cases = []
    for seed_a, seed_b, n, d, shift in ((11, 12, 500, 64, 0.3), (21, 22, 200, 8, 0.0), (31, 32, 100, 16, 1.0)):
        x = samples(seed_a, n, d, 0.0)
        y = samples(seed_b, n, d, shift)
        cases.append({"seed_a": seed_a, "seed_b": seed_b, "n": n, "d": d, "shift": shift,
                      "first": x[0, :4].tolist(), "fid": frechet(x, y)})
    with open(out, "w") as f:
        json.dump({"cases": cases}, f, indent=1)


if __name__ == "__main__":
    main(sys.argv[1])
