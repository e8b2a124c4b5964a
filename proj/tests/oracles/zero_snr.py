"""Zero-terminal-SNR rescale, transcribed from the shift-and-scale recipe.

Writes base and rescaled alpha-bar arrays for T in {4, 100, 1000}.
"""
import json
import sys

import numpy as np


def linear_betas(T):
    scale = 1000.0 / T
    if T == 1:
        return np.array([1e-4 * scale])
    betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    return np.minimum(betas, 0.999)


def enforce_zero_terminal_snr(betas):
    alphas = 1.0 - betas
    alphas_bar_sqrt = np.sqrt(np.cumprod(alphas))
    first = alphas_bar_sqrt[0].copy()
    last = alphas_bar_sqrt[-1].copy()
    alphas_bar_sqrt -= last
    alphas_bar_sqrt *= first / (first - last)
    return alphas_bar_sqrt ** 2


def main(out):
    cases = {}
    for T in (4, 100, 1000):
        betas = linear_betas(T)
        cases[str(T)] = {
            "base": np.cumprod(1.0 - betas).tolist(),
            "rescaled": enforce_zero_terminal_snr(betas).tolist(),
        }
    with open(out, "w") as f:
        json.dump({"linear": cases}, f, indent=1)


if __name__ == "__main__":
    main(sys.argv[1])
