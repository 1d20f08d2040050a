"""Monte-Carlo reference for the top-K coupling of independent Gaussian matrices.

Uses numpy/LAPACK only, so it shares no code path with the C++ library. The printed
means are frozen into the C++ tests.
"""
import argparse

import numpy as np


def coupling(probe, basis, k, p=1.0):
    u_b, _, vt_b = np.linalg.svd(basis)
    s_probe = np.linalg.svd(probe, compute_uv=False)[:k]
    a = u_b[:, :k].T @ probe @ vt_b[:k, :].T
    m = np.linalg.norm(a - np.diag(s_probe)) / np.linalg.norm(s_probe, ord=p)
    return 1.0 - m


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--trials", type=int, default=20000)
    parser.add_argument("--seed", type=int, default=20240601)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    for d, k in [(100, 10), (64, 6), (32, 3)]:
        vals = np.array([coupling(rng.standard_normal((d, d)), rng.standard_normal((d, d)), k)
                         for _ in range(args.trials)])
        print(f"d={d} K={k} mean={vals.mean():.6f} std={vals.std(ddof=1):.6f} "
              f"se={vals.std(ddof=1) / np.sqrt(len(vals)):.6f}")


if __name__ == "__main__":
    main()
