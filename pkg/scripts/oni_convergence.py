#!/usr/bin/env python3
"""Newton orthogonalization accuracy against the exact inverse square root.

Draws Gaussian proxies of a given shape and reports, for each iteration count,
the fraction whose ||W W^T - I||_F or distance to (Z Z^T)^{-1/2} Z reaches the
tolerance, together with the worst error and the conditioning of the failures.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from occlusion_attn import tensor as T
from occlusion_attn.oni import orthogonalize


def exact(z: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(z @ z.T)
    return vecs @ np.diag(vals ** -0.5) @ vecs.T @ z


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=3)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--draws", type=int, default=2000)
    ap.add_argument("--iterations", default="5,6,8,10,12")
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    proxies = rng.standard_normal((args.draws, args.rows, args.cols))
    oracles = [exact(z) for z in proxies]
    conds = [np.linalg.cond(z @ z.T) for z in proxies]
    print(f"{args.draws} Gaussian {args.rows}x{args.cols} proxies, tol {args.tol:g}")
    print(f"{'T':>3}  {'fail rate':>9}  {'worst error':>11}  {'min cond of failures':>20}")
    for t in (int(v) for v in args.iterations.split(",")):
        errs = []
        with T.precision(np.float64):
            for z, ref in zip(proxies, oracles):
                w = orthogonalize(T.Tensor(z, dtype=np.float64), iterations=t).data
                errs.append(max(np.linalg.norm(w @ w.T - np.eye(args.rows)),
                                np.linalg.norm(w - ref)))
        errs = np.array(errs)
        bad = errs >= args.tol
        worst_cond = min((c for c, b in zip(conds, bad) if b), default=float("nan"))
        print(f"{t:>3}  {bad.mean():>9.4f}  {errs.max():>11.2e}  {worst_cond:>20.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
