#!/usr/bin/env python3
"""Wall-clock sweep of the block-diagonal MLP against its dense counterpart.

Times one MLP application (two matmuls + GELU) per width, single threaded by
default so the 16/3 MAC saving is not hidden behind BLAS parallelism. The
block-diagonal version also pays for the basis butterflies, so the measured
speedup stays below 16/3 and only wins once the matmuls dominate.
"""
import argparse
import os

from threadpoolctl import threadpool_limits

from octic.analysis import bench_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--channels", type=int, nargs="+",
                    default=[256, 512, 1024, 2048])
    ap.add_argument("--tokens", type=int, default=256)
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--threads", type=int, default=1,
                    help="BLAS thread cap (0 = leave unlimited)")
    args = ap.parse_args()

    threads = args.threads if args.threads > 0 else os.cpu_count()
    print(f"tokens={args.tokens} trials={args.trials} threads={threads}")
    print(f"{'C':>6} {'dense_us':>12} {'octic_us':>12} {'speedup':>8}")
    with threadpool_limits(limits=threads):
        for res in bench_sweep(args.channels, tokens=args.tokens,
                               trials=args.trials):
            print(f"{res.channels:>6} {res.dense_us:>12.1f} "
                  f"{res.octic_us:>12.1f} {res.speedup:>8.2f}")


if __name__ == "__main__":
    main()
