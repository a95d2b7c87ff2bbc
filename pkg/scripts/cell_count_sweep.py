"""How closely does the SLIC cell count track the requested s on synthetic images?

Prints the mean and worst relative count error per s bucket.  Coarse cells
(as large as the image structures) fragment into several large pieces, so
the count overshoots there; finer cells track s closely.

    python3 scripts/cell_count_sweep.py --num 50
"""

import argparse

import numpy as np

from spda.slic import SlicParams, slic_segment
from spda.synthetic import SyntheticConfig, generate_samples


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--num", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--buckets", type=int, nargs="+", default=[25, 50, 100, 150, 250, 400, 600, 1000])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    gen = np.random.default_rng(args.seed)
    images = generate_samples(SyntheticConfig(size=args.size, num_samples=args.num), args.seed)
    print(f"{'s range':>12} {'px/cell':>10} {'mean err':>9} {'max err':>8}")
    for lo, hi in zip(args.buckets, args.buckets[1:]):
        errs = []
        for smp in images:
            s = int(gen.integers(lo, hi))
            n = slic_segment(smp.image, SlicParams(s)).max() + 1
            errs.append((n - s) / s)
        px = args.size * args.size
        print(f"{f'[{lo},{hi})':>12} {f'{px // hi}-{px // lo}':>10} {np.mean(errs):+9.3f} {np.max(np.abs(errs)):8.3f}")


if __name__ == "__main__":
    main()
