"""Fraction of SP images that stay nearer their own source than the source's nearest other original.

    python3 scripts/neighborhood_study.py --s-lo 200 --s-hi 800 --count 7 --pca 0 2 10
"""

import argparse

from spda.experiment import NeighborhoodConfig, run_neighborhood_study


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--num", type=int, default=20)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--s-lo", type=int, default=200)
    ap.add_argument("--s-hi", type=int, default=800)
    ap.add_argument("--count", type=int, default=7)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--pca", type=int, nargs="+", default=[0], help="PCA dimensions to compare in (0 = raw pixels)")
    args = ap.parse_args()
    for k in args.pca:
        cfg = NeighborhoodConfig(args.size, args.num, args.noise, args.s_lo, args.s_hi, args.count, k or None, args.seed)
        rep = run_neighborhood_study(cfg)
        space = "pixels" if not k else f"pca{k}"
        print(f"{space:>8}: fraction {rep.fraction:.3f}")


if __name__ == "__main__":
    main()
