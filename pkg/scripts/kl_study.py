"""VAE latent KL between training sets (with / without SP copies) and a test set.

    python3 scripts/kl_study.py --steps 1500 --s-values 50 100 150
"""

import argparse

from spda.analysis import distribution_comparison
from spda.augment import sp
from spda.synthetic import SyntheticConfig, generate_samples
from spda.vae import VaeSpec, VaeTrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--num-train", type=int, default=20)
    ap.add_argument("--num-test", type=int, default=20)
    ap.add_argument("--s-values", type=int, nargs="+", default=[50, 100, 150])
    ap.add_argument("--patch", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--latent", type=int, default=8)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    train = generate_samples(SyntheticConfig(size=args.size, num_samples=args.num_train), 1, "tr")
    test = generate_samples(SyntheticConfig(size=args.size, num_samples=args.num_test), 2, "te")
    ori = [s.image for s in train]
    aug = ori + [sp(s.image, k) for s in train for k in args.s_values]
    rep = distribution_comparison(
        ori,
        aug,
        [s.image for s in test],
        VaeSpec(args.patch, args.hidden, args.latent),
        VaeTrainConfig(steps=args.steps, seed=args.seed),
    )
    print(rep.summary())


if __name__ == "__main__":
    main()
