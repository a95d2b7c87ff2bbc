"""Train the toy FCN with and without SP augmentation and compare test mean IU.

    python3 scripts/toy_experiment.py --seeds 0 1 2 3 4 --out toy.json
"""

import argparse
import json
from dataclasses import fields

from spda.experiment import ToyConfig, run_toy_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    defaults = ToyConfig()
    for f in fields(ToyConfig):
        if f.name == "seeds":
            ap.add_argument("--seeds", type=int, nargs="+", default=list(defaults.seeds))
        else:
            ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(getattr(defaults, f.name)), default=getattr(defaults, f.name))
    ap.add_argument("--out", help="write per-run results as JSON")
    args = vars(ap.parse_args())
    out = args.pop("out")
    args["seeds"] = tuple(args["seeds"])
    report = run_toy_experiment(ToyConfig(**args), progress=lambda r: print(r, flush=True))
    print(report.summary())
    print(f"raw-image gap (spda - baseline): {report.spda_raw - report.baseline_raw:+.4f}")
    print(f"SP-image gap  (spda - baseline): {report.spda_sp - report.baseline_sp:+.4f}")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)


if __name__ == "__main__":
    main()
