"""Fit 200 synthetic cases until training Acc@0.2 reaches 95%.

    python3 scripts/overfit.py --cases 200 --max-epochs 200
"""

import argparse
import logging

from cptp.experiments import ModelDims, overfit_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=200)
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    r = overfit_trial(args.cases, ModelDims(), args.max_epochs, lr=args.lr, seed=args.seed)
    print(f"epochs={r.epochs} train_acc02={r.train_acc02:.2f} seconds={r.seconds:.1f}")


if __name__ == "__main__":
    main()
