"""Charge-conditioning and total-term orderings over several seeds.

    python3 scripts/ordering_experiment.py --seeds 0 1 2 --epochs 15
"""

import argparse
import logging

from cptp.experiments import ordering_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--patience", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print("seed,dgn,dgn_blind,rnn_charge,dgn_total,rnn_total,margin_blind,margin_rnn,total_margin")
    for seed in args.seeds:
        r = ordering_trial(seed, epochs=args.epochs, patience=args.patience)
        v, t = r.valid_S, r.total_S
        print(f"{seed},{v['dgn']:.2f},{v['dgn_blind']:.2f},{v['rnn_charge']:.2f},{t['dgn']:.2f},"
              f"{t['rnn_total']:.2f},{r.margin_over_blind:.2f},{r.margin_over_rnn:.2f},{r.total_margin:.2f}",
              flush=True)


if __name__ == "__main__":
    main()
