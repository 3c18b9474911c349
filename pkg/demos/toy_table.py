"""Baseline / +LM / +AT / +Both comparison on the toy task.

Trains every system for the given seeds and prints mean test CER and WER at
the protocol beam, then the per-beam CER of the baseline and +AT models.

    python3 demos/toy_table.py --seeds 0 1 2
    python3 demos/toy_table.py --seeds 0 --epochs 10 --n-unpaired 1000   # quicker
"""

import argparse
import logging

import numpy as np

from advasr.experiments import ToyProtocol, run_seed
from advasr.metrics import relative_improvement

ROWS = [("baseline", "Baseline"), ("at", "+AT (no text)"), ("baseline+lm", "+LM"),
        ("at_text", "+AT"), ("both", "+Both")]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=ToyProtocol.epochs)
    parser.add_argument("--n-unpaired", type=int, default=ToyProtocol.n_unpaired)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    protocol = ToyProtocol(epochs=args.epochs, n_unpaired=args.n_unpaired)
    results = [run_seed(protocol, s) for s in args.seeds]
    beam = protocol.beam

    def mean(system, beam, split="test", k=0):
        return float(np.mean([getattr(r, split)[system][beam][k] for r in results]))

    base_wer = mean("baseline", beam, k=1)
    print(f"| Method | Dev CER/WER | Test CER/WER | WER delta (%) |   (beam {beam})")
    print("|---|---|---|---|")
    for key, label in ROWS:
        dev = f"{mean(key, beam, 'dev'):.1f} / {mean(key, beam, 'dev', 1):.1f}"
        test = f"{mean(key, beam):.1f} / {mean(key, beam, k=1):.1f}"
        delta = "-" if key == "baseline" else f"{relative_improvement(base_wer, mean(key, beam, k=1)):.1f}"
        print(f"| {label} | {dev} | {test} | {delta} |")

    print("\nbeam\tbaseline CER\t+AT CER")
    for b in protocol.sweep_beams:
        print(f"{b}\t{mean('baseline', b):.2f}\t\t{mean('at_text', b):.2f}")


if __name__ == "__main__":
    main()
