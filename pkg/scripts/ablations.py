"""Overfit run for every combination of the question and commutativity switches."""
import argparse
import itertools
import json
from dataclasses import replace
from pathlib import Path

from overfit import add_model_args, config_from_args, overfit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    add_model_args(parser)
    parser.add_argument("--out-dir", type=Path, default=Path("runs/ablations"))
    args = parser.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    base = config_from_args(args)
    print(f"{'no_question':>12} {'no_commutative':>15} {'epochs':>7} {'train':>7} {'held-out':>9}")
    for nq, nc in itertools.product([False, True], repeat=2):
        result = overfit(replace(base, no_question=nq, no_commutative=nc), args.count)
        name = f"q{int(not nq)}_c{int(not nc)}.json"
        (args.out_dir / name).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        print(f"{nq!s:>12} {nc!s:>15} {result['epochs_run']:>7} {result['train_accuracy']:>7.3f} "
              f"{result['heldout_accuracy']:>9.3f}")


if __name__ == "__main__":
    main()
