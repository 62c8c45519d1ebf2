"""Compare training objectives and self-pair enumeration on the overfit task.

The rows are the bare max-score objective, the margin objective without the
stop hinge, and the default, each with self-pairs off and on.
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from deductmwp import OperatorConfig, TrainConfig
from overfit import overfit

VARIANTS = {
    "bare": dict(margin=0.0, stop_loss=False),
    "margin": dict(margin=1.0, stop_loss=False),
    "margin+stop": dict(margin=1.0, stop_loss=True),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=300)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--count", type=int, default=200)
    parser.add_argument("--out", type=Path, default=Path("runs/objective_sweep.json"))
    args = parser.parse_args()
    base = TrainConfig(epochs=args.epochs, hidden=args.hidden)
    rows = []
    for self_pairs in (False, True):
        for name, kw in VARIANTS.items():
            config = replace(base, operator=OperatorConfig(allow_self_pairs=self_pairs), **kw)
            result = overfit(config, args.count)
            rows.append({"objective": name, "self_pairs": self_pairs, **result})
            print(f"{name:>12} self_pairs={self_pairs!s:<5} epochs={result['epochs_run']:>3} "
                  f"train={result['train_accuracy']:.3f} held-out={result['heldout_accuracy']:.3f}", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
