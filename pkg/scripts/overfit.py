"""Train on a synthetic corpus, then score it and a fresh-number held-out split.

    python scripts/overfit.py --hidden 64 --epochs 300 --out runs/overfit.json
"""
import argparse
import json
import logging
import time
from pathlib import Path

from deductmwp import OperatorConfig, TrainConfig, evaluate_corpus, generate_synthetic, train


def overfit(config: TrainConfig, count: int = 200, train_seed: int = 1, heldout_seed: int = 2) -> dict:
    train_set = generate_synthetic(train_seed, count)
    heldout = generate_synthetic(heldout_seed, count)
    start = time.perf_counter()
    model, history = train(train_set, config)
    elapsed = time.perf_counter() - start
    return {
        "config": config.to_dict(),
        "epochs_run": len(history),
        "final_loss": history[-1].loss,
        "train_seconds": round(elapsed, 1),
        "train_accuracy": evaluate_corpus(model, train_set, config.tol)["value_accuracy"],
        "heldout_accuracy": evaluate_corpus(model, heldout, config.tol)["value_accuracy"],
    }


def config_from_args(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, hidden=args.hidden, lr=args.lr, seed=args.seed, margin=args.margin,
        stop_loss=not args.no_stop_loss, no_question=args.no_question, no_commutative=args.no_commutative,
        operator=OperatorConfig(allow_self_pairs=args.self_pairs),
    )


def add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=300)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--count", type=int, default=200)
    parser.add_argument("--margin", type=float, default=1.0)
    parser.add_argument("--no-stop-loss", action="store_true")
    parser.add_argument("--self-pairs", action="store_true")
    parser.add_argument("--no-question", action="store_true")
    parser.add_argument("--no-commutative", action="store_true")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_model_args(parser)
    parser.add_argument("--out", type=Path)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = overfit(config_from_args(args), args.count)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
