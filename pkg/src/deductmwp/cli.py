"""Command line: gen, train, eval, solve, inspect.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .corpus import (TEMPLATES, OperatorConfig, ProblemError, generate_synthetic, load_jsonl, make_problem,
                     write_jsonl, write_rejects)
from .engine import (Model, TrainConfig, describe_prediction, evaluate_corpus, inspect_problem, predict, train,
                     write_training_log)

log = logging.getLogger("deductmwp")


class CliError(Exception):
    """Runtime or data problem reported with exit code 1."""


def _constants(text: str) -> tuple[Fraction, ...]:
    try:
        return tuple(Fraction(c.strip()) for c in text.split(",") if c.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad constant list {text!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deductmwp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    seed = argparse.ArgumentParser(add_help=False, parents=[common])
    seed.add_argument("--seed", type=int, default=1)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--epochs", type=_positive, default=300)
    model.add_argument("--lr", type=float, default=1e-3)
    model.add_argument("--hidden", type=_positive, default=64)
    model.add_argument("--batch-size", type=_positive, default=8)
    model.add_argument("--max-steps", type=_positive, default=6)
    model.add_argument("--no-question", action="store_true")
    model.add_argument("--no-commutative", action="store_true")
    model.add_argument("--enable-pow", action="store_true")
    model.add_argument("--self-pairs", action="store_true", help="also enumerate a+a, a-a, a*a, a/a")
    model.add_argument("--constants", type=_constants, default=(Fraction(1),), help='e.g. "1,100"')
    model.add_argument("--margin", type=float, default=1.0)
    model.add_argument("--no-stop-loss", action="store_true")
    model.add_argument("--no-early-stop", action="store_true")

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--tol", type=float, default=1e-4)
    scoring.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("gen", parents=[seed], help="write a synthetic JSONL corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive, default=200)
    p.add_argument("--templates", help=f"comma list from {','.join(TEMPLATES)}")
    p.add_argument("--min", type=int, default=1)
    p.add_argument("--max", type=int, default=20)

    p = sub.add_parser("train", parents=[seed, model, scoring], help="train and save a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint to write")
    p.add_argument("--log", help="CSV training log (default: <ckpt>.log.csv)")
    p.add_argument("--out", help="metrics JSON on the training data")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--rejects", help="write rejected input lines here")

    p = sub.add_parser("eval", parents=[common, scoring], help="value accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="metrics JSON (default: stdout)")
    p.add_argument("--max-steps", type=_positive)
    p.add_argument("--rejects")

    for name, text in (("solve", "print the predicted expression and value"),
                       ("inspect", "per-step candidate score table as JSON")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--text", required=True)
        p.add_argument("--max-steps", type=_positive)
        if name == "inspect":
            p.add_argument("--out")
    return parser


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return p


def _operator(args) -> OperatorConfig:
    return OperatorConfig(enable_pow=args.enable_pow, constants=args.constants,
                          allow_self_pairs=args.self_pairs, max_steps=args.max_steps)


def _load(path: str, config: OperatorConfig, rejects_path: str | None):
    problems, rejects = load_jsonl(_require_file(path), config)
    if rejects:
        log.warning("%d input line(s) rejected", len(rejects))
        for r in rejects[:5]:
            log.warning("  line %d: %s", r.line, r.reason)
    if rejects_path:
        write_rejects(rejects_path, rejects)
    if not problems:
        raise CliError("empty corpus")
    return problems


def _metrics(model: Model, problems, tol: float, jobs: int) -> dict:
    out = evaluate_corpus(model, problems, tol, jobs)
    out["config_echo"] = model.config.to_dict()
    out["seed"] = model.config.seed
    return out


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_model(path: str) -> Model:
    try:
        return Model.load(_require_file(path))
    except (KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: not a checkpoint ({exc})") from exc


def cmd_gen(args) -> None:
    names = [t.strip() for t in args.templates.split(",")] if args.templates else None
    try:
        problems = generate_synthetic(args.seed, args.count, names, (args.min, args.max))
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from exc
    write_jsonl(args.out, problems)
    print(f"wrote {len(problems)} problems to {args.out}")


def cmd_train(args) -> None:
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed, hidden=args.hidden,
        max_steps=args.max_steps, operator=_operator(args), no_question=args.no_question,
        no_commutative=args.no_commutative, tol=args.tol, eval_every=args.eval_every,
        margin=args.margin, stop_loss=not args.no_stop_loss, early_stop=not args.no_early_stop,
    )
    problems = _load(args.data, config.operator, args.rejects)
    model, history = train(problems, config)
    model.save(args.ckpt)
    write_training_log(args.log or f"{args.ckpt}.log.csv", history)
    if args.out:
        _write_json(_metrics(model, problems, args.tol, args.jobs), args.out)
    print(f"trained {len(history)} epochs, final loss {history[-1].loss:.6g}; checkpoint {args.ckpt}")


def cmd_eval(args) -> None:
    model = _load_model(args.ckpt)
    if args.max_steps:
        model.config = replace(model.config, max_steps=args.max_steps)
    problems = _load(args.data, model.operator, args.rejects)
    _write_json(_metrics(model, problems, args.tol, args.jobs), args.out)


def _problem_from_text(model: Model, text: str):
    try:
        return make_problem("cli", text, config=model.operator)
    except ProblemError as exc:
        raise CliError(str(exc)) from exc


def cmd_solve(args) -> None:
    model = _load_model(args.ckpt)
    problem = _problem_from_text(model, args.text)
    print(describe_prediction(model, problem, predict(model, problem, args.max_steps)))


def cmd_inspect(args) -> None:
    model = _load_model(args.ckpt)
    problem = _problem_from_text(model, args.text)
    _write_json(inspect_problem(model, problem, args.max_steps), args.out)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "solve": cmd_solve, "inspect": cmd_inspect}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "tol", 0) < 0:
        parser.print_usage(sys.stderr)
        print("error: --tol must be >= 0", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
