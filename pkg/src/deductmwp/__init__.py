"""Bottom-up deductive math word problem solver with commutative-invariant step embeddings."""

from .corpus import (Family, OperandRef, OperatorConfig, Problem, StepExpression, StepList, generate_synthetic,
                     load_jsonl, make_problem, parse_equation)
from .engine import Model, TrainConfig, apply_ablation, evaluate_corpus, predict, problem_loss, train
from .expression import answers_match, evaluate

__all__ = [
    "Family", "OperandRef", "OperatorConfig", "Problem", "StepExpression", "StepList", "generate_synthetic",
    "load_jsonl", "make_problem", "parse_equation", "Model", "TrainConfig", "apply_ablation", "evaluate_corpus",
    "predict", "problem_loss", "train", "answers_match", "evaluate",
]
