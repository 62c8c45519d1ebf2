"""Training, greedy inference and value-accuracy evaluation."""

from __future__ import annotations

import csv
import logging
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .corpus import OperatorConfig, Problem, StepExpression, steps_supported
from .decoder import Decoder, OperandPool, StepScores, enumerate_candidates
from .encoder import DeskEncoder, DeskEncoderSpec, EncoderInput, EncoderOutput, Vocab, build_vocab, prepare_input
from .expression import EvalOutcome, Value, answers_match, evaluate, format_value, render_infix
from .numerics import (Adam, ParamSet, Tensor, backward, concat, load_checkpoint, max_element,
                       no_grad, relu, reshape, save_checkpoint, take)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 1
    hidden: int = 64
    embed_dim: int | None = None
    max_steps: int = 6
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    no_question: bool = False
    no_commutative: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    tol: float = 1e-4
    eval_every: int = 0
    lowercase: bool = True
    # margin = 0 and stop_loss off is the bare "max score - gold score" objective
    margin: float = 1.0
    stop_loss: bool = True
    # stop once an epoch's summed loss is exactly zero (all gradients vanish from there on)
    early_stop: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.operator.max_steps != self.max_steps:
            self.operator = replace(self.operator, max_steps=self.max_steps)

    def to_dict(self) -> dict:
        out = asdict(self)
        op = self.operator
        out["operator"] = {
            "enable_pow": op.enable_pow,
            "constants": [str(c) for c in op.constants],
            "allow_self_pairs": op.allow_self_pairs,
            "max_steps": op.max_steps,
        }
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        op = dict(d.pop("operator"))
        op["constants"] = tuple(Fraction(c) for c in op["constants"])
        d["betas"] = tuple(d["betas"])
        return cls(operator=OperatorConfig(**op), **d)


class Model:
    """Encoder + decoder sharing one parameter set."""

    def __init__(self, config: TrainConfig, vocab: Vocab):
        self.config, self.vocab = config, vocab
        rng = np.random.default_rng(config.seed)
        self.params = ParamSet()
        d = config.hidden
        self.encoder = DeskEncoder(
            DeskEncoderSpec(len(vocab), config.embed_dim or d, d, config.lowercase), self.params, rng)
        self.decoder = Decoder(d, config.operator, self.params, rng,
                               no_commutative=config.no_commutative, no_question=config.no_question)
        self._inputs: dict[tuple[str, str], EncoderInput] = {}

    @property
    def operator(self) -> OperatorConfig:
        return self.config.operator

    def prepare(self, problem: Problem) -> EncoderInput:
        key = (problem.id, problem.text)
        inp = self._inputs.get(key)
        if inp is None:
            inp = self._inputs[key] = prepare_input(problem, self.vocab, self.config.lowercase)
        return inp

    def encode(self, problem: Problem) -> EncoderOutput:
        return self.encoder.encode(self.prepare(problem))

    def save(self, path) -> None:
        save_checkpoint(path, self.params, {"config": self.config.to_dict(), "vocab": self.vocab.itos})

    @classmethod
    def load(cls, path) -> "Model":
        meta, state = load_checkpoint(path)
        model = cls(TrainConfig.from_dict(meta["config"]), Vocab.from_list(meta["vocab"]))
        model.params.load_state(state)
        return model

    def __getstate__(self):
        return {"config": self.config, "vocab": self.vocab, "state": self.params.state()}

    def __setstate__(self, st):
        self.__init__(st["config"], st["vocab"])
        self.params.load_state(st["state"])


def apply_ablation(config: TrainConfig, vocab: Vocab, no_question: bool | None = None,
                   no_commutative: bool | None = None) -> Model:
    """Build the model variant for the given ablation switches."""
    if no_question is not None:
        config = replace(config, no_question=no_question)
    if no_commutative is not None:
        config = replace(config, no_commutative=no_commutative)
    return Model(config, vocab)


# loss ---------------------------------------------------------------------------

class GoldNotFound(RuntimeError):
    pass


@dataclass
class LossReport:
    margins: list[float]
    total: float
    gold_argmax: int
    stop_margin: float = 0.0
    pool_refs: list = field(default_factory=list, repr=False)


def problem_loss(model: Model, problem: Problem) -> tuple[Tensor, LossReport]:
    """Teacher-forced training objective for one problem.

    Per gold step: max over candidates of (score + margin if not gold) minus
    the gold score. With ``stop_loss`` a hinge also asks the final gold step's
    stop score to beat, by the margin, the stop scores of the earlier gold
    steps and of every candidate met while decoding greedily on from the gold
    expression up to ``max_steps``.
    """
    if problem.gold_steps is None:
        raise ValueError(f"problem {problem.id} has no gold steps")
    cfg = model.config
    dec = model.decoder
    pool = dec.initial_pool(model.encode(problem))
    terms: list[Tensor] = []
    stops: list[Tensor] = []
    hits = 0
    for t, gold in enumerate(problem.gold_steps):
        steps = enumerate_candidates(pool, model.operator)
        target = gold.canonical()
        try:
            g = steps.index(target)
        except ValueError:
            raise GoldNotFound(f"problem {problem.id}: gold step {t} ({target}) not among candidates") from None
        scored = dec.score_steps(steps, pool)
        hits += scored.argmax() == g
        gold_score = take(scored.s_e, g)
        if cfg.margin:
            cost = np.full(len(steps), cfg.margin)
            cost[g] = 0.0
            terms.append(max_element(scored.s_e + cost) - gold_score)
        else:
            terms.append(max_element(scored.s_e) - gold_score)
        stops.append(take(scored.s_stop, g))
        pool = dec.advance(pool, take(scored.embeddings, g), t)

    gold_refs = list(pool.refs)
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    stop_value = 0.0
    if cfg.stop_loss:
        rivals = [reshape(s, (1,)) for s in stops[:-1]]
        # continue greedily as inference would; every candidate stop score
        # along that continuation is a rival of the gold final step
        for t in range(len(problem.gold_steps), cfg.max_steps):
            after = dec.score_steps(enumerate_candidates(pool, model.operator), pool)
            rivals.append(after.s_stop)
            if t < cfg.max_steps - 1:
                pool = dec.advance(pool, take(after.embeddings, after.argmax()), t)
        if rivals:
            stop_term = relu(max_element(concat(rivals)) + cfg.margin - stops[-1])
            stop_value = stop_term.item()
            loss = loss + stop_term
    values = [m.item() for m in terms]
    report = LossReport(values, loss.item(), hits, stop_value, gold_refs)
    return loss, report


def train_step(batch: Sequence[Problem], model: Model, optimizer: Adam) -> list[LossReport]:
    """Accumulate gradients over ``batch`` (fixed order), then one optimizer step."""
    model.params.zero_grad()
    reports = []
    for problem in batch:
        loss, report = problem_loss(model, problem)
        backward(loss)
        reports.append(report)
    optimizer.step()
    return reports


def trainable(problems: Sequence[Problem], config: OperatorConfig) -> list[Problem]:
    keep = []
    for p in problems:
        if p.gold_steps is None:
            log.warning("problem %s has no gold step list; excluded from training", p.id)
            continue
        why = steps_supported(p.gold_steps, config)
        if why:
            log.warning("problem %s excluded from training: %s", p.id, why)
            continue
        keep.append(p)
    return keep


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float | None


def train(problems: Sequence[Problem], config: TrainConfig, vocab: Vocab | None = None,
          on_epoch: Callable[[EpochLog, Model], None] | None = None) -> tuple[Model, list[EpochLog]]:
    data = trainable(problems, config.operator)
    if not data:
        raise ValueError("no trainable problems")
    vocab = vocab or build_vocab(problems, config.lowercase)
    model = Model(config, vocab)
    optimizer = Adam(model.params, config.lr, config.betas, config.eps)
    order_rng = random.Random(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = list(range(len(data)))
        order_rng.shuffle(order)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [data[i] for i in order[start:start + config.batch_size]]
            total += sum(r.total for r in train_step(batch, model, optimizer))
        acc = None
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            acc = evaluate_corpus(model, data, config.tol)["value_accuracy"]
        row = EpochLog(epoch, total, acc)
        history.append(row)
        log.info("epoch %d loss %.6f%s", epoch, total, "" if acc is None else f" train_acc {acc:.4f}")
        if on_epoch:
            on_epoch(row, model)
        if config.early_stop and total == 0.0 and (config.margin > 0 or config.stop_loss):
            log.info("zero loss at epoch %d; stopping", epoch)
            break
    return model, history


def write_training_log(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc"])
        for row in history:
            w.writerow([row.epoch, repr(row.loss), "" if row.train_acc is None else repr(row.train_acc)])


# inference ---------------------------------------------------------------------------

@dataclass
class Prediction:
    steps: list[StepExpression]
    stop_scores: list[float]
    final_index: int  # 1-based t*
    outcome: EvalOutcome
    trace: list[StepScores] = field(default_factory=list, repr=False)

    @property
    def value(self) -> Value | None:
        return self.outcome.final

    @property
    def chosen(self) -> list[StepExpression]:
        return self.steps[:self.final_index]


def predict(model: Model, problem: Problem, max_steps: int | None = None, keep_trace: bool = False) -> Prediction:
    """Greedy decoding for T steps; the output is the step with the highest stop score."""
    T = max_steps or model.config.max_steps
    dec = model.decoder
    chosen, stops, trace = [], [], []
    with no_grad():
        pool = dec.initial_pool(model.encode(problem))
        for t in range(T):
            scored = dec.score_steps(enumerate_candidates(pool, model.operator), pool)
            i = scored.argmax()
            chosen.append(scored.steps[i])
            stops.append(float(scored.s_stop.data[i]))
            if keep_trace:
                trace.append(scored)
            if t < T - 1:
                pool = dec.advance(pool, take(scored.embeddings, i), t)
    final = int(np.argmax(stops)) + 1
    outcome = evaluate(chosen[:final], problem.quantities, model.operator.constants)
    return Prediction(chosen, stops, final, outcome, trace)


def describe_prediction(model: Model, problem: Problem, pred: Prediction) -> str:
    expr = render_infix(pred.chosen, problem.quantities, model.operator.constants)
    return f"{expr} = {pred.outcome.describe()}"


def inspect_problem(model: Model, problem: Problem, max_steps: int | None = None) -> dict:
    """Per-step candidate score tables for one problem."""
    pred = predict(model, problem, max_steps, keep_trace=True)
    consts = model.operator.constants
    steps_out = []
    for t, scored in enumerate(pred.trace):
        prefix = pred.steps[:t]
        rows = []
        for i, step in enumerate(scored.steps):
            b = scored.breakdown(i)
            rows.append({
                "step": render_infix(prefix + [step], problem.quantities, consts),
                "form": str(step),
                "s_var": b.s_var, "s_expr": b.s_expr, "s_stop": b.s_stop, "s_e": b.s_e,
            })
        steps_out.append({
            "t": t + 1,
            "chosen": render_infix(pred.steps[:t + 1], problem.quantities, consts),
            "candidates": rows,
        })
    return {
        "id": problem.id,
        "final_index": pred.final_index,
        "expression": render_infix(pred.chosen, problem.quantities, consts),
        "value": format_value(pred.value) if pred.outcome.ok else None,
        "failure": pred.outcome.failure,
        "steps": steps_out,
    }


_WORKER_MODEL: Model | None = None


def _init_worker(model: Model) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _predict_worker(problem: Problem) -> Prediction:
    return predict(_WORKER_MODEL, problem)


def evaluate_corpus(model: Model, problems: Sequence[Problem], tol: float = 1e-4, jobs: int = 1) -> dict:
    """Value accuracy overall and by gold step count."""
    if not problems:
        raise ValueError("empty corpus")
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(model,)) as pool:
            preds = list(pool.map(_predict_worker, problems, chunksize=16))
    else:
        preds = [predict(model, p) for p in problems]
    correct, failures = 0, 0
    by_steps: dict[str, dict] = {}
    for p, pred in zip(problems, preds):
        ok = p.answer is not None and answers_match(pred.outcome, p.answer, tol)
        correct += ok
        failures += not pred.outcome.ok
        key = str(len(p.gold_steps)) if p.gold_steps is not None else "unknown"
        bucket = by_steps.setdefault(key, {"n": 0, "correct": 0})
        bucket["n"] += 1
        bucket["correct"] += ok
    for bucket in by_steps.values():
        bucket["accuracy"] = bucket["correct"] / bucket["n"]
    return {
        "value_accuracy": correct / len(problems),
        "n": len(problems),
        "correct": correct,
        "by_steps": dict(sorted(by_steps.items())),
        "failures": failures,
    }
