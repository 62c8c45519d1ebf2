"""Bottom-up expression decoder.

At each step every candidate (operand pair x operator form) is embedded,
scored, and the winner is appended to the operand pool, after which all pool
embeddings are refreshed against the chosen expression and the question.

Addition and multiplication embeddings are sum-aggregated over their two
(possibly inverted) operands, so ``a+b`` and ``b+a`` share one embedding and
``a-b`` is literally ``a + neg(b)``. Scoring is the sum of an operand score,
an expression score and a stop score.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Family, OperandRef, OperatorConfig, StepExpression
from .encoder import EncoderOutput
from .numerics import (GruCell, GruCellSpec, Mlp, MlpSpec, ParamSet, Tensor, concat, matmul,
                       reshape, take, uniform_init)


@dataclass
class OperandPool:
    refs: list[OperandRef]
    embeddings: Tensor  # (len(refs), d)
    question_embedding: Tensor

    def __len__(self) -> int:
        return len(self.refs)

    def __post_init__(self):
        self._index = {r: i for i, r in enumerate(self.refs)}

    def row(self, ref: OperandRef) -> int:
        try:
            return self._index[ref]
        except KeyError:
            raise KeyError(f"operand {ref} is not in the pool") from None


@dataclass(frozen=True)
class ScoreBreakdown:
    s_var: float
    s_expr: float
    s_stop: float
    s_e: float


@dataclass
class Candidate:
    step: StepExpression
    embedding: np.ndarray | None = None
    scores: ScoreBreakdown | None = None


@dataclass
class StepScores:
    """Batched embeddings and scores for one decoding step (graph-carrying)."""

    steps: list[StepExpression]
    embeddings: Tensor  # (c, d)
    s_var: Tensor
    s_expr: Tensor
    s_stop: Tensor
    s_e: Tensor

    def breakdown(self, i: int) -> ScoreBreakdown:
        return ScoreBreakdown(float(self.s_var.data[i]), float(self.s_expr.data[i]),
                              float(self.s_stop.data[i]), float(self.s_e.data[i]))

    def candidates(self) -> list[Candidate]:
        return [Candidate(s, self.embeddings.data[i], self.breakdown(i)) for i, s in enumerate(self.steps)]

    def argmax(self) -> int:
        # steps are in canonical sort order, so the first maximum is the
        # lexicographically smallest tied step
        return int(np.argmax(self.s_e.data))


def enumerate_candidates(pool: OperandPool | Sequence[OperandRef], config: OperatorConfig) -> list[StepExpression]:
    """All distinct canonical step forms over the pool, sorted canonically.

    Per unordered pair: a+b, a-b, b-a, a*b, a/b, b/a (plus a^b, b^a with
    pow). Per operand with self-pairs: a+a, a-a, a*a, a/a (plus a^a).
    """
    refs = tuple(pool.refs if isinstance(pool, OperandPool) else pool)
    if not refs:
        raise ValueError("operand pool is empty")
    return list(_enumerate(refs, config.enable_pow, config.allow_self_pairs))


@functools.lru_cache(maxsize=4096)
def _enumerate(refs: tuple[OperandRef, ...], enable_pow: bool, allow_self_pairs: bool) -> tuple[StepExpression, ...]:
    out: list[StepExpression] = []
    for a, b in itertools.combinations(sorted(refs), 2):
        for fam in (Family.ADD, Family.MUL):
            out.append(StepExpression(fam, a, b))
            out.append(StepExpression(fam, a, b, right_inverted=True))
            out.append(StepExpression(fam, a, b, left_inverted=True))
        if enable_pow:
            out.append(StepExpression(Family.POW, a, b))
            out.append(StepExpression(Family.POW, b, a))
    if allow_self_pairs:
        for a in refs:
            for fam in (Family.ADD, Family.MUL):
                out.append(StepExpression(fam, a, a))
                out.append(StepExpression(fam, a, a, right_inverted=True))
            if enable_pow:
                out.append(StepExpression(Family.POW, a, a))
    out = [s.canonical() for s in out]
    out.sort(key=StepExpression.sort_key)
    return tuple(out)


class Decoder:
    """Parameters and forward computations of the constructor, scorer and
    rationalizer. ``no_commutative`` swaps the sum-aggregated constructors for
    ordered concatenation MLPs; ``no_question`` replaces the question vector
    with a learned constant."""

    def __init__(self, hidden: int, config: OperatorConfig, store: ParamSet, rng: np.random.Generator,
                 no_commutative: bool = False, no_question: bool = False, mlp_hidden: int | None = None,
                 name: str = "dec"):
        d = hidden
        h = mlp_hidden or hidden
        self.d, self.config = d, config
        self.no_commutative, self.no_question = no_commutative, no_question

        def mlp(label, i, o):
            return Mlp(MlpSpec(i, h, o), store, f"{name}.{label}", rng)

        if no_commutative:
            self.ord_add = mlp("ord_add", 2 * d, d)
            self.ord_sub = mlp("ord_sub", 2 * d, d)
            self.ord_mul = mlp("ord_mul", 2 * d, d)
            self.ord_div = mlp("ord_div", 2 * d, d)
        else:
            self.add1 = mlp("add1", d, d)
            self.add2 = mlp("add2", d, d)
            self.mul1 = mlp("mul1", d, d)
            self.mul2 = mlp("mul2", d, d)
            self.add_inv = mlp("add_inv", d, d)
            self.mul_inv = mlp("mul_inv", d, d)
        if config.enable_pow:
            self.pow = mlp("pow", 2 * d, d)
        self.var = mlp("var", d, 1)
        self.expr = mlp("expr", d, 1)
        self.stop = mlp("stop", d, d)
        self.gru_stop = GruCell(GruCellSpec(d, d), store, f"{name}.gru_stop", rng)
        self.stop_w = store.add(f"{name}.stop_proj.weight", uniform_init(rng, (d,), d))
        self.stop_b = store.add(f"{name}.stop_proj.bias", np.zeros(()))
        self.rat1 = GruCell(GruCellSpec(d, d), store, f"{name}.gru_rat1", rng)
        self.rat2 = GruCell(GruCellSpec(d, d), store, f"{name}.gru_rat2", rng)
        self.constants = store.add(f"{name}.constants", rng.normal(0.0, 1.0 / np.sqrt(d), (len(config.constants), d)))
        if no_question:
            self.question_const = store.add(f"{name}.question_const", rng.normal(0.0, 1.0 / np.sqrt(d), (d,)))

    # pool ---------------------------------------------------------------------
    def initial_pool(self, enc: EncoderOutput) -> OperandPool:
        n, m = len(enc), len(self.config.constants)
        refs = [OperandRef.quantity(i) for i in range(n)] + [OperandRef.constant(j) for j in range(m)]
        emb = concat([enc.quantity_embeddings, self.constants], axis=0) if m else enc.quantity_embeddings
        return OperandPool(refs, emb, enc.question_embedding)

    def question(self, pool: OperandPool) -> Tensor:
        return self.question_const if self.no_question else pool.question_embedding

    # constructor --------------------------------------------------------------------
    def embed_steps(self, steps: Sequence[StepExpression], pool: OperandPool) -> Tensor:
        """Embeddings of ``steps`` (as given; no canonicalization) -> (c, d)."""
        if not steps:
            raise ValueError("no steps to embed")
        P = pool.embeddings
        m = len(pool)
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(steps):
            if s.op_family == Family.POW:
                key = "pow"
            elif self.no_commutative:
                key = ("sub" if s.left_inverted or s.right_inverted else "add") if s.op_family == Family.ADD \
                    else ("div" if s.left_inverted or s.right_inverted else "mul")
            else:
                key = "add" if s.op_family == Family.ADD else "mul"
            groups.setdefault(key, []).append(i)

        pieces, order = [], []
        for key, idx in groups.items():
            chosen = [steps[i] for i in idx]
            left = np.array([pool.row(s.left) for s in chosen], dtype=np.int64)
            right = np.array([pool.row(s.right) for s in chosen], dtype=np.int64)
            if key == "pow":
                if not self.config.enable_pow:
                    raise ValueError("power step but enable_pow is off")
                pieces.append(self.pow(concat([take(P, left), take(P, right)], axis=1)))
            elif self.no_commutative:
                if key in ("sub", "div"):
                    # ordered (minuend, subtrahend) / (dividend, divisor)
                    linv = np.array([s.left_inverted for s in chosen])
                    left, right = np.where(linv, right, left), np.where(linv, left, right)
                net = {"add": self.ord_add, "sub": self.ord_sub, "mul": self.ord_mul, "div": self.ord_div}[key]
                pieces.append(net(concat([take(P, left), take(P, right)], axis=1)))
            else:
                inner, outer, inv = (self.add1, self.add2, self.add_inv) if key == "add" \
                    else (self.mul1, self.mul2, self.mul_inv)
                need_inv = any(s.left_inverted or s.right_inverted for s in chosen)
                source = concat([P, inv(P)], axis=0) if need_inv else P
                phi = inner(source)
                li = left + m * np.array([s.left_inverted for s in chosen], dtype=np.int64)
                ri = right + m * np.array([s.right_inverted for s in chosen], dtype=np.int64)
                pieces.append(outer(take(phi, li) + take(phi, ri)))
            order.extend(idx)
        H = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
        if order != list(range(len(steps))):
            H = take(H, np.argsort(np.asarray(order)))
        return H

    def embed_candidate(self, step: StepExpression, pool: OperandPool) -> Tensor:
        return take(self.embed_steps([step], pool), 0)

    # scorer ---------------------------------------------------------------------------
    def score_steps(self, steps: Sequence[StepExpression], pool: OperandPool,
                    embeddings: Tensor | None = None) -> StepScores:
        H = self.embed_steps(steps, pool) if embeddings is None else embeddings
        c = len(steps)
        left = np.array([pool.row(s.left) for s in steps], dtype=np.int64)
        right = np.array([pool.row(s.right) for s in steps], dtype=np.int64)
        var = reshape(self.var(pool.embeddings), (len(pool),))
        s_var = take(var, left) + take(var, right)
        s_expr = reshape(self.expr(H), (c,))
        g = self.gru_stop(self.stop(H), self.question(pool))
        s_stop = matmul(g, self.stop_w) + self.stop_b
        s_e = s_var + s_expr + s_stop
        return StepScores(list(steps), H, s_var, s_expr, s_stop, s_e)

    def score_candidate(self, step: StepExpression, pool: OperandPool) -> ScoreBreakdown:
        return self.score_steps([step], pool).breakdown(0)

    # rationalizer ---------------------------------------------------------------------
    def rationalize(self, pool: OperandPool, chosen: Tensor) -> OperandPool:
        """h <- GRU2(input=GRU1(input=h, hidden=h_e), hidden=question) for every entry."""
        inner = self.rat1(pool.embeddings, chosen)
        updated = self.rat2(inner, self.question(pool))
        return OperandPool(list(pool.refs), updated, pool.question_embedding)

    def append(self, pool: OperandPool, embedding: Tensor, step_index: int) -> OperandPool:
        emb = concat([pool.embeddings, reshape(embedding, (1, self.d))], axis=0)
        return OperandPool(pool.refs + [OperandRef.step(step_index)], emb, pool.question_embedding)

    def advance(self, pool: OperandPool, embedding: Tensor, step_index: int) -> OperandPool:
        """Append a chosen step's embedding and rationalize the grown pool."""
        return self.rationalize(self.append(pool, embedding, step_index), embedding)

    def decode_step(self, pool: OperandPool) -> tuple[Candidate, list[Candidate], StepScores]:
        scored = self.score_steps(enumerate_candidates(pool, self.config), pool)
        cands = scored.candidates()
        return cands[scored.argmax()], cands, scored
