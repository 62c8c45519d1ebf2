"""Exact evaluation of step lists and answer matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

from .corpus import Family, OperandRef, Quantity, StepExpression, StepList, _Bin, _Num, _parse_infix

Value = Union[Fraction, float]

MAX_BITS = 4096


@dataclass
class EvalOutcome:
    values: list[Value] = field(default_factory=list)
    final: Value | None = None
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    def describe(self) -> str:
        return f"failure({self.failure})" if self.failure else format_value(self.final)


class _StepFailure(Exception):
    pass


def _check_size(v: Value) -> Value:
    if isinstance(v, Fraction):
        if v.numerator.bit_length() > MAX_BITS or v.denominator.bit_length() > MAX_BITS:
            raise _StepFailure("overflow")
    elif not math.isfinite(v):
        raise _StepFailure("overflow")
    return v


def _power(base: Value, exponent: Value) -> Value:
    if isinstance(exponent, Fraction) and exponent.denominator == 1 and isinstance(base, Fraction):
        e = exponent.numerator
        if base == 0 and e < 0:
            raise _StepFailure("zero to a negative power")
        bits = max(base.numerator.bit_length(), base.denominator.bit_length())
        if bits * abs(e) > MAX_BITS:
            raise _StepFailure("overflow")
        return base ** e
    b, e = float(base), float(exponent)
    if b < 0:
        raise _StepFailure("undefined power: negative base with non-integer exponent")
    if b == 0 and e < 0:
        raise _StepFailure("zero to a negative power")
    try:
        return b ** e
    except OverflowError as exc:
        raise _StepFailure("overflow") from exc


def apply_step(step: StepExpression, a: Value, b: Value) -> Value:
    if step.op_family == Family.POW:
        return _check_size(_power(a, b))
    if step.op_family == Family.ADD:
        if step.left_inverted:
            a = -a
        if step.right_inverted:
            b = -b
        return _check_size(a + b)
    for inverted, v in ((step.left_inverted, a), (step.right_inverted, b)):
        if inverted and v == 0:
            raise _StepFailure("division by zero")
    if step.left_inverted:
        a = 1 / a if isinstance(a, float) else Fraction(1) / a
    if step.right_inverted:
        b = 1 / b if isinstance(b, float) else Fraction(1) / b
    return _check_size(a * b)


def _leaf_values(quantities) -> list[Value]:
    return [q.value if isinstance(q, Quantity) else Fraction(q) for q in quantities]


def evaluate(steps: StepList | Sequence[StepExpression], quantities, constants=(Fraction(1),)) -> EvalOutcome:
    """Evaluate every step exactly; stops at the first failing step."""
    qv = _leaf_values(quantities)
    cv = [Fraction(c) for c in constants]
    out = EvalOutcome()

    def resolve(ref: OperandRef) -> Value:
        if ref.kind == OperandRef.QUANTITY:
            return qv[ref.index]
        if ref.kind == OperandRef.CONSTANT:
            return cv[ref.index]
        return out.values[ref.index]

    for step in steps:
        try:
            value = apply_step(step, resolve(step.left), resolve(step.right))
        except _StepFailure as exc:
            out.failure = str(exc)
            out.final = None
            return out
        out.values.append(value)
        out.final = value
    if not out.values:
        out.failure = "empty step list"
    return out


def evaluate_infix(infix: str) -> Fraction:
    """Evaluate a literal infix equation directly (no quantity binding)."""
    def walk(node) -> Value:
        if isinstance(node, _Num):
            return node.value
        a, b = walk(node.left), walk(node.right)
        family = {"+": Family.ADD, "-": Family.ADD, "*": Family.MUL, "/": Family.MUL, "^": Family.POW}[node.op]
        step = StepExpression(family, OperandRef.quantity(0), OperandRef.quantity(1),
                              right_inverted=node.op in "-/")
        return apply_step(step, a, b)

    try:
        return walk(_parse_infix(infix))
    except _StepFailure as exc:
        raise ZeroDivisionError(str(exc)) from exc


def _as_fraction(x) -> Fraction | None:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        return None
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float) and math.isfinite(x):
        return Fraction(x)
    return None


def answers_match(predicted, gold, tol: float = 1e-4) -> bool:
    """True when a predicted value equals the gold answer.

    Exact gold (int or Fraction) is compared exactly against an exact
    prediction. Otherwise, |pred - gold| <= tol * max(1, |gold|).
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    if isinstance(predicted, EvalOutcome):
        if not predicted.ok:
            return False
        predicted = predicted.final
    if predicted is None:
        return False
    if isinstance(gold, str):
        gold = Fraction(gold)
    pf, gf = _as_fraction(predicted), _as_fraction(gold)
    if isinstance(predicted, Fraction) and isinstance(gold, (int, Fraction)) and not isinstance(gold, bool):
        return predicted == gold
    if pf is not None and gf is not None and pf == gf:
        return True
    p, g = float(predicted), float(gold)
    if not (math.isfinite(p) and math.isfinite(g)):
        return False
    return abs(p - g) <= tol * max(1.0, abs(g))


def format_value(v: Value | None) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6g}"
    if v.denominator == 1:
        return str(v.numerator)
    d = v.denominator
    while d % 2 == 0:
        d //= 2
    while d % 5 == 0:
        d //= 5
    if d == 1:
        return format(float(v), ".12g")
    return f"{v.numerator}/{v.denominator}"


def render_infix(steps: StepList | Sequence[StepExpression], quantities, constants=(Fraction(1),),
                 final: int | None = None) -> str:
    """Human-readable infix for step ``final`` (default: the last step)."""
    qv = _leaf_values(quantities)
    cv = [Fraction(c) for c in constants]
    steps = list(steps)
    final = len(steps) - 1 if final is None else final

    def render(ref: OperandRef) -> tuple[str, int]:
        if ref.kind == OperandRef.QUANTITY:
            return format_value(qv[ref.index]), 9
        if ref.kind == OperandRef.CONSTANT:
            return format_value(cv[ref.index]), 9
        return node(steps[ref.index])

    def wrap(text: str, prec: int, need: int) -> str:
        return f"({text})" if prec < need else text

    def node(step: StepExpression) -> tuple[str, int]:
        (a, pa), (b, pb) = render(step.left), render(step.right)
        if step.op_family == Family.POW:
            return f"{wrap(a, pa, 4)} ^ {wrap(b, pb, 3)}", 3
        if step.op_family == Family.ADD:
            if step.left_inverted:
                (a, pa), (b, pb) = (b, pb), (a, pa)
            if step.left_inverted or step.right_inverted:
                return f"{wrap(a, pa, 1)} − {wrap(b, pb, 2)}", 1
            return f"{wrap(a, pa, 1)} + {wrap(b, pb, 1)}", 1
        if step.left_inverted:
            (a, pa), (b, pb) = (b, pb), (a, pa)
        if step.left_inverted or step.right_inverted:
            return f"{wrap(a, pa, 2)} ÷ {wrap(b, pb, 3)}", 2
        return f"{wrap(a, pa, 2)} × {wrap(b, pb, 2)}", 2

    return node(steps[final])[0]
