"""Problems, quantities and gold step lists.

Loads problems from JSONL, pulls numbers out of the text, finds the question
sentence, and turns infix gold equations into bottom-up step lists.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Union

log = logging.getLogger(__name__)

Number = Union[int, float, Fraction]


class Family(enum.IntEnum):
    ADD = 0
    MUL = 1
    POW = 2


@dataclass(frozen=True, order=True)
class OperandRef:
    """A quantity, a constant, or the result of an earlier step.

    Ordering (quantities < constants < steps, then by index) is what makes
    commutative forms canonical.
    """

    kind: int
    index: int

    QUANTITY = 0
    CONSTANT = 1
    STEP = 2

    @classmethod
    def quantity(cls, i: int) -> "OperandRef":
        return cls(cls.QUANTITY, i)

    @classmethod
    def constant(cls, i: int) -> "OperandRef":
        return cls(cls.CONSTANT, i)

    @classmethod
    def step(cls, i: int) -> "OperandRef":
        return cls(cls.STEP, i)

    def __str__(self) -> str:
        return "qcs"[self.kind] + str(self.index)


@dataclass(frozen=True)
class StepExpression:
    """One binary step. Subtraction is ADD with an inverted operand and
    division is MUL with an inverted operand; POW is ordered base^exponent."""

    op_family: Family
    left: OperandRef
    right: OperandRef
    left_inverted: bool = False
    right_inverted: bool = False

    def __post_init__(self):
        if self.op_family == Family.POW:
            if self.left_inverted or self.right_inverted:
                object.__setattr__(self, "left_inverted", False)
                object.__setattr__(self, "right_inverted", False)
        elif self.left_inverted and self.right_inverted:
            raise ValueError("at most one operand may be inverted")

    def canonical(self) -> "StepExpression":
        if self.op_family == Family.POW:
            return self
        a = (self.left, self.left_inverted)
        b = (self.right, self.right_inverted)
        if b < a:
            a, b = b, a
        return StepExpression(self.op_family, a[0], b[0], a[1], b[1])

    def sort_key(self) -> tuple:
        return (self.left, self.left_inverted, self.right, self.right_inverted, int(self.op_family))

    def operands(self) -> tuple[OperandRef, OperandRef]:
        return self.left, self.right

    def __str__(self) -> str:
        def side(ref, inv):
            if not inv:
                return str(ref)
            return f"neg({ref})" if self.op_family == Family.ADD else f"inv({ref})"

        sym = {Family.ADD: "+", Family.MUL: "*", Family.POW: "^"}[self.op_family]
        return f"{side(self.left, self.left_inverted)} {sym} {side(self.right, self.right_inverted)}"


@dataclass(frozen=True)
class StepList:
    steps: tuple[StepExpression, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for t, step in enumerate(self.steps):
            for ref in step.operands():
                if ref.kind == OperandRef.STEP and ref.index >= t:
                    raise ValueError(f"step {t} references later step {ref.index}")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]


@dataclass(frozen=True)
class Quantity:
    index: int
    value: Fraction
    char_span: tuple[int, int]
    token_index: int | None = None


@dataclass(frozen=True)
class OperatorConfig:
    enable_pow: bool = False
    constants: tuple[Fraction, ...] = (Fraction(1),)
    # a*a, a+a etc. off by default: with sum aggregation their inputs bracket every cross pair
    allow_self_pairs: bool = False
    max_steps: int = 6

    def __post_init__(self):
        consts = tuple(Fraction(c) for c in self.constants)
        object.__setattr__(self, "constants", consts)
        if len(set(consts)) != len(consts):
            raise ValueError("constants must be distinct")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class Problem:
    id: str
    text: str
    quantities: list[Quantity]
    question_span: tuple[int, int]
    answer: Number | None = None
    gold_equation: str | None = None
    gold_steps: StepList | None = None
    lang: str = "en"

    @property
    def question(self) -> str:
        return self.text[self.question_span[0]:self.question_span[1]]

    @property
    def values(self) -> list[Fraction]:
        return [q.value for q in self.quantities]


# quantities and question ----------------------------------------------------

_NUMBER_RE = re.compile(r"(?<![\d.])(\d+/0*[1-9]\d*|\d+\.\d+|\d+)(?![\d])")


def extract_quantities(text: str) -> list[Quantity]:
    """Integers, decimals and inline ``a/b`` fractions, in order of appearance.

    Percent signs, currency and number words are not recognized.
    """
    out = []
    for m in _NUMBER_RE.finditer(text):
        out.append(Quantity(index=len(out), value=Fraction(m.group(1)), char_span=m.span(1)))
    return out


_TERMINATORS = frozenset(".?!。？！")


def _is_terminator(text: str, i: int) -> bool:
    ch = text[i]
    if ch not in _TERMINATORS:
        return False
    if ch == "." and 0 < i < len(text) - 1 and text[i - 1].isdigit() and text[i + 1].isdigit():
        return False
    return True


def segment_question(text: str) -> tuple[int, int]:
    """Span of the last sentence, trailing terminator included."""
    end = len(text.rstrip())
    i = end
    while i > 0 and _is_terminator(text, i - 1):
        i -= 1
    start = 0
    for j in range(i - 1, -1, -1):
        if _is_terminator(text, j):
            start = j + 1
            break
    while start < end and text[start].isspace():
        start += 1
    return start, end


# equations --------------------------------------------------------------------

class EquationError(ValueError):
    pass


_OP_ALIASES = {"+": "+", "-": "-", "−": "-", "–": "-", "*": "*", "×": "*", "x": "*",
               "/": "/", "÷": "/", "^": "^", "**": "^"}
_EQ_TOKEN_RE = re.compile(r"\s*(?:(\d+(?:\.\d+)?)|(\*\*|[-+*/^()−–×÷]))")
_BINARY_POWER = {"+": (10, 11), "-": (10, 11), "*": (20, 21), "/": (20, 21), "^": (31, 30)}


@dataclass
class _Num:
    value: Fraction
    pos: int


@dataclass
class _Bin:
    op: str
    left: object
    right: object


def _lex_equation(infix: str) -> list[tuple[str, object, int]]:
    tokens, pos = [], 0
    stripped = infix.rstrip()
    while pos < len(stripped):
        m = _EQ_TOKEN_RE.match(stripped, pos)
        if not m:
            raise EquationError(f"unexpected character {stripped[pos:].lstrip()[:1]!r} at {pos}")
        if m.group(1) is not None:
            tokens.append(("num", Fraction(m.group(1)), m.start(1)))
        else:
            sym = m.group(2)
            kind = sym if sym in "()" else "op"
            tokens.append((kind, _OP_ALIASES.get(sym, sym), m.start(2)))
        pos = m.end()
    return tokens


def _parse_infix(infix: str):
    tokens = _lex_equation(infix)
    if not tokens:
        raise EquationError("empty expression")
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def primary():
        nonlocal pos
        tok = peek()
        if tok is None:
            raise EquationError("unexpected end of expression")
        pos += 1
        if tok[0] == "num":
            return _Num(tok[1], tok[2])
        if tok[0] == "(":
            node = expr(0)
            close = peek()
            if close is None or close[0] != ")":
                raise EquationError("unbalanced parentheses: missing ')'")
            pos += 1
            return node
        raise EquationError(f"unexpected token {tok[1]!r} at {tok[2]}")

    def expr(min_power):
        nonlocal pos
        left = primary()
        while True:
            tok = peek()
            if tok is None or tok[0] != "op":
                break
            lp, rp = _BINARY_POWER[tok[1]]
            if lp < min_power:
                break
            pos += 1
            left = _Bin(tok[1], left, expr(rp))
        return left

    tree = expr(0)
    if pos != len(tokens):
        tok = tokens[pos]
        if tok[0] == ")":
            raise EquationError("unbalanced parentheses: unexpected ')'")
        raise EquationError(f"unexpected token {tok[1]!r} at {tok[2]}")
    return tree


class _Binder:
    """Leftmost-unbound-first literal binding."""

    def __init__(self, values: Sequence[Fraction], constants: Sequence[Fraction]):
        self.values = list(values)
        self.constants = list(constants)
        self.bound = [False] * len(self.values)

    def known(self, v: Fraction) -> bool:
        return v in self.values or v in self.constants

    def bind(self, v: Fraction) -> OperandRef | None:
        for i, q in enumerate(self.values):
            if q == v and not self.bound[i]:
                self.bound[i] = True
                return OperandRef.quantity(i)
        if v in self.constants:
            return OperandRef.constant(self.constants.index(v))
        if v in self.values:
            return OperandRef.quantity(self.values.index(v))
        return None


def parse_equation(infix: str, quantities: Sequence[Quantity | Number],
                   constants: Sequence[Number] = (Fraction(1),)) -> StepList:
    """Infix equation to post-order step list.

    ``^`` binds tightest and is right-associative; ``× ÷`` bind tighter than
    ``+ -``. Each literal binds to the leftmost unbound quantity of equal
    value, then to a constant, then (if every equal quantity is taken) to the
    first equal quantity again. A literal division ``a ÷ b`` whose operands
    are unknown but whose value is a quantity (the text wrote ``a/b``) binds
    to that quantity.
    """
    values = [Fraction(q.value if isinstance(q, Quantity) else q) for q in quantities]
    binder = _Binder(values, [Fraction(c) for c in constants])
    tree = _parse_infix(infix)
    steps: list[StepExpression] = []

    def leaf(value: Fraction, pos: int | None) -> OperandRef:
        ref = binder.bind(value)
        if ref is None:
            where = f" at {pos}" if pos is not None else ""
            raise EquationError(f"unbindable literal {value}{where}")
        return ref

    def walk(node) -> OperandRef:
        if isinstance(node, _Num):
            return leaf(node.value, node.pos)
        if (node.op == "/" and isinstance(node.left, _Num) and isinstance(node.right, _Num)
                and node.right.value != 0
                and not (binder.known(node.left.value) and binder.known(node.right.value))
                and node.left.value / node.right.value in binder.values):
            return leaf(node.left.value / node.right.value, None)
        left = walk(node.left)
        right = walk(node.right)
        if node.op == "+":
            step = StepExpression(Family.ADD, left, right)
        elif node.op == "-":
            step = StepExpression(Family.ADD, left, right, right_inverted=True)
        elif node.op == "*":
            step = StepExpression(Family.MUL, left, right)
        elif node.op == "/":
            step = StepExpression(Family.MUL, left, right, right_inverted=True)
        else:
            step = StepExpression(Family.POW, left, right)
        steps.append(step.canonical())
        return OperandRef.step(len(steps) - 1)

    walk(tree)
    if not steps:
        raise EquationError("expression has no operator")
    return StepList(steps)


def steps_supported(steps: StepList, config: OperatorConfig) -> str | None:
    """Why ``steps`` cannot be decoded under ``config``, or None if it can."""
    if len(steps) > config.max_steps:
        return f"{len(steps)} steps exceed max_steps={config.max_steps}"
    for step in steps:
        if step.op_family == Family.POW and not config.enable_pow:
            return "power step with enable_pow off"
        if step.left == step.right and not config.allow_self_pairs:
            return "self-pair step with allow_self_pairs off"
        for ref in step.operands():
            if ref.kind == OperandRef.CONSTANT and ref.index >= len(config.constants):
                return f"constant index {ref.index} out of range"
    return None


# building and loading ---------------------------------------------------------------

class ProblemError(ValueError):
    pass


def make_problem(id: str, text: str, answer: Number | None = None, equation: str | None = None,
                 config: OperatorConfig | None = None, lang: str = "en") -> Problem:
    from .encoder import tokenize_with_quant
    from .expression import answers_match, evaluate

    config = config or OperatorConfig()
    if not text or not text.strip():
        raise ProblemError("no quantities")
    quantities = extract_quantities(text)
    if not quantities:
        raise ProblemError("no quantities")
    span = segment_question(text)
    if span[0] >= span[1]:
        raise ProblemError("empty question")
    _, positions = tokenize_with_quant(text, [q.char_span for q in quantities])
    quantities = [replace(q, token_index=p) for q, p in zip(quantities, positions)]
    problem = Problem(id=str(id), text=text, quantities=quantities, question_span=span,
                      answer=answer, gold_equation=equation, lang=lang)
    if equation:
        try:
            steps = parse_equation(equation, quantities, config.constants)
        except EquationError as exc:
            raise ProblemError(f"equation: {exc}") from exc
        if answer is not None:
            outcome = evaluate(steps, quantities, config.constants)
            if not answers_match(outcome, answer, tol=1e-4):
                raise ProblemError(f"equation value {outcome.describe()} does not match answer {answer}")
        problem.gold_steps = steps
    return problem


@dataclass
class Reject:
    line: int
    reason: str


def _parse_answer(raw) -> Number:
    if isinstance(raw, bool) or raw is None:
        raise ProblemError("answer must be a number")
    if isinstance(raw, (int, float)):
        return raw
    if isinstance(raw, str):
        try:
            return Fraction(raw.strip())
        except ValueError as exc:
            raise ProblemError(f"answer {raw!r} is not a number") from exc
    raise ProblemError("answer must be a number")


def load_jsonl(path, config: OperatorConfig | None = None) -> tuple[list[Problem], list[Reject]]:
    """Read problems; malformed lines become rejects instead of errors."""
    config = config or OperatorConfig()
    problems, rejects = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ProblemError("line is not a JSON object")
                for key in ("id", "text", "answer"):
                    if key not in obj:
                        raise ProblemError(f"missing field {key!r}")
                problems.append(make_problem(
                    obj["id"], obj["text"] or "", _parse_answer(obj["answer"]),
                    obj.get("equation"), config, obj.get("lang", "en"),
                ))
            except json.JSONDecodeError as exc:
                rejects.append(Reject(lineno, f"invalid json: {exc.msg}"))
            except ProblemError as exc:
                rejects.append(Reject(lineno, str(exc)))
    return problems, rejects


def _json_number(x: Number):
    if isinstance(x, Fraction):
        if x.denominator == 1:
            return x.numerator
        return float(x)
    return x


def problem_record(problem: Problem) -> dict:
    rec = {"id": problem.id, "text": problem.text, "answer": _json_number(problem.answer)}
    if problem.gold_equation:
        rec["equation"] = problem.gold_equation
    if problem.lang != "en":
        rec["lang"] = problem.lang
    return rec


def write_jsonl(path, problems: Iterable[Problem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps(problem_record(p), ensure_ascii=False) + "\n")


def write_rejects(path, rejects: Iterable[Reject]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps({"line": r.line, "reason": r.reason}) + "\n")


# synthetic corpus ----------------------------------------------------------------------

# (name, subject pronoun) pairs for the narratives
_CHARACTERS = [("Mary", "she"), ("Jason", "he"), ("Sophia", "she"), ("Bobby", "he"), ("Liam", "he"),
               ("Ava", "she"), ("Noah", "he"), ("Emma", "she"), ("Omar", "he"), ("Mei", "she"),
               ("Carlos", "he"), ("Priya", "she"), ("Ken", "he"), ("Zara", "she"), ("Ivan", "he"),
               ("Lena", "she")]
_ITEMS = ["apples", "pencils", "cookies", "stickers", "marbles", "books", "cards", "shells",
          "erasers", "candies", "stamps", "balloons", "cups"]


@dataclass(frozen=True)
class Template:
    """One equation shape with alternative phrasings.

    Placeholders: {a} {b} {c} numbers, {name}, {item}, {pron} / {Pron}.
    """

    name: str
    steps: int
    texts: tuple[str, ...]
    equation: str


TEMPLATES: dict[str, Template] = {t.name: t for t in [
    Template("add", 1, (
        "{name} has {a} {item}. {name} buys {b} more {item}. How many {item} does {name} have now?",
        "{name} had {a} {item}. {Pron} got {b} more. How many {item} does {pron} have now?",
        "There are {a} {item} in a box. {name} puts in {b} more {item}. How many {item} are in the box?",
    ), "{a} + {b}"),
    Template("sub", 1, (
        "{name} had {a} {item}. {name} gave away {b} {item}. How many {item} does {name} have left?",
        "{name} had {a} {item}. {Pron} used {b} {item}. How many are left?",
        "{name} had {a} {item}. {Pron} lost {b} of them. How many {item} remain?",
    ), "{a} - {b}"),
    Template("sub_rev", 1, (
        "{name} ate {a} {item}. There were {b} {item} in the jar at the start. How many {item} are in the jar now?",
        "{name} needs {b} {item}. {Pron} already has {a}. How many more {item} does {pron} need?",
    ), "{b} - {a}"),
    Template("mul", 1, (
        "{name} buys {a} boxes. Each box holds {b} {item}. How many {item} did {name} buy in total?",
        "{name} has {a} bags. There are {b} {item} in each bag. How many {item} are there in all?",
    ), "{a} × {b}"),
    Template("div", 1, (
        "{name} shares {a} {item} equally among {b} friends. How many {item} does each friend get?",
        "{name} packs {a} {item} into boxes of {b}. How many boxes does {pron} fill?",
    ), "{a} ÷ {b}"),
    Template("add_sub", 2, (
        "{name} had {a} {item}. {name} found {b} more and then lost {c}. How many {item} does {name} have now?",
        "{name} had {a} {item}. {Pron} bought {b} more and used {c}. How many are left?",
    ), "{a} + {b} - {c}"),
    Template("mul_add", 2, (
        "{name} has {a} bags with {b} {item} in each bag. {name} also has {c} loose {item}. "
        "How many {item} does {name} have altogether?",
        "{name} bought {a} packs of {b} {item}. {Pron} already had {c}. How many {item} does {pron} have now?",
    ), "{a} × {b} + {c}"),
    Template("mul_sub", 2, (
        "{name} bought {a} packs of {item} with {b} in each pack. {name} gave {c} {item} to a friend. "
        "How many {item} are left?",
        "{name} has {a} boxes with {b} {item} in each. {Pron} used {c} of them. How many {item} remain?",
    ), "{a} × {b} - {c}"),
]}


def _draw_numbers(template: Template, rng: random.Random, lo: int, hi: int) -> dict[str, int]:
    lo = max(lo, 1)
    while True:
        a, b, c = (rng.randint(lo, hi) for _ in range(3))
        name = template.name
        if name == "sub" and a <= b:
            continue
        if name == "sub_rev" and b <= a:
            continue
        if name == "div":
            divisors = [d for d in range(max(lo, 2), hi + 1) if any(lo <= d * k <= hi for k in range(lo, hi + 1))]
            if not divisors:
                raise ValueError(f"range {lo}..{hi} too narrow for the div template")
            b = rng.choice(divisors)
            a = b * rng.choice([k for k in range(lo, hi + 1) if lo <= b * k <= hi])
        if name == "add_sub" and a + b <= c:
            continue
        if name == "mul_sub" and a * b <= c:
            continue
        return {"a": a, "b": b, "c": c}


def generate_synthetic(seed: int, count: int, templates: Sequence[str] | None = None,
                       number_range: tuple[int, int] = (1, 20),
                       config: OperatorConfig | None = None) -> list[Problem]:
    """Templated one- and two-step problems. Templates are assigned in equal
    shares (shuffled), so per-template counts differ by at most one."""
    from .expression import evaluate_infix

    names = list(templates) if templates else list(TEMPLATES)
    unknown = [n for n in names if n not in TEMPLATES]
    if unknown:
        raise KeyError(f"unknown templates: {unknown}")
    rng = random.Random(seed)
    assignment = [names[i % len(names)] for i in range(count)]
    rng.shuffle(assignment)
    lo, hi = number_range
    problems = []
    for k, tname in enumerate(assignment):
        tpl = TEMPLATES[tname]
        nums = _draw_numbers(tpl, rng, lo, hi)
        name, pron = rng.choice(_CHARACTERS)
        fill = dict(nums, name=name, pron=pron, Pron=pron.capitalize(), item=rng.choice(_ITEMS))
        text = rng.choice(tpl.texts).format(**fill)
        equation = tpl.equation.format(**nums)
        answer = evaluate_infix(equation)
        problems.append(make_problem(f"syn-{seed}-{k}", text, answer, equation, config))
    return problems


def template_of(problem: Problem) -> str | None:
    """Recover the template name for a synthetic problem (by text shape)."""
    for tpl in TEMPLATES.values():
        for text in tpl.texts:
            pattern = re.escape(text)
            pattern = re.sub(r"\\\{(a|b|c)\\\}", r"\\d+", pattern)
            pattern = re.sub(r"\\\{(name|item|pron|Pron)\\\}", r"\\w+", pattern)
            if re.fullmatch(pattern, problem.text):
                return tpl.name
    return None
