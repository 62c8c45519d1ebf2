"""Desk-scale text encoder: quantity embeddings plus a pooled question embedding.

Embedding table -> bidirectional GRU -> linear projection of the two
directions to ``d``. Anything producing :class:`EncoderOutput` can stand in
for it (e.g. a pretrained transformer); the decoder only sees that type.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .numerics import GruCell, GruCellSpec, ParamSet, Tensor, bigru_scan, linear, take, uniform_init

if TYPE_CHECKING:
    from .corpus import Problem

PAD, UNK, QUANT = "<pad>", "<unk>", "<quant>"
RESERVED = (PAD, UNK, QUANT)

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def _split(text: str, offset: int, lowercase: bool) -> list[tuple[str, int, int]]:
    out = []
    for m in _WORD_RE.finditer(text):
        tok = m.group(0).lower() if lowercase else m.group(0)
        out.append((tok, offset + m.start(), offset + m.end()))
    return out


def tokenize_spans(text: str, quantity_spans: Sequence[tuple[int, int]], lowercase: bool = True,
                   vocab: "Vocab | None" = None) -> tuple[list[tuple[str, int, int]], list[int]]:
    """Tokens with character offsets, and the token position of each quantity.

    Every quantity span becomes a single ``<quant>`` token. With a vocabulary,
    words it does not contain are split into characters.
    """
    tokens: list[tuple[str, int, int]] = []
    positions: list[int] = []

    def words(lo: int, hi: int) -> None:
        for tok, s, e in _split(text[lo:hi], lo, lowercase):
            if vocab is not None and tok not in vocab and len(tok) > 1:
                tokens.extend((ch, s + i, s + i + 1) for i, ch in enumerate(tok))
            else:
                tokens.append((tok, s, e))

    cursor = 0
    for start, end in quantity_spans:
        words(cursor, start)
        positions.append(len(tokens))
        tokens.append((QUANT, start, end))
        cursor = end
    words(cursor, len(text))
    return tokens, positions


def tokenize_with_quant(text: str, quantity_spans: Sequence[tuple[int, int]], lowercase: bool = True,
                        vocab: "Vocab | None" = None) -> tuple[list[str], list[int]]:
    tokens, positions = tokenize_spans(text, quantity_spans, lowercase, vocab)
    return [t[0] for t in tokens], positions


class Vocab:
    """Token <-> id table; ids 0, 1, 2 are <pad>, <unk>, <quant>."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_list(lines)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        return cls(itos[3:])


def build_vocab(problems: Iterable["Problem"], lowercase: bool = True) -> Vocab:
    """Words seen in ``problems`` plus their characters (for the char fallback)."""
    words: list[str] = []
    chars: list[str] = []
    for p in problems:
        toks, _ = tokenize_with_quant(p.text, [q.char_span for q in p.quantities], lowercase)
        for t in toks:
            if t == QUANT:
                continue
            words.append(t)
            chars.extend(t)
    return Vocab(dict.fromkeys(words + chars))


@dataclass(frozen=True)
class DeskEncoderSpec:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    lowercase: bool = True

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) < 1:
            raise ValueError("encoder dimensions must be >= 1")


@dataclass
class EncoderInput:
    token_ids: np.ndarray
    quantity_positions: list[int]
    question_range: tuple[int, int]


@dataclass
class EncoderOutput:
    quantity_embeddings: Tensor  # (n_quantities, d)
    question_embedding: Tensor  # (d,)
    contextual: Tensor | None = None

    def quantity(self, i: int) -> Tensor:
        return take(self.quantity_embeddings, i)

    def __len__(self) -> int:
        return self.quantity_embeddings.shape[0]


def prepare_input(problem: "Problem", vocab: Vocab, lowercase: bool = True) -> EncoderInput:
    tokens, positions = tokenize_spans(problem.text, [q.char_span for q in problem.quantities],
                                       lowercase, vocab)
    qs, qe = problem.question_span
    inside = [i for i, (_, s, e) in enumerate(tokens) if s >= qs and e <= qe]
    if not inside:
        raise ValueError(f"problem {problem.id}: question span covers no tokens")
    ids = np.array([vocab.id(t) for t, _, _ in tokens], dtype=np.int64)
    return EncoderInput(ids, positions, (inside[0], inside[-1] + 1))


class DeskEncoder:
    def __init__(self, spec: DeskEncoderSpec, store: ParamSet, rng: np.random.Generator,
                 name: str = "enc"):
        self.spec = spec
        e, d = spec.embed_dim, spec.hidden_dim
        self.embedding = store.add(f"{name}.embedding", rng.normal(0.0, 1.0 / np.sqrt(e), (spec.vocab_size, e)))
        self.forward_gru = GruCell(GruCellSpec(e, d), store, f"{name}.gru_fwd", rng)
        self.backward_gru = GruCell(GruCellSpec(e, d), store, f"{name}.gru_bwd", rng)
        self.proj_w = store.add(f"{name}.proj.weight", uniform_init(rng, (d, 2 * d), 2 * d))
        self.proj_b = store.add(f"{name}.proj.bias", np.zeros(d))

    def contextual(self, token_ids: np.ndarray) -> Tensor:
        xs = take(self.embedding, token_ids)
        states = bigru_scan(xs, self.forward_gru.params, self.backward_gru.params)
        return linear(states, self.proj_w, self.proj_b)

    def encode(self, inp: EncoderInput) -> EncoderOutput:
        ctx = self.contextual(inp.token_ids)
        start, end = inp.question_range
        if end <= start:
            raise ValueError("empty question token range")
        hq = take(ctx, np.asarray(inp.quantity_positions, dtype=np.int64))
        hqn = take(ctx, slice(start, end)).mean(axis=0)
        return EncoderOutput(hq, hqn, ctx)


def mean_pool(vectors: Tensor) -> Tensor:
    return vectors.mean(axis=0)
