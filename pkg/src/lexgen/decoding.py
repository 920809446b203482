"""Beam search and greedy decoding over any next-token scorer.

A scorer exposes ``start(src_ids) -> state``,
``next_log_probs(state, prefixes) -> [n, V] array``, ``eos_id`` and
``banned_ids`` (tokens that are never generated). :class:`Transformer`
implements it, and so can small table-driven models in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError


class Scorer(Protocol):
    eos_id: int
    banned_ids: tuple[int, ...]

    def start(self, src_ids: Sequence[int]): ...

    def next_log_probs(self, state, prefixes: Sequence[Sequence[int]]) -> np.ndarray: ...


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    score: float
    finished: bool

    def body(self, eos_id: int) -> tuple[int, ...]:
        """Tokens without the terminal ``<eos>``."""
        if self.tokens and self.tokens[-1] == eos_id:
            return self.tokens[:-1]
        return self.tokens


def normalized_score(logprob: float, length: int, alpha: float = 1.0) -> float:
    return logprob / (max(length, 1) ** alpha)


def _rank_key(tokens: tuple[int, ...], score: float):
    return (-score, tokens)


def beam_search(
    model: Scorer,
    src_ids: Sequence[int],
    beam_size: int = 5,
    max_len: int = 32,
    length_penalty_alpha: float = 1.0,
) -> list[Hypothesis]:
    """Return up to ``beam_size`` hypotheses sorted by normalised score, best first.

    Each step expands every live prefix by every allowed token and keeps the
    ``beam_size`` best candidates by cumulative log-probability. Candidates
    ending in ``<eos>`` or reaching ``max_len`` tokens are finished. Ties break
    on the token sequence, lexicographically.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    state = model.start(src_ids)
    eos = model.eos_id
    banned = set(model.banned_ids)
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []

    for _ in range(max_len):
        logp = np.asarray(model.next_log_probs(state, [p for p, _ in alive]), dtype=np.float64)
        allowed = [t for t in range(logp.shape[1]) if t not in banned]
        candidates = [
            (prefix + (tok,), base + float(logp[row, tok]))
            for row, (prefix, base) in enumerate(alive)
            for tok in allowed
            if np.isfinite(logp[row, tok])
        ]
        candidates.sort(key=lambda c: _rank_key(c[0], c[1]))
        alive = []
        for tokens, lp in candidates[:beam_size]:
            if tokens[-1] == eos or len(tokens) == max_len:
                finished.append(Hypothesis(tokens, lp, normalized_score(lp, len(tokens), length_penalty_alpha), True))
            else:
                alive.append((tokens, lp))
        if not alive:
            break

    finished.sort(key=lambda h: _rank_key(h.tokens, h.score))
    return finished[:beam_size]


def greedy(model: Scorer, src_ids: Sequence[int], max_len: int = 32, length_penalty_alpha: float = 1.0) -> Hypothesis:
    """Arg-max decoding; ties go to the lowest token id."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    state = model.start(src_ids)
    banned = list(model.banned_ids)
    tokens: list[int] = []
    total = 0.0
    while True:
        logp = np.array(model.next_log_probs(state, [tuple(tokens)])[0], dtype=np.float64)
        logp[banned] = -np.inf
        tok = int(np.argmax(logp))
        tokens.append(tok)
        total += float(logp[tok])
        if tok == model.eos_id or len(tokens) == max_len:
            break
    return Hypothesis(tuple(tokens), total, normalized_score(total, len(tokens), length_penalty_alpha), True)

