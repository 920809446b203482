"""Lexicon evaluation: ChrF++, P@1, R@k, intersection analysis, transliteration rate."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import LexiconEntry, normalize_phrase
from .errors import ConfigError, ParseError, UsageError


@dataclass(frozen=True)
class ChrfConfig:
    char_ngram_max: int = 4
    word_ngram_max: int = 1
    beta: float = 2.0

    def __post_init__(self):
        if self.char_ngram_max < 1 or self.word_ngram_max < 0:
            raise ConfigError("n-gram orders must be >= 1 (word order may be 0)")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")


def _ngrams(units: Sequence[str], n: int) -> Counter:
    return Counter(tuple(units[i:i + n]) for i in range(len(units) - n + 1))


def _order_stats(hyp: str, ref: str, cfg: ChrfConfig) -> list[tuple[int, int, int]]:
    """(hyp count, ref count, clipped matches) per order: chars first, then words."""
    hyp_chars = [c for c in hyp if not c.isspace()]
    ref_chars = [c for c in ref if not c.isspace()]
    hyp_words, ref_words = hyp.split(), ref.split()
    stats = []
    orders = [(hyp_chars, ref_chars, n) for n in range(1, cfg.char_ngram_max + 1)]
    orders += [(hyp_words, ref_words, n) for n in range(1, cfg.word_ngram_max + 1)]
    for h_units, r_units, n in orders:
        h, r = _ngrams(h_units, n), _ngrams(r_units, n)
        match = sum(min(c, r[g]) for g, c in h.items() if g in r)
        stats.append((sum(h.values()), sum(r.values()), match))
    return stats


def _f_beta(p: float, r: float, beta: float) -> float:
    if p + r == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (b2 * p + r)


def chrf_single(hyp: str, ref: str, cfg: ChrfConfig = ChrfConfig()) -> float:
    scores = []
    for n_hyp, n_ref, n_match in _order_stats(hyp, ref, cfg):
        if n_hyp == 0 and n_ref == 0:
            # neither side is long enough for this order; it carries no evidence
            continue
        p = n_match / n_hyp if n_hyp else 0.0
        r = n_match / n_ref if n_ref else 0.0
        scores.append(_f_beta(p, r, cfg.beta))
    if not scores:
        return 100.0 if hyp.strip() == ref.strip() else 0.0
    return 100.0 * sum(scores) / len(scores)


def chrf_pp(hypothesis: str, references: Sequence[str], cfg: ChrfConfig = ChrfConfig()) -> float:
    """Sentence-level ChrF++ in [0, 100]: mean per-order F-beta, best over references."""
    if isinstance(references, str):
        references = [references]
    if not references:
        raise UsageError("chrf_pp needs at least one reference")
    return max(chrf_single(hypothesis, ref, cfg) for ref in references)


def is_match(prediction: str, references: Iterable[str]) -> bool:
    p = normalize_phrase(prediction)
    return any(p == normalize_phrase(r) for r in references)


def _refs(entry) -> Sequence[str]:
    return entry.targets if isinstance(entry, LexiconEntry) else entry


def precision_at_1(top1_predictions: Sequence[str], entries: Sequence) -> float:
    """Share of entries whose single prediction equals one of its references."""
    if len(top1_predictions) != len(entries):
        raise UsageError(f"{len(top1_predictions)} predictions for {len(entries)} entries")
    if not entries:
        return float("nan")
    return sum(is_match(p, _refs(e)) for p, e in zip(top1_predictions, entries)) / len(entries)


def recall_at_k(topk_predictions: Sequence[Sequence[str]], entries: Sequence, k: int) -> float:
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if len(topk_predictions) != len(entries):
        raise UsageError(f"{len(topk_predictions)} prediction lists for {len(entries)} entries")
    if not entries:
        return float("nan")
    hits = sum(any(is_match(p, _refs(e)) for p in preds[:k]) for preds, e in zip(topk_predictions, entries))
    return hits / len(entries)


# ---------------------------------------------------------------- alignment


def fallback_align(src_phrase: str, tgt_phrase: str) -> list[tuple[int, int]]:
    """Monotone diagonal alignment: source word i -> round(i*(m-1)/(n-1)).

    A coarse stand-in for a learned word aligner. Rounding is half-up.
    """
    n, m = len(src_phrase.split()), len(tgt_phrase.split())
    if n == 0 or m == 0:
        return []
    if n == 1:
        return [(0, 0)]
    return [(i, int(math.floor(i * (m - 1) / (n - 1) + 0.5))) for i in range(n)]


def parse_pharaoh(text: str) -> list[tuple[int, int]]:
    pairs = []
    for tok in text.split():
        a, _, b = tok.partition("-")
        pairs.append((int(a), int(b)))
    return pairs


@dataclass
class AlignmentSet:
    """Word alignments for test entries.

    ``pred[i]`` aligns entry i's source with its prediction; ``ref[i][j]``
    aligns it with reference j. Missing items fall back to
    :func:`fallback_align`.
    """

    pred: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    ref: dict[tuple[int, int], list[tuple[int, int]]] = field(default_factory=dict)
    source: str = "fallback"

    @classmethod
    def read_tsv(cls, path) -> "AlignmentSet":
        """Rows: entry index, side (pred|ref), reference index, Pharaoh alignment (``0-0 1-1``)."""
        out = cls(source=f"file:{path}")
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) != 4 or cols[1] not in ("pred", "ref"):
                    raise ParseError("expected: index, pred|ref, ref_index, alignment", str(path), lineno)
                try:
                    idx, ref_idx = int(cols[0]), int(cols[2])
                    pairs = parse_pharaoh(cols[3])
                except ValueError:
                    raise ParseError("malformed alignment row", str(path), lineno) from None
                if cols[1] == "pred":
                    out.pred[idx] = pairs
                else:
                    out.ref[(idx, ref_idx)] = pairs
        return out


def _aligned_words(words: list[str], pairs: list[tuple[int, int]], src_index: int) -> str | None:
    tgt_idx = sorted({j for i, j in pairs if i == src_index and 0 <= j < len(words)})
    if not tgt_idx:
        return None
    return normalize_phrase(" ".join(words[j] for j in tgt_idx))


@dataclass
class IntersectionTable:
    intersect_correct: int = 0
    intersect_total: int = 0
    nonintersect_correct: int = 0
    nonintersect_total: int = 0
    nontranslit_correct: int = 0
    translit_correct: int = 0
    translit_uncovered: int = 0
    unaligned: int = 0
    aligner: str = "fallback"

    @staticmethod
    def _rate(num: int, den: int) -> float | None:
        return num / den if den else None

    @property
    def p1_intersect(self) -> float | None:
        return self._rate(self.intersect_correct, self.intersect_total)

    @property
    def p1_nonintersect(self) -> float | None:
        return self._rate(self.nonintersect_correct, self.nonintersect_total)

    @property
    def nontranslit_fraction(self) -> float | None:
        return self._rate(self.nontranslit_correct, self.nontranslit_correct + self.translit_correct)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(
            p1_intersect=self.p1_intersect,
            p1_nonintersect=self.p1_nonintersect,
            nontranslit_fraction=self.nontranslit_fraction,
        )
        return d


def intersection_analysis(
    train_entries: Sequence[LexiconEntry],
    test_entries: Sequence[LexiconEntry],
    predictions: Sequence[str],
    alignments: AlignmentSet | None = None,
    translit_table: Mapping[str, str] | None = None,
) -> IntersectionTable:
    """Word-level P@1 split by whether a test source word occurs in the training sources.

    Each test source word occurrence is scored by comparing the prediction
    word(s) aligned to it against the reference word(s) aligned to it; it
    counts as correct if any reference agrees. Words without an aligned
    prediction and reference are tallied as ``unaligned``. Among correct
    non-intersecting words, those whose prediction equals the table's
    transliteration of the source word count as transliterations.
    """
    if len(predictions) != len(test_entries):
        raise UsageError(f"{len(predictions)} predictions for {len(test_entries)} test entries")
    alignments = alignments or AlignmentSet()
    table_map = {normalize_phrase(k): normalize_phrase(v) for k, v in (translit_table or {}).items()}
    train_words = {w for e in train_entries for w in normalize_phrase(e.source).split()}
    out = IntersectionTable(aligner=alignments.source)

    for idx, (entry, pred) in enumerate(zip(test_entries, predictions)):
        src = normalize_phrase(entry.source)
        src_words = src.split()
        pred_words = normalize_phrase(pred).split()
        pred_pairs = alignments.pred.get(idx)
        if pred_pairs is None:
            pred_pairs = fallback_align(src, pred) if pred_words else []
        ref_sides = []
        for j, ref in enumerate(entry.targets):
            ref_norm = normalize_phrase(ref)
            pairs = alignments.ref.get((idx, j))
            if pairs is None:
                pairs = fallback_align(src, ref_norm)
            ref_sides.append((ref_norm.split(), pairs))

        for i, word in enumerate(src_words):
            got = _aligned_words(pred_words, pred_pairs, i)
            wanted = [w for w in (_aligned_words(rw, rp, i) for rw, rp in ref_sides) if w is not None]
            if got is None or not wanted:
                out.unaligned += 1
                continue
            correct = got in wanted
            if word in train_words:
                out.intersect_total += 1
                out.intersect_correct += correct
                continue
            out.nonintersect_total += 1
            out.nonintersect_correct += correct
            if correct:
                translit = table_map.get(word)
                if translit is None:
                    out.translit_uncovered += 1
                elif translit == got:
                    out.translit_correct += 1
                else:
                    out.nontranslit_correct += 1
    return out


# ---------------------------------------------------------------- transliteration


def read_translit_table(path) -> dict[str, str]:
    """Two-column TSV: source string, its transliteration in the target script."""
    table = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0].strip() or not cols[1].strip():
                raise ParseError("transliteration rows need exactly 2 non-empty columns", str(path), lineno)
            table[normalize_phrase(cols[0])] = normalize_phrase(cols[1])
    return table


@dataclass
class TranslitResult:
    transliterated: int
    covered: int
    uncovered: int

    @property
    def rate(self) -> float | None:
        return self.transliterated / self.covered if self.covered else None


def transliteration_rate(pairs: Iterable, translit_table: Mapping[str, str]) -> TranslitResult:
    """Share of (source, target) pairs whose target is the table's transliteration of the source.

    ``pairs`` holds ``(source, target)`` tuples or lexicon entries (any
    reference counts). Sources absent from the table are tallied as
    uncovered and excluded from the denominator.
    """
    table = {normalize_phrase(k): normalize_phrase(v) for k, v in translit_table.items()}
    hit = covered = uncovered = 0
    for pair in pairs:
        if isinstance(pair, LexiconEntry):
            source, targets = pair.source, pair.targets
        else:
            source, target = pair
            targets = (target,)
        translit = table.get(normalize_phrase(source))
        if translit is None:
            uncovered += 1
            continue
        covered += 1
        hit += any(normalize_phrase(t) == translit for t in targets)
    return TranslitResult(hit, covered, uncovered)


# ---------------------------------------------------------------- reports


@dataclass
class GroupScores:
    domain: str
    lang_pair: str
    n: int
    chrf_mean: float
    p_at_1: float
    r_at_1: float
    r_at_3: float


@dataclass
class EvalReport:
    groups: list[GroupScores]
    overall: GroupScores
    per_example: list[dict] = field(default_factory=list)
    intersection: IntersectionTable | None = None
    translit: TranslitResult | None = None

    def rows(self) -> list[GroupScores]:
        return [*self.groups, self.overall]

    def to_tsv(self) -> str:
        head = ["domain", "lang_pair", "n", "chrf", "p_at_1", "r_at_1", "r_at_3"]
        lines = ["\t".join(head)]
        for g in self.rows():
            lines.append(
                f"{g.domain}\t{g.lang_pair}\t{g.n}\t{g.chrf_mean:.4f}\t{g.p_at_1:.4f}\t{g.r_at_1:.4f}\t{g.r_at_3:.4f}"
            )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = ("domain", "pair", "n", "ChrF++", "P@1", "R@1", "R@3")
        rows = [head] + [
            (g.domain, g.lang_pair, str(g.n), f"{g.chrf_mean:.2f}", f"{g.p_at_1:.3f}", f"{g.r_at_1:.3f}", f"{g.r_at_3:.3f}")
            for g in self.rows()
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows) + "\n"

    def to_json(self) -> str:
        obj = {
            "groups": [asdict(g) for g in self.groups],
            "overall": asdict(self.overall),
        }
        if self.intersection is not None:
            obj["intersection"] = self.intersection.as_dict()
        if self.translit is not None:
            obj["translit"] = {**asdict(self.translit), "rate": self.translit.rate}
        return json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def _scores(label_domain: str, label_pair: str, items: list[tuple[LexiconEntry, list[str]]], cfg: ChrfConfig) -> GroupScores:
    entries = [e for e, _ in items]
    preds = [p for _, p in items]
    top1 = [p[0] if p else "" for p in preds]
    chrf = [chrf_pp(t, e.targets, cfg) for t, e in zip(top1, entries)]
    return GroupScores(
        label_domain,
        label_pair,
        len(items),
        sum(chrf) / len(chrf) if chrf else float("nan"),
        precision_at_1(top1, entries),
        recall_at_k(preds, entries, 1),
        recall_at_k(preds, entries, 3),
    )


def evaluate(
    entries: Sequence[LexiconEntry],
    ranked_predictions: Sequence[Sequence[str]],
    cfg: ChrfConfig = ChrfConfig(),
) -> EvalReport:
    """Score ranked predictions against entries, per (domain, language pair) and overall."""
    if len(entries) != len(ranked_predictions):
        raise UsageError(f"{len(ranked_predictions)} prediction lists for {len(entries)} entries")
    groups: dict[tuple[str, str], list] = defaultdict(list)
    per_example = []
    for i, (e, preds) in enumerate(zip(entries, ranked_predictions)):
        preds = list(preds)
        groups[(e.domain, f"{e.src_lang}-{e.tgt_lang}")].append((e, preds))
        top1 = preds[0] if preds else ""
        per_example.append(
            {
                "id": i,
                "domain": e.domain,
                "lang_pair": f"{e.src_lang}-{e.tgt_lang}",
                "source": e.source,
                "prediction": top1,
                "chrf": chrf_pp(top1, e.targets, cfg),
                "exact": int(is_match(top1, e.targets)),
            }
        )
    rows = [_scores(d, lp, items, cfg) for (d, lp), items in sorted(groups.items())]
    overall = _scores("ALL", "ALL", list(zip(entries, [list(p) for p in ranked_predictions])), cfg)
    return EvalReport(rows, overall, per_example)
