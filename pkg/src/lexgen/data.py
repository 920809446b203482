"""Lexicon files, tokenisation, experimental splits and the synthetic fixture."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, UsageError, VocabError

log = logging.getLogger(__name__)

ALT_SEP = "||"
TAG_RE = re.compile(r"^[a-z0-9_]+$")

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def normalize_phrase(text: str) -> str:
    """NFC, collapse internal whitespace, trim. Used for every exact-match comparison."""
    return " ".join(nfc(text).split())


def lang_tag(lang: str) -> str:
    return f"<2{lang}>"


@dataclass(frozen=True)
class LexiconEntry:
    domain: str
    src_lang: str
    tgt_lang: str
    source: str
    targets: tuple[str, ...]

    def __post_init__(self):
        for name in ("domain", "src_lang", "tgt_lang"):
            if not TAG_RE.match(getattr(self, name)):
                raise DataError(f"{name} tag {getattr(self, name)!r} must match [a-z0-9_]+")
        if not self.source.strip():
            raise DataError("empty source phrase")
        if not self.targets or any(not t.strip() for t in self.targets):
            raise DataError(f"empty target phrase for source {self.source!r}")

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.domain, self.src_lang, self.tgt_lang, normalize_phrase(self.source))

    def to_line(self) -> str:
        return "\t".join(
            [self.domain, self.src_lang, self.tgt_lang, self.source, ALT_SEP.join(self.targets)]
        )


def parse_lexicon_lines(lines: Iterable[str], path: str | None = None) -> list[LexiconEntry]:
    entries = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ParseError(f"expected 5 tab-separated columns, found {len(cols)}", path, lineno)
        domain, src_lang, tgt_lang, source, targets = cols
        alts = tuple(t.strip() for t in targets.split(ALT_SEP))
        try:
            entries.append(LexiconEntry(domain, src_lang, tgt_lang, source.strip(), alts))
        except DataError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return entries


def parse_lexicon(path) -> list[LexiconEntry]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_lexicon_lines(fh, str(path))


def write_lexicon(entries: Iterable[LexiconEntry], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_line() + "\n")


# ---------------------------------------------------------------- vocabulary


class Vocab:
    """Token <-> id map with fixed specials and one tag per target language.

    ``level="char"`` emits one token per character and :data:`SEP` for spaces;
    ``level="word"`` emits whitespace-separated words.
    """

    def __init__(self, tokens: Sequence[str], level: str = "char"):
        if tuple(tokens[:4]) != SPECIALS:
            raise VocabError(f"vocabulary must start with {SPECIALS}")
        if level not in ("char", "word"):
            raise ConfigError(f"unknown tokenizer level {level!r}")
        self.tokens = list(tokens)
        self.level = level
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.unk_count = 0

    @classmethod
    def build(cls, entries: Iterable[LexiconEntry], level: str = "char", extra_langs: Iterable[str] = ()) -> "Vocab":
        langs: set[str] = set(extra_langs)
        symbols: set[str] = set()
        for e in entries:
            langs.add(e.tgt_lang)
            for phrase in (e.source, *e.targets):
                symbols.update(cls._units(normalize_phrase(phrase), level))
        tokens = list(SPECIALS) + [SEP] + [lang_tag(l) for l in sorted(langs)] + sorted(symbols)
        return cls(tokens, level)

    @staticmethod
    def _units(phrase: str, level: str) -> list[str]:
        if level == "word":
            return phrase.split()
        return [c for c in phrase if c != " "]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"token {token!r} is not in the vocabulary") from None

    def lang_id(self, lang: str) -> int:
        tag = lang if lang.startswith("<2") else lang_tag(lang)
        if tag not in self.index:
            raise VocabError(f"language tag {tag} is not registered")
        return self.index[tag]

    @property
    def lang_tags(self) -> list[str]:
        return [t for t in self.tokens if t.startswith("<2") and t.endswith(">")]

    def to_json(self) -> dict:
        return {"level": self.level, "tokens": self.tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(obj["tokens"], obj.get("level", "char"))


def tokenize(phrase: str, vocab: Vocab, lang: str | None = None) -> list[int]:
    """Phrase -> ids. Unknown units map to ``<unk>`` and bump ``vocab.unk_count``."""
    text = normalize_phrase(phrase)
    ids: list[int] = [] if lang is None else [vocab.lang_id(lang)]
    if vocab.level == "word":
        units = text.split()
    else:
        units = [SEP if c == " " else c for c in text]
    for u in units:
        i = vocab.index.get(u)
        if i is None:
            vocab.unk_count += 1
            i = UNK_ID
        ids.append(i)
    return ids


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    parts = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID):
            continue
        parts.append(vocab.tokens[i])
    if vocab.level == "word":
        return " ".join(parts)
    return "".join(" " if p == SEP else p for p in parts)


# ---------------------------------------------------------------- splits

REGIMES = ("idst", "ddst", "iddt")


@dataclass
class DatasetSplits:
    regime: str
    train: list[LexiconEntry]
    valid: list[LexiconEntry]
    test: list[LexiconEntry]
    provenance: dict = field(default_factory=dict)

    def check_disjoint(self) -> None:
        parts = [{e.key for e in p} for p in (self.train, self.valid, self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DataError("split parts share entries")

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        hashes = {}
        for name in ("train", "valid", "test"):
            path = out / f"{name}.tsv"
            write_lexicon(getattr(self, name), path)
            hashes[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        meta = dict(self.provenance)
        meta.update(
            regime=self.regime,
            counts={n: len(getattr(self, n)) for n in ("train", "valid", "test")},
            sha256=hashes,
        )
        (out / "provenance.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return meta

    @classmethod
    def read(cls, split_dir) -> "DatasetSplits":
        d = Path(split_dir)
        meta_path = d / "provenance.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        parts = {}
        for name in ("train", "valid", "test"):
            p = d / f"{name}.tsv"
            parts[name] = parse_lexicon(p) if p.exists() else []
        return cls(meta.get("regime", "unknown"), parts["train"], parts["valid"], parts["test"], meta)


def _dedupe(entries: Iterable[LexiconEntry]) -> list[LexiconEntry]:
    """Merge entries sharing a key so a key can never straddle two split parts."""
    merged: dict[tuple, LexiconEntry] = {}
    for e in entries:
        prev = merged.get(e.key)
        if prev is None:
            merged[e.key] = e
        else:
            alts = prev.targets + tuple(t for t in e.targets if t not in prev.targets)
            merged[e.key] = LexiconEntry(prev.domain, prev.src_lang, prev.tgt_lang, prev.source, alts)
    return list(merged.values())


def group_seed(seed: int, *labels: str) -> int:
    """Stable per-group seed: first 8 bytes of sha256 over the seed and labels."""
    h = hashlib.sha256("\x1f".join([str(seed), *labels]).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def shuffled_group(entries: list[LexiconEntry], seed: int, *labels: str) -> list[LexiconEntry]:
    """Sort by key, then permute with a generator seeded from (seed, labels)."""
    ordered = sorted(entries, key=lambda e: e.key)
    perm = np.random.default_rng(group_seed(seed, *labels)).permutation(len(ordered))
    return [ordered[i] for i in perm]


def _grouped(entries: Iterable[LexiconEntry]) -> dict[tuple[str, str], list[LexiconEntry]]:
    groups: dict[tuple[str, str], list[LexiconEntry]] = defaultdict(list)
    for e in entries:
        groups[(e.domain, e.tgt_lang)].append(e)
    return dict(sorted(groups.items()))


def _ratio_split(items: list, fractions: Sequence[float]) -> list[list]:
    """Take floor(f*n) items for each held-out fraction; the remainder goes first (train)."""
    n = len(items)
    held = [int(np.floor(f * n + 1e-9)) for f in fractions]
    n_train = n - sum(held)
    out = [items[:n_train]]
    start = n_train
    for k in held:
        out.append(items[start:start + k])
        start += k
    return out


def split_idst(entries: Sequence[LexiconEntry], seed: int) -> DatasetSplits:
    """80/10/10 within every (domain, target language) group."""
    if not entries:
        raise ConfigError("cannot split an empty lexicon")
    train, valid, test = [], [], []
    for (domain, lang), group in _grouped(_dedupe(entries)).items():
        if len(group) < 3:
            log.warning("group (%s, %s) has %d entries; all go to train", domain, lang, len(group))
            train.extend(shuffled_group(group, seed, domain, lang))
            continue
        tr, va, te = _ratio_split(shuffled_group(group, seed, domain, lang), (0.1, 0.1))
        train += tr
        valid += va
        test += te
    return DatasetSplits("idst", train, valid, test, {"seed": seed, "ratios": [0.8, 0.1, 0.1]})


def _train_valid_90_10(entries: Sequence[LexiconEntry], seed: int) -> tuple[list, list]:
    train, valid = [], []
    for (domain, lang), group in _grouped(entries).items():
        tr, va = _ratio_split(shuffled_group(group, seed, domain, lang), (0.1,))
        train += tr
        valid += va
    return train, valid


def split_ddst(
    entries: Sequence[LexiconEntry], train_domains: Sequence[str], test_domains: Sequence[str], seed: int
) -> DatasetSplits:
    """Zero-shot domains: train/valid from ``train_domains``, test is every ``test_domains`` entry."""
    overlap = set(train_domains) & set(test_domains)
    if overlap:
        raise ConfigError(f"train and test domains overlap: {sorted(overlap)}")
    if not entries:
        raise ConfigError("cannot split an empty lexicon")
    pool = _dedupe(entries)
    train_pool = [e for e in pool if e.domain in set(train_domains)]
    test = sorted((e for e in pool if e.domain in set(test_domains)), key=lambda e: e.key)
    if not test:
        log.warning("no entries found for test domains %s; test split is empty", sorted(test_domains))
    train, valid = _train_valid_90_10(train_pool, seed)
    return DatasetSplits(
        "ddst",
        train,
        valid,
        test,
        {
            "seed": seed,
            "train_domains": sorted(train_domains),
            "test_domains": sorted(test_domains),
            "ratios": [0.9, 0.1],
        },
    )


def split_iddt(
    entries: Sequence[LexiconEntry], train_langs: Sequence[str], test_langs: Sequence[str], seed: int
) -> DatasetSplits:
    """Zero-shot target languages over a shared domain set.

    The test part is the IDST test slice of the test-language entries. Only
    domains present on both sides are kept so the domain sets are identical.
    """
    overlap = set(train_langs) & set(test_langs)
    if overlap:
        raise ConfigError(f"train and test languages overlap: {sorted(overlap)}")
    if not entries:
        raise ConfigError("cannot split an empty lexicon")
    pool = _dedupe(entries)
    train_side = [e for e in pool if e.tgt_lang in set(train_langs)]
    test_side = [e for e in pool if e.tgt_lang in set(test_langs)]
    shared = {e.domain for e in train_side} & {e.domain for e in test_side}
    train_side = [e for e in train_side if e.domain in shared]
    test_side = [e for e in test_side if e.domain in shared]
    train, valid = _train_valid_90_10(train_side, seed)
    test = split_idst(test_side, seed).test if test_side else []
    if not test:
        log.warning("IDDT test split is empty")
    return DatasetSplits(
        "iddt",
        train,
        valid,
        test,
        {
            "seed": seed,
            "train_langs": sorted(train_langs),
            "test_langs": sorted(test_langs),
            "domains": sorted(shared),
            "ratios": [0.9, 0.1],
        },
    )


# ---------------------------------------------------------------- synthetic fixture

DOMAIN_NAMES = ("adm", "bio", "chem", "bcast", "civil", "cs", "geo", "psy")
LANG_NAMES = ("hi", "ta", "gu", "kn", "mr", "or", "pa", "ml")
DEFAULT_AFFIXES = (("", "an"), ("", "ku"), ("", "om"), ("", "ir"), ("", "el"), ("", "ut"), ("", "ap"), ("", "is"))
DOMAIN_MARKERS = "XYZWVQJK"


@dataclass
class SynthConfig:
    """Knobs for :func:`synth_fixture`.

    Each source is ``marker + stem`` where the marker character identifies the
    domain. Each target is ``prefix + subst(stem) + suffix``: the affixes come
    from the target language, the character substitution from the domain.
    Every stem occurs in every domain and language.
    """

    n_domains: int = 2
    n_langs: int = 2
    n_pairs_per_cell: int = 16
    stem_alphabet: str = "abcdefghilmnoprstu"
    stem_len: tuple[int, int] = (3, 5)
    affix_rules: dict[str, tuple[str, str]] | None = None
    n_substituted: int = 4
    src_lang: str = "en"


def _domain_substitutions(cfg: SynthConfig, rng: np.random.Generator) -> list[dict[str, str]]:
    letters = list(cfg.stem_alphabet)
    k = min(cfg.n_substituted, len(letters))
    chosen = [letters[i] for i in rng.choice(len(letters), size=k, replace=False)]
    rules = []
    for d in range(cfg.n_domains):
        # a cyclic shift of the chosen letters, distinct per domain (d=0 shifts by 1)
        shift = (d % (k - 1) + 1) if k > 1 else 0
        rules.append({c: chosen[(i + shift) % k] for i, c in enumerate(chosen)})
    return rules


def synth_fixture(seed: int, cfg: SynthConfig | None = None) -> list[LexiconEntry]:
    cfg = cfg or SynthConfig()
    if cfg.n_domains < 1 or cfg.n_langs < 1 or cfg.n_pairs_per_cell < 1:
        raise ConfigError("synth fixture needs at least one domain, language and pair")
    if cfg.n_domains > len(DOMAIN_NAMES) or cfg.n_langs > len(LANG_NAMES):
        raise ConfigError("too many domains or languages for the built-in name tables")
    lo, hi = cfg.stem_len
    alphabet = sorted(set(cfg.stem_alphabet))
    capacity = sum(len(alphabet) ** n for n in range(lo, hi + 1))
    if len(alphabet) < 2 or capacity < cfg.n_pairs_per_cell:
        raise ConfigError(
            f"alphabet of {len(alphabet)} symbols cannot yield {cfg.n_pairs_per_cell} distinct stems"
        )
    if set(alphabet) & set(DOMAIN_MARKERS):
        raise ConfigError("stem alphabet overlaps the domain marker characters")

    rng = np.random.default_rng(seed)
    stems: list[str] = []
    seen: set[str] = set()
    while len(stems) < cfg.n_pairs_per_cell:
        n = int(rng.integers(lo, hi + 1))
        stem = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))
        if stem not in seen:
            seen.add(stem)
            stems.append(stem)
    subs = _domain_substitutions(cfg, rng)
    langs = LANG_NAMES[: cfg.n_langs]
    affixes = cfg.affix_rules or {l: DEFAULT_AFFIXES[i] for i, l in enumerate(langs)}

    entries = []
    for d in range(cfg.n_domains):
        domain = DOMAIN_NAMES[d]
        marker = DOMAIN_MARKERS[d]
        for lang in langs:
            prefix, suffix = affixes[lang]
            for stem in stems:
                body = "".join(subs[d].get(c, c) for c in stem)
                entries.append(LexiconEntry(domain, cfg.src_lang, lang, marker + stem, (prefix + body + suffix,)))
    return entries


def marker_ambiguity_rate(entries: Sequence[LexiconEntry]) -> float:
    """Share of (language, marker-stripped source) keys that map to more than one target.

    Brute force: strip the domain marker from every source and count keys
    whose target sets disagree.
    """
    table: dict[tuple[str, str], set[str]] = defaultdict(set)
    for e in entries:
        stripped = "".join(c for c in e.source if c not in DOMAIN_MARKERS)
        table[(e.tgt_lang, stripped)].add(e.targets[0])
    if not table:
        return 0.0
    return sum(len(v) > 1 for v in table.values()) / len(table)


def count_by(entries: Iterable[LexiconEntry], attr: str) -> Counter:
    return Counter(getattr(e, attr) for e in entries)


def require_nonempty(entries: Sequence[LexiconEntry], what: str) -> None:
    if not entries:
        raise UsageError(f"{what} is empty")
