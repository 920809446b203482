import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lexgen.data import (
    DatasetSplits,
    LexiconEntry,
    SynthConfig,
    Vocab,
    detokenize,
    marker_ambiguity_rate,
    normalize_phrase,
    parse_lexicon,
    parse_lexicon_lines,
    split_ddst,
    split_iddt,
    split_idst,
    synth_fixture,
    tokenize,
    write_lexicon,
)
from lexgen.errors import ConfigError, DataError, ParseError, VocabError

ROWS = [
    "chem\ten\thi\tnon ideal gas\tअनादर्श गैस",
    "bio\ten\thi\tphagocytosis\tभक्षकाणु क्रिया||कोशिका भक्षण",
]


def test_parse_rows_with_alternatives():
    entries = parse_lexicon_lines(ROWS)
    assert entries[0] == LexiconEntry("chem", "en", "hi", "non ideal gas", ("अनादर्श गैस",))
    assert entries[1].targets == ("भक्षकाणु क्रिया", "कोशिका भक्षण")


def test_parse_skips_comments_and_blank_lines():
    assert len(parse_lexicon_lines(["# header", "", *ROWS, "   "])) == 2


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError) as exc:
        parse_lexicon_lines([ROWS[0], "bio\ten\thi\tonly four"], path="lex.tsv")
    assert exc.value.line == 2 and "lex.tsv" in str(exc.value)
    with pytest.raises(ParseError):
        parse_lexicon_lines(["Bio\ten\thi\tx\ty"])
    with pytest.raises(ParseError):
        parse_lexicon_lines(["bio\ten\thi\tx\t"])


def test_write_then_parse_round_trip(tmp_path):
    entries = parse_lexicon_lines(ROWS)
    path = tmp_path / "lex.tsv"
    write_lexicon(entries, path)
    assert parse_lexicon(path) == entries


def test_normalize_phrase_nfc_and_whitespace():
    decomposed = "e\u0301"
    assert normalize_phrase(f"  caf{decomposed}   au   lait ") == "caf\u00e9 au lait"


def test_vocab_layout_and_round_trip():
    entries = parse_lexicon_lines(ROWS)
    vocab = Vocab.build(entries)
    assert vocab.tokens[:5] == ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"]
    assert vocab.tokens[5] == "<2hi>"
    for e in entries:
        for t in e.targets:
            assert detokenize(tokenize(t, vocab), vocab) == t
    assert Vocab.from_json(json.loads(json.dumps(vocab.to_json()))).tokens == vocab.tokens
    with pytest.raises(VocabError):
        vocab.lang_id("ta")


def test_unknown_symbols_map_to_unk():
    vocab = Vocab.build(parse_lexicon_lines(ROWS))
    ids = tokenize("z", vocab)
    assert ids == [1] and vocab.unk_count >= 1


def test_word_level_vocab():
    vocab = Vocab.build(parse_lexicon_lines(ROWS), level="word")
    assert "ideal" in vocab and detokenize(tokenize("non ideal gas", vocab), vocab) == "non ideal gas"


def _random_lexicon(rng, n_domains=None, n_langs=None):
    doms = [f"d{i}" for i in range(n_domains or int(rng.integers(1, 5)))]
    langs = [f"l{i}" for i in range(n_langs or int(rng.integers(1, 4)))]
    entries = []
    for d in doms:
        for l in langs:
            for k in range(int(rng.integers(0, 40))):
                entries.append(LexiconEntry(d, "en", l, f"w{k}", (f"t{k}",)))
    return entries


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_idst_ratios_and_disjointness(lex_seed, seed):
    entries = _random_lexicon(np.random.default_rng(lex_seed))
    if not entries:
        return
    sp = split_idst(entries, seed)
    sp.check_disjoint()
    assert sorted(e.key for e in sp.train + sp.valid + sp.test) == sorted(e.key for e in entries)
    for (d, l) in {(e.domain, e.tgt_lang) for e in entries}:
        n = sum(e.domain == d and e.tgt_lang == l for e in entries)
        nv = sum(e.domain == d and e.tgt_lang == l for e in sp.valid)
        nt = sum(e.domain == d and e.tgt_lang == l for e in sp.test)
        expected = int(np.floor(0.1 * n)) if n >= 3 else 0
        assert nv == nt == expected


def test_idst_is_seed_deterministic_and_seed_sensitive():
    entries = synth_fixture(0, SynthConfig(n_pairs_per_cell=40))
    a, b, c = split_idst(entries, 1), split_idst(entries, 1), split_idst(entries, 2)
    assert a.test == b.test and a.train == b.train
    assert a.test != c.test


def test_idst_input_order_does_not_matter():
    entries = synth_fixture(0, SynthConfig(n_pairs_per_cell=40))
    shuffled = [entries[i] for i in np.random.default_rng(0).permutation(len(entries))]
    assert split_idst(entries, 3).test == split_idst(shuffled, 3).test


def test_duplicate_keys_are_merged():
    e1 = LexiconEntry("bio", "en", "hi", "cell", ("a",))
    e2 = LexiconEntry("bio", "en", "hi", "cell ", ("b",))
    sp = split_idst([e1, e2], 0)
    assert len(sp.train) == 1 and sp.train[0].targets == ("a", "b")


def test_ddst_keeps_test_domains_out_of_training():
    entries = synth_fixture(0, SynthConfig(n_domains=3))
    sp = split_ddst(entries, ["adm", "bio"], ["chem"], 0)
    assert {e.domain for e in sp.train + sp.valid} == {"adm", "bio"}
    assert {e.domain for e in sp.test} == {"chem"}
    with pytest.raises(ConfigError):
        split_ddst(entries, ["adm"], ["adm"], 0)


def test_iddt_language_disjoint_and_domains_shared():
    entries = synth_fixture(0, SynthConfig(n_langs=3, n_pairs_per_cell=30))
    entries.append(LexiconEntry("extra", "en", "hi", "zz", ("q",)))
    sp = split_iddt(entries, ["hi", "ta"], ["gu"], 0)
    assert {e.tgt_lang for e in sp.train + sp.valid} <= {"hi", "ta"}
    assert {e.tgt_lang for e in sp.test} == {"gu"}
    assert {e.domain for e in sp.test} <= {e.domain for e in sp.train}
    assert "extra" not in {e.domain for e in sp.train}


def test_splits_write_and_read(tmp_path):
    sp = split_idst(synth_fixture(0, SynthConfig(n_pairs_per_cell=40)), 5)
    meta = sp.write(tmp_path)
    assert meta["counts"] == {"train": len(sp.train), "valid": len(sp.valid), "test": len(sp.test)}
    back = DatasetSplits.read(tmp_path)
    assert back.train == sp.train and back.test == sp.test and back.regime == "idst"


def test_synth_fixture_shape_and_determinism():
    entries = synth_fixture(0)
    assert len(entries) == 64
    assert {e.domain for e in entries} == {"adm", "bio"}
    assert {e.tgt_lang for e in entries} == {"hi", "ta"}
    assert synth_fixture(0) == entries
    assert synth_fixture(1) != entries


def test_synth_fixture_needs_the_domain_marker():
    # without the marker the same stem maps to different targets across domains
    assert marker_ambiguity_rate(synth_fixture(0)) > 0


def test_synth_fixture_validation():
    with pytest.raises(ConfigError):
        synth_fixture(0, SynthConfig(n_domains=0))
    with pytest.raises(ConfigError):
        synth_fixture(0, SynthConfig(n_pairs_per_cell=10**6, stem_len=(1, 1)))


def test_entry_validation():
    with pytest.raises(DataError):
        LexiconEntry("bio", "en", "hi", "  ", ("x",))
