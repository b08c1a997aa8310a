import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairlm import corpus as cp


class TestTokenize:
    def test_lowercase_and_punctuation_detach(self):
        assert cp.tokenize("He is a Doctor.") == ["he", "is", "a", "doctor", "."]

    def test_empty(self):
        assert cp.tokenize("") == []

    def test_whitespace_collapse(self):
        assert cp.tokenize("she  runs") == ["she", "runs"]

    def test_nested_punctuation(self):
        assert cp.tokenize('(hello)."') == ["(", "hello", ")", ".", '"']

    def test_interior_punctuation_kept(self):
        assert cp.tokenize("don't stop") == ["don't", "stop"]

    def test_all_punctuation_chunk(self):
        assert cp.tokenize("--") == ["-", "-"]


word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)
token = st.one_of(word, st.sampled_from(list(".,!?;:")))


@given(st.lists(token, min_size=0, max_size=30))
def test_tokenize_detokenize_round_trip(tokens):
    assert cp.tokenize(cp.detokenize(tokens)) == tokens


class TestBuildVocab:
    def test_min_count_one(self):
        v = cp.build_vocab(["a", "a", "b"], min_count=1)
        assert set(v.tokens) == {"<unk>", "<eos>", "a", "b"}
        assert v.tokens[:2] == ["<unk>", "<eos>"]

    def test_min_count_filters(self):
        v = cp.build_vocab(["a", "a", "b"], min_count=2)
        assert "b" not in v
        assert v.id_of("b") == v.unk_id

    def test_deterministic(self):
        toks = ["z", "b", "b", "a", "a", "q"]
        v1 = cp.build_vocab(toks)
        v2 = cp.build_vocab(toks)
        assert v1.tokens == v2.tokens

    def test_frequency_then_lexicographic_order(self):
        v = cp.build_vocab(["c", "c", "c", "b", "b", "a", "a", "d"])
        assert v.tokens[2:] == ["c", "a", "b", "d"]

    def test_max_size_cap(self):
        v = cp.build_vocab(["a", "a", "b", "b", "c"], max_size=3)
        assert len(v) == 3
        assert "c" not in v

    def test_min_count_validated(self):
        with pytest.raises(ValueError):
            cp.build_vocab(["a"], min_count=0)


class TestVocabulary:
    def test_bijection(self):
        v = cp.build_vocab(["x", "y", "z"])
        for i, tok in enumerate(v.tokens):
            assert v.ids[tok] == i

    def test_reserved_distinct(self):
        v = cp.build_vocab(["a"])
        assert v.unk_id != v.eos_id
        assert v.unk_id < len(v) and v.eos_id < len(v)

    def test_rejects_whitespace_token(self):
        with pytest.raises(ValueError):
            cp.Vocabulary(["<unk>", "<eos>", "a b"])

    def test_rejects_duplicate(self):
        with pytest.raises(ValueError):
            cp.Vocabulary(["<unk>", "<eos>", "a", "a"])

    def test_save_load_round_trip(self, tmp_path):
        v = cp.build_vocab(["alpha", "beta", "beta"], min_count=1)
        path = tmp_path / "vocab.txt"
        v.save(path)
        loaded = cp.Vocabulary.load(path)
        assert loaded.tokens == v.tokens
        # line number equals id, reserved tokens first
        lines = path.read_text().splitlines()
        assert lines[0] == "<unk>" and lines[1] == "<eos>"
        assert lines.index("beta") == v.ids["beta"]


def write_pairs(tmp_path, text):
    p = tmp_path / "pairs.txt"
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadGenderPairs:
    def test_basic(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\nwoman\tman\n")
        lex = cp.load_gender_pairs(path, small_vocab)
        assert lex.size == 2
        assert lex.swap[small_vocab.ids["she"]] == small_vocab.ids["he"]
        assert lex.swap[small_vocab.ids["man"]] == small_vocab.ids["woman"]

    def test_out_of_vocab_pair_dropped(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\ntsarina\ttsar\n")
        lex = cp.load_gender_pairs(path, small_vocab)
        assert lex.size == 1
        assert lex.dropped == (("tsarina", "tsar"),)

    def test_duplicate_token_errors(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\nshe\tman\n")
        with pytest.raises(cp.LexiconError, match="duplicate"):
            cp.load_gender_pairs(path, small_vocab)

    def test_malformed_line_names_line_number(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\nnot a pair line\n")
        with pytest.raises(cp.LexiconError, match="line 2"):
            cp.load_gender_pairs(path, small_vocab)

    def test_both_sides_errors(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\tshe\n")
        with pytest.raises(cp.LexiconError, match="both sides"):
            cp.load_gender_pairs(path, small_vocab)

    def test_comments_and_blanks_ignored(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "# comment\n\nshe\the\n")
        assert cp.load_gender_pairs(path, small_vocab).size == 1

    def test_swap_only_section(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\n[swap-only]\nnurse\tdoctor\n")
        lex = cp.load_gender_pairs(path, small_vocab)
        nid, did = small_vocab.ids["nurse"], small_vocab.ids["doctor"]
        assert lex.swap[nid] == did and lex.swap[did] == nid
        assert lex.size == 1  # swap-only entries are not pairs
        assert nid not in lex.neutral and did not in lex.neutral
        assert lex.gender_of(nid) is None

    def test_swap_only_duplicate_source_errors(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\n[swap-only]\nshe\tman\n")
        with pytest.raises(cp.LexiconError, match="already mapped"):
            cp.load_gender_pairs(path, small_vocab)

    def test_swap_only_broken_involution_errors(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path,
                           "[swap-only]\nnurse\tdoctor\ndoctor\tmath\n")
        with pytest.raises(cp.LexiconError, match="involution"):
            cp.load_gender_pairs(path, small_vocab)

    def test_swap_is_involution(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\nwoman\tman\n[swap-only]\nnurse\tdoctor\n")
        lex = cp.load_gender_pairs(path, small_vocab)
        for k, v in lex.swap.items():
            assert lex.swap[v] == k

    def test_neutral_partition(self, tmp_path, small_vocab):
        path = write_pairs(tmp_path, "she\the\nwoman\tman\n")
        lex = cp.load_gender_pairs(path, small_vocab)
        gendered = set(lex.swap)
        universe = lex.neutral | gendered | {small_vocab.unk_id, small_vocab.eos_id}
        assert universe == set(range(len(small_vocab)))
        assert not (lex.neutral & gendered)

    def test_default_file_loads(self):
        from fairlm import default_data_path
        words = []
        for line in open(default_data_path("gender_pairs.txt"), encoding="utf-8"):
            line = line.strip()
            if line and not line.startswith("#") and line != "[swap-only]":
                words.extend(line.split("\t"))
        vocab = cp.Vocabulary(list(cp.RESERVED_TOKENS) + sorted(set(words)))
        lex = cp.load_gender_pairs(default_data_path("gender_pairs.txt"), vocab)
        assert lex.size >= 60
        assert not lex.dropped


class TestCdaAugment:
    def test_swaps_and_doubles(self, small_vocab, small_lexicon):
        ids = small_vocab.encode(["he", "is", "a", "doctor"])
        out = cp.cda_augment(cp.TokenStream(ids), small_lexicon)
        tokens = [small_vocab.token_of(int(i)) for i in out.ids]
        assert tokens == ["he", "is", "a", "doctor", "she", "is", "a", "doctor"]
        assert out.source == "augmented"

    def test_no_gendered_tokens_copies(self, small_vocab, small_lexicon):
        ids = small_vocab.encode(["math", "is", "math"])
        out = cp.cda_augment(cp.TokenStream(ids), small_lexicon)
        assert np.array_equal(out.ids, np.concatenate([ids, ids]))

    def test_empty_stream(self, small_vocab, small_lexicon):
        out = cp.cda_augment(cp.TokenStream(np.array([], dtype=np.int64)),
                             small_lexicon)
        assert len(out) == 0


ids_strategy = st.lists(st.integers(min_value=0, max_value=14), min_size=0, max_size=60)


@given(ids_strategy)
@settings(max_examples=60)
def test_cda_pair_counts_equal(raw_ids):
    vocab = cp.Vocabulary(list(cp.RESERVED_TOKENS) +
                          ["she", "he", "woman", "man"] + [f"w{i}" for i in range(9)])
    lex = cp.lexicon_from_pairs([("she", "he"), ("woman", "man")], vocab)
    stream = cp.TokenStream(np.array(raw_ids, dtype=np.int64))
    out = cp.cda_augment(stream, lex)
    assert len(out) == 2 * len(stream)
    counts = np.bincount(out.ids, minlength=len(vocab)) if len(out) else np.zeros(len(vocab))
    for f, m in lex.pairs:
        assert counts[f] == counts[m]


@given(ids_strategy)
@settings(max_examples=30)
def test_cda_double_augment(raw_ids):
    vocab = cp.Vocabulary(list(cp.RESERVED_TOKENS) +
                          ["she", "he", "woman", "man"] + [f"w{i}" for i in range(9)])
    lex = cp.lexicon_from_pairs([("she", "he"), ("woman", "man")], vocab)
    stream = cp.TokenStream(np.array(raw_ids, dtype=np.int64))
    twice = cp.cda_augment(cp.cda_augment(stream, lex), lex)
    assert len(twice) == 4 * len(stream)
    if len(twice):
        counts = np.bincount(twice.ids, minlength=len(vocab))
        for f, m in lex.pairs:
            assert counts[f] == counts[m]


class TestStreamIO:
    def test_encode_lines_adds_eos(self, small_vocab):
        stream = cp.encode_lines([["he", "is"], ["a", "doctor"]], small_vocab)
        eos = small_vocab.eos_id
        assert list(stream.ids) == [small_vocab.ids["he"], small_vocab.ids["is"], eos,
                                    small_vocab.ids["a"], small_vocab.ids["doctor"], eos]

    def test_stream_to_lines_round_trip(self, small_vocab):
        lines = [["he", "is", "a", "doctor", "."], ["she", "is", "tired"]]
        stream = cp.encode_lines(lines, small_vocab)
        assert cp.stream_to_lines(stream, small_vocab) == [cp.detokenize(l) for l in lines]

    def test_read_token_lines(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("He is a Doctor.\n\nshe  runs\n", encoding="utf-8")
        assert cp.read_token_lines(path) == [["he", "is", "a", "doctor", "."],
                                             ["she", "runs"]]

    def test_unknown_maps_to_unk(self, small_vocab):
        stream = cp.encode_lines([["he", "zzz"]], small_vocab)
        assert stream.ids[1] == small_vocab.unk_id
