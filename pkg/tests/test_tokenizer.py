import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidirep.tokenizer import EOT_ID, Vocab, train_bpe


@pytest.fixture(scope="module")
def small_vocab():
    corpus = (
        "the quick brown fox jumps over the lazy dog . "
        "a stream of words keeps the merge table busy . "
        "every byte value still has a base token under all of this . "
        "numbers like 1234 and signs like #!? survive too . "
    ) * 20
    return train_bpe(corpus, vocab_size=300)


def test_single_merge_on_aaaa():
    v = train_bpe("aaaa", vocab_size=258)
    assert v.merges == ((b"a", b"a"),)
    assert v.size == 258


def test_empty_corpus_rejected():
    with pytest.raises(ValueError, match="empty corpus"):
        train_bpe("", vocab_size=300)


def test_vocab_too_small_rejected():
    with pytest.raises(ValueError, match="vocab too small"):
        train_bpe("abc", vocab_size=256)


def test_no_merge_budget_gives_byte_level_ids():
    v = train_bpe("some words here", vocab_size=257)
    assert v.merges == ()
    enc = v.encode("hi")
    assert list(enc.ids) == [ord("h"), ord("i")]


def test_merge_order_by_frequency_then_lexicographic():
    # pair (a,b) occurs 3x, every other pair at most 2x
    v = train_bpe("ab ab ab cd cd", vocab_size=258)
    assert v.merges[0] == (b"a", b"b")
    # all-ties corpus: lexicographically smallest pair first (space < letters)
    v2 = train_bpe("dc ba", vocab_size=259)
    assert v2.merges[0] == (b" ", b"b")


def test_determinism_byte_identical():
    corpus = "stack overflow stack over stack flow " * 5
    a = train_bpe(corpus, vocab_size=265, seed=1)
    b = train_bpe(corpus, vocab_size=265, seed=1)
    assert a.serialize() == b.serialize()
    assert a.hash == b.hash


def test_corpus_exhaustion_raises():
    with pytest.raises(ValueError, match="corpus too small"):
        train_bpe("ab", vocab_size=400)


def test_empty_text_encodes_empty(small_vocab):
    enc = small_vocab.encode("")
    assert enc.ids == ()
    assert enc.word_starts == ()


def test_word_starts_count_paper_sentence(small_vocab):
    enc = small_vocab.encode("Jones Medical completes acquisition .")
    assert len(enc.word_starts) == 5


def test_word_starts_monotone_and_zero_first(small_vocab):
    enc = small_vocab.encode("the quick fox")
    assert enc.word_starts[0] == 0
    assert list(enc.word_starts) == sorted(set(enc.word_starts))
    assert len(enc.word_starts) == 3


def test_eot_never_emitted(small_vocab):
    enc = small_vocab.encode("the dog . the dog " * 20)
    assert EOT_ID not in enc.ids


def test_decode_empty(small_vocab):
    assert small_vocab.decode([]) == ""


def test_decode_unknown_id(small_vocab):
    with pytest.raises(ValueError, match="unknown id"):
        small_vocab.decode([small_vocab.size])


def test_roundtrip_simple(small_vocab):
    assert small_vocab.decode(small_vocab.encode("hello").ids) == "hello"


@settings(max_examples=300)
@given(st.text(max_size=80))
def test_roundtrip_random_text(small_vocab, text):
    assert small_vocab.decode(small_vocab.encode(text).ids) == text


@settings(max_examples=300)
@given(st.binary(max_size=80))
def test_roundtrip_random_bytes(small_vocab, data):
    enc = small_vocab.encode(data)
    assert small_vocab.decode_bytes(enc.ids) == data


_ASCII = "".join(chr(c) for c in range(0x20, 0x7F)) + "\t\n"


@settings(max_examples=200)
@given(st.text(alphabet=_ASCII, max_size=40))
def test_word_count_matches_whitespace_split(small_vocab, text):
    # word_starts counts whitespace-delimited words (ASCII whitespace)
    enc = small_vocab.encode(text)
    assert len(enc.word_starts) == len(text.split())


def test_save_load_roundtrip(tmp_path, small_vocab):
    path = tmp_path / "vocab.txt"
    small_vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded == small_vocab
    assert loaded.hash == small_vocab.hash
    # header layout per the file format
    lines = path.read_text().splitlines()
    assert lines[0] == f"BPEVOCAB v1 {small_vocab.size}"
    assert lines[1] == f"EOT {EOT_ID}"


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a vocab\n")
    with pytest.raises(ValueError, match="not a vocab file"):
        Vocab.load(path)
